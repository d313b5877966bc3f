#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nanonet/encoder.hpp"

namespace nanonet {

struct Example {
  std::string text;
  std::optional<int> label;

  bool operator==(const Example&) const = default;
};

struct Corpus {
  std::vector<Example> examples;
  std::size_t n_classes = 0;
  std::string name;

  std::size_t size() const { return examples.size(); }
};

enum class CorpusFormat { jsonl, csv };

// .csv selects CSV, anything else JSONL.
CorpusFormat format_for(const std::filesystem::path& path);

// JSONL: {"text": "...", "label": 3} per line, label optional.
// CSV:   header text,label; text may be double-quoted with "" escapes.
// n_classes is inferred as max label + 1 when not given.
Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format,
                   std::optional<std::size_t> n_classes = std::nullopt);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path, CorpusFormat format);

struct SemiSplit {
  Corpus labeled;
  Corpus unlabeled;  // labels stripped
  Corpus dev;
  Corpus test;
  std::size_t per_class = 0;
  std::uint64_t seed = 0;
};

// Stratified labeled pick of per_class examples per class, then dev_size and
// test_size examples from the shuffled remainder; everything else becomes
// unlabeled. test_size == 0 puts nothing in test.
SemiSplit make_split(const Corpus& corpus, std::size_t per_class, std::size_t dev_size, std::size_t test_size,
                     std::uint64_t seed);
// Writes labeled/unlabeled/dev/test .jsonl into dir.
void write_split(const SemiSplit& split, const std::filesystem::path& dir);

std::vector<std::vector<int>> tokenize_corpus(const Corpus& corpus, std::size_t max_len);

// Argmax predictions in eval mode; ties go to the lowest class index.
std::vector<int> predict(const Encoder& model, const std::vector<std::vector<int>>& sequences,
                         std::size_t batch_size = 32);
std::size_t argmax_lowest(std::span<const double> row);

// Fraction of argmax-correct predictions over a fully labeled corpus.
double evaluate(const Encoder& model, const Corpus& corpus, std::size_t max_len, std::size_t batch_size = 32);

// Linear CKA between column-centered X [n×p] and Y [n×q].
double linear_cka(const Tensor& x, const Tensor& y);

struct CKAMatrix {
  // values[i][j]: teacher layer i (0 = embeddings) vs student layer j.
  std::vector<std::vector<double>> values;
};

// CLS representations of the first n_samples probe examples, every teacher
// layer against every student layer.
CKAMatrix cka_heatmap(const Encoder& teacher, const Encoder& student, const Corpus& probe, std::size_t n_samples,
                      std::size_t max_len);
// Header row holds student layer indices, first column teacher layer indices.
void write_cka_csv(const CKAMatrix& matrix, const std::filesystem::path& path);

// Synthetic topic-style corpus. Each class owns keywords_per_class
// pseudo-words; an example holds keywords_per_example keywords among
// noise_words filler words. Each keyword comes from a different random class
// with probability `mixing`; the label is the class the example was drawn for.
struct ToyCorpusOptions {
  std::size_t n_classes = 4;
  std::size_t n_examples = 1000;
  std::size_t keywords_per_class = 24;
  std::size_t keywords_per_example = 1;
  std::size_t noise_words = 3;
  double mixing = 0.0;
  std::uint64_t seed = 1;
  // The lexicon depends only on this seed, so corpora sharing it share words.
  std::uint64_t lexicon_seed = 7;
};

Corpus generate_toy_corpus(const ToyCorpusOptions& options);

}  // namespace nanonet
