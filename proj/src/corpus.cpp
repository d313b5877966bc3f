#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "nanonet/error.hpp"
#include "nanonet/harness.hpp"

namespace nanonet {

namespace {

using nlohmann::json;

// Splits one CSV record; returns false when the line is malformed.
bool split_csv(const std::string& line, std::vector<std::string>& fields) {
  fields.assign(1, "");
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          fields.back().push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        fields.back().push_back(c);
      }
    } else if (c == '"') {
      if (!fields.back().empty()) return false;
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back().push_back(c);
    }
  }
  return !quoted;
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::optional<int> parse_label(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  const int v = std::stoi(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

}  // namespace

CorpusFormat format_for(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? CorpusFormat::csv : CorpusFormat::jsonl;
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format, std::optional<std::size_t> n_classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus " + path.string());
  Corpus corpus;
  corpus.name = path.stem().string();
  std::vector<std::size_t> bad_lines;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> fields;
  while (std::getline(in, line)) {
    ++lineno;
    if (format == CorpusFormat::csv && lineno == 1) {
      if (line.rfind("text,label", 0) != 0) throw ValidationError(path.string() + ": CSV header must be text,label");
      continue;
    }
    if (line.empty() || line == "\r") continue;
    try {
      Example ex;
      if (format == CorpusFormat::jsonl) {
        const json j = json::parse(line);
        ex.text = j.at("text").get<std::string>();
        if (j.contains("label") && !j.at("label").is_null()) ex.label = j.at("label").get<int>();
      } else {
        if (!split_csv(line, fields) || fields.size() != 2) throw std::invalid_argument("csv");
        ex.text = fields[0];
        ex.label = parse_label(fields[1]);
      }
      if (ex.label && *ex.label < 0) throw std::invalid_argument("negative label");
      corpus.examples.push_back(std::move(ex));
    } catch (const std::exception&) {
      bad_lines.push_back(lineno);
    }
  }
  if (!bad_lines.empty()) {
    std::string msg = path.string() + ": malformed records on line(s)";
    for (std::size_t i = 0; i < bad_lines.size(); ++i) msg += (i ? ", " : " ") + std::to_string(bad_lines[i]);
    throw ValidationError(msg);
  }
  if (corpus.examples.empty()) throw ValidationError(path.string() + ": corpus is empty");

  int max_label = -1;
  for (const auto& ex : corpus.examples)
    if (ex.label) max_label = std::max(max_label, *ex.label);
  if (n_classes) {
    if (max_label >= 0 && static_cast<std::size_t>(max_label) >= *n_classes) {
      throw ValidationError(path.string() + ": label " + std::to_string(max_label) + " is not below n_classes " +
                            std::to_string(*n_classes));
    }
    corpus.n_classes = *n_classes;
  } else {
    corpus.n_classes = static_cast<std::size_t>(max_label + 1);
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path, CorpusFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path.string());
  if (format == CorpusFormat::csv) out << "text,label\n";
  for (const auto& ex : corpus.examples) {
    if (format == CorpusFormat::jsonl) {
      json j = {{"text", ex.text}};
      if (ex.label) j["label"] = *ex.label;
      out << j.dump() << '\n';
    } else {
      out << csv_quote(ex.text) << ',' << (ex.label ? std::to_string(*ex.label) : "") << '\n';
    }
  }
  if (!out) throw IoError("failed while writing " + path.string());
}

SemiSplit make_split(const Corpus& corpus, std::size_t per_class, std::size_t dev_size, std::size_t test_size,
                     std::uint64_t seed) {
  if (corpus.n_classes == 0) throw ValidationError("corpus has no classes");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  SemiSplit split;
  split.per_class = per_class;
  split.seed = seed;
  for (Corpus* c : {&split.labeled, &split.unlabeled, &split.dev, &split.test}) c->n_classes = corpus.n_classes;
  split.labeled.name = corpus.name + "-labeled";
  split.unlabeled.name = corpus.name + "-unlabeled";
  split.dev.name = corpus.name + "-dev";
  split.test.name = corpus.name + "-test";

  std::vector<std::size_t> taken(corpus.n_classes, 0);
  std::vector<std::size_t> rest;
  for (auto idx : order) {
    const auto& ex = corpus.examples[idx];
    if (ex.label && taken[static_cast<std::size_t>(*ex.label)] < per_class) {
      ++taken[static_cast<std::size_t>(*ex.label)];
      split.labeled.examples.push_back(ex);
    } else {
      rest.push_back(idx);
    }
  }
  for (std::size_t c = 0; c < corpus.n_classes; ++c) {
    if (taken[c] < per_class) {
      throw ValidationError("class " + std::to_string(c) + " has only " + std::to_string(taken[c]) +
                            " labeled examples, " + std::to_string(per_class) + " required");
    }
  }
  // Sort the labeled pick by class for stable, readable files.
  std::stable_sort(split.labeled.examples.begin(), split.labeled.examples.end(),
                   [](const Example& a, const Example& b) { return *a.label < *b.label; });

  std::size_t pos = 0;
  for (; pos < rest.size(); ++pos) {
    const auto& ex = corpus.examples[rest[pos]];
    if (split.dev.size() < dev_size && ex.label) {
      split.dev.examples.push_back(ex);
    } else if (split.test.size() < test_size && ex.label) {
      split.test.examples.push_back(ex);
    } else {
      split.unlabeled.examples.push_back({ex.text, std::nullopt});
    }
  }
  if (split.dev.size() < dev_size || split.test.size() < test_size) {
    throw ValidationError("not enough labeled examples left for the requested dev/test sizes");
  }
  return split;
}

void write_split(const SemiSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_corpus(split.labeled, dir / "labeled.jsonl", CorpusFormat::jsonl);
  write_corpus(split.unlabeled, dir / "unlabeled.jsonl", CorpusFormat::jsonl);
  write_corpus(split.dev, dir / "dev.jsonl", CorpusFormat::jsonl);
  write_corpus(split.test, dir / "test.jsonl", CorpusFormat::jsonl);
}

std::vector<std::vector<int>> tokenize_corpus(const Corpus& corpus, std::size_t max_len) {
  std::vector<std::vector<int>> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus.examples) out.push_back(tokenize(ex.text, max_len));
  return out;
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

std::vector<int> predict(const Encoder& model, const std::vector<std::vector<int>>& sequences, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(sequences.size());
  const std::size_t c = model.config().n_classes;
  for (std::size_t b = 0; b < sequences.size(); b += batch_size) {
    const std::size_t e = std::min(sequences.size(), b + batch_size);
    std::vector<std::vector<int>> chunk(sequences.begin() + static_cast<std::ptrdiff_t>(b),
                                        sequences.begin() + static_cast<std::ptrdiff_t>(e));
    const auto trace = forward(model, pack_sequences(chunk), {false, 0});
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.push_back(static_cast<int>(argmax_lowest(trace.logits.data().subspan(i * c, c))));
    }
  }
  return out;
}

double evaluate(const Encoder& model, const Corpus& corpus, std::size_t max_len, std::size_t batch_size) {
  if (corpus.n_classes != model.config().n_classes) {
    throw ConfigError("model predicts " + std::to_string(model.config().n_classes) + " classes but corpus has " +
                      std::to_string(corpus.n_classes));
  }
  if (corpus.examples.empty()) throw ValidationError("cannot evaluate on an empty corpus");
  for (const auto& ex : corpus.examples)
    if (!ex.label) throw ValidationError("evaluation corpus contains unlabeled examples");
  const auto preds = predict(model, tokenize_corpus(corpus, max_len), batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == *corpus.examples[i].label;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace nanonet
