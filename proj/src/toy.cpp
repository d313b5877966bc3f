#include <algorithm>
#include <random>
#include <set>

#include "nanonet/error.hpp"
#include "nanonet/harness.hpp"

namespace nanonet {

namespace {

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words{"the", "a",    "of",   "and",  "to",    "in",   "on",  "with",
                                              "new", "said", "after", "week", "more", "about", "over", "from"};
  return words;
}

// Pronounceable pseudo-words, unique across the whole lexicon.
std::vector<std::vector<std::string>> make_lexicon(std::size_t n_classes, std::size_t per_class, std::uint64_t seed) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_c(0, consonants.size() - 1), pick_v(0, vowels.size() - 1);
  std::uniform_int_distribution<int> syllables(2, 3);
  std::set<std::string> used(filler_words().begin(), filler_words().end());
  std::vector<std::vector<std::string>> lex(n_classes);
  for (auto& words : lex) {
    while (words.size() < per_class) {
      std::string w;
      const int n = syllables(rng);
      for (int s = 0; s < n; ++s) {
        w.push_back(consonants[pick_c(rng)]);
        w.push_back(vowels[pick_v(rng)]);
      }
      if (used.insert(w).second) words.push_back(w);
    }
  }
  return lex;
}

}  // namespace

Corpus generate_toy_corpus(const ToyCorpusOptions& o) {
  if (o.n_classes < 2 || o.n_classes > 4) throw ConfigError("toy corpus supports 2 to 4 classes");
  if (o.keywords_per_class == 0 || o.keywords_per_example == 0) throw ConfigError("toy corpus needs keywords");
  if (o.mixing < 0.0 || o.mixing > 1.0) throw ConfigError("mixing must lie in [0, 1]");
  const auto lex = make_lexicon(o.n_classes, o.keywords_per_class, o.lexicon_seed);
  const auto& filler = filler_words();

  std::mt19937_64 rng(o.seed);
  std::uniform_int_distribution<std::size_t> pick_other(1, o.n_classes - 1);
  std::uniform_int_distribution<std::size_t> pick_kw(0, o.keywords_per_class - 1), pick_fill(0, filler.size() - 1);
  std::bernoulli_distribution mixed(o.mixing);

  Corpus corpus;
  corpus.name = "toy";
  corpus.n_classes = o.n_classes;
  for (std::size_t n = 0; n < o.n_examples; ++n) {
    // Balanced labels: cycle through classes, order randomized by the shuffle below.
    const std::size_t label = n % o.n_classes;
    std::vector<std::string> words;
    for (std::size_t k = 0; k < o.keywords_per_example; ++k) {
      const std::size_t cls = mixed(rng) ? (label + pick_other(rng)) % o.n_classes : label;
      words.push_back(lex[cls][pick_kw(rng)]);
    }
    for (std::size_t k = 0; k < o.noise_words; ++k) words.push_back(filler[pick_fill(rng)]);
    std::shuffle(words.begin(), words.end(), rng);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    corpus.examples.push_back({std::move(text), static_cast<int>(label)});
  }
  std::shuffle(corpus.examples.begin(), corpus.examples.end(), rng);
  return corpus;
}

}  // namespace nanonet
