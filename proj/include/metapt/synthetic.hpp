// SPDX-License-Identifier: Apache-2.0
//
// Template-generated cross-domain sentiment benchmark. Class evidence comes
// from a shared sentiment lexicon; domain evidence from per-domain noun
// lexicons that never overlap each other or the sentiment words.
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "metapt/corpus.hpp"

namespace metapt {

struct BenchmarkSpec {
  int n_classes = 5;  // 2 or 5
  std::string source_domain = "restaurants";
  std::vector<std::string> pretrain_domains{"restaurants", "hotels", "electronics", "books", "fashion",
                                            "travel",      "games",  "music",       "fitness", "beauty"};
  std::vector<std::string> downstream_domains{"movies", "phones", "cars", "software"};
  std::size_t backbone_sentences = 8000;
  std::size_t source_size = 1500;
  std::size_t pretrain_size = 4000;
  std::size_t downstream_size = 400;
  /// Probability that a sentiment slot in a three-slot sentence is taken
  /// from an adjacent class.
  double slot_noise = 0.2;
  /// Probability that a backbone-corpus sentence carries a label word.
  double label_word_rate = 0.6;
  /// Probability that a carried label word matches the sentence class.
  double label_word_fidelity = 0.7;
  /// Extra domain lexicons (name -> nouns), checked for collisions.
  std::map<std::string, std::vector<std::string>> custom_domains;
};

struct Benchmark {
  std::vector<std::string> label_words;
  std::vector<std::string> backbone_corpus;  // unlabeled text, every domain
  Dataset source;                            // labeled, source domain only
  Dataset pretrain;                          // open corpus; labels are generation truth
  std::vector<Dataset> downstream;           // one per downstream domain
  std::vector<std::string> pretrain_domain_of;  // domain per pretrain example
  /// Words the tokenizer must keep regardless of frequency.
  std::vector<std::string> reserved_words() const;
};

/// Throws DataError on lexicon collisions or unknown domains, ConfigError on
/// an unsupported class count or a downstream domain reused for pre-training.
Benchmark make_synthetic_benchmark(const BenchmarkSpec& spec, std::uint64_t seed);

const std::vector<std::string>& sentiment_words(int cls, int n_classes);
const std::vector<std::string>& default_label_words(int n_classes);
/// Built-in domain names.
std::vector<std::string> builtin_domains();
const std::vector<std::string>& domain_nouns(const std::string& domain);

/// One sentence of class `cls` about `domain`.
std::string generate_sentence(const std::vector<std::string>& nouns, int cls, int n_classes, double slot_noise,
                              std::mt19937_64& rng);

/// Majority class of the sentiment words in `text` (ties to the smaller
/// class); -1 when none occur.
int lexicon_label(const std::string& text, int n_classes);

/// Replaces every sentiment word of class `from` with the word at the same
/// lexicon position in class `to`.
std::string swap_class_words(const std::string& text, int from, int to, int n_classes);

}  // namespace metapt
