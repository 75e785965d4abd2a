// SPDX-License-Identifier: Apache-2.0
#include "metapt/synthetic.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <unordered_map>

#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"
#include "metapt/tokenizer.hpp"

namespace metapt {

namespace {

const std::vector<std::vector<std::string>>& five_class_lexicon() {
  static const std::vector<std::vector<std::string>> lex{
      {"awful", "horrible", "dreadful", "atrocious", "abysmal", "appalling", "miserable", "disastrous"},
      {"poor", "weak", "disappointing", "mediocre", "flawed", "subpar", "lacking", "dull"},
      {"average", "ordinary", "passable", "fair", "plain", "moderate", "standard", "tolerable"},
      {"nice", "solid", "pleasant", "decent", "enjoyable", "fine", "likable", "satisfying"},
      {"excellent", "superb", "outstanding", "wonderful", "fantastic", "brilliant", "amazing", "perfect"},
  };
  return lex;
}

const std::vector<std::vector<std::string>>& two_class_lexicon() {
  static const std::vector<std::vector<std::string>> lex = [] {
    const auto& f = five_class_lexicon();
    std::vector<std::vector<std::string>> out(2);
    out[0] = f[0];
    out[0].insert(out[0].end(), f[1].begin(), f[1].end());
    out[1] = f[3];
    out[1].insert(out[1].end(), f[4].begin(), f[4].end());
    return out;
  }();
  return lex;
}

const std::vector<std::vector<std::string>>& lexicon(int n_classes) {
  if (n_classes == 5) return five_class_lexicon();
  if (n_classes == 2) return two_class_lexicon();
  throw ConfigError("synthetic benchmark supports 2 or 5 classes, got " + std::to_string(n_classes));
}

const std::map<std::string, std::vector<std::string>>& builtin_lexicons() {
  static const std::map<std::string, std::vector<std::string>> d{
      {"restaurants", {"pasta", "waiter", "menu", "dessert", "steak", "chef", "kitchen", "appetizer"}},
      {"hotels", {"lobby", "suite", "receptionist", "pillow", "balcony", "minibar", "checkin", "housekeeping"}},
      {"electronics", {"charger", "screen", "keyboard", "speaker", "adapter", "headphones", "router", "cable"}},
      {"books", {"novel", "chapter", "author", "paperback", "prose", "narrator", "epilogue", "storyline"}},
      {"fashion", {"jacket", "sneakers", "fabric", "stitching", "collar", "denim", "zipper", "scarf"}},
      {"travel", {"flight", "airport", "luggage", "itinerary", "cruise", "passport", "terminal", "layover"}},
      {"games", {"console", "controller", "level", "quest", "multiplayer", "graphics", "savepoint", "boss"}},
      {"music", {"album", "guitar", "vocals", "concert", "chorus", "drummer", "melody", "lyrics"}},
      {"fitness", {"gym", "treadmill", "trainer", "dumbbell", "yoga", "locker", "membership", "workout"}},
      {"beauty", {"lotion", "shampoo", "perfume", "lipstick", "moisturizer", "serum", "fragrance", "mascara"}},
      {"movies", {"film", "actor", "director", "scene", "soundtrack", "screenplay", "cinematography", "sequel"}},
      {"phones", {"handset", "battery", "camera", "touchscreen", "ringtone", "sim", "bezel", "earpiece"}},
      {"cars", {"engine", "sedan", "brakes", "dashboard", "mileage", "transmission", "tires", "steering"}},
      {"software", {"app", "update", "interface", "installer", "plugin", "login", "settings", "patch"}},
  };
  return d;
}

const std::vector<std::string>& function_words() {
  static const std::vector<std::string> w{"the", "this", "my", "a",      "and",     "but",  "really", "quite",
                                          "so",  "felt", "seemed", "is", "was",     "i",    "thought", "honestly",
                                          "overall", "it", "would", "say", "in",    "short", ",",      ".",
                                          "!",   ":"};
  return w;
}

// Sentence skeletons; 'N' is a noun slot, 'S' a sentiment slot.
const std::vector<std::vector<std::string>>& skeletons(int slots) {
  static const std::vector<std::vector<std::vector<std::string>>> s{
      {},
      {{"the", "N", "was", "S"},
       {"this", "N", "is", "S"},
       {"honestly", "the", "N", "felt", "S"},
       {"my", "N", "seemed", "S"},
       {"S", "N", "overall"}},
      {{"the", "N", "was", "S", "and", "the", "N", "was", "S"},
       {"S", "N", ",", "S", "N"},
       {"i", "thought", "the", "N", "seemed", "S", "and", "S"},
       {"really", "S", "N", "and", "quite", "S", "N"}},
      {{"the", "N", "was", "S", ",", "the", "N", "felt", "S", "and", "the", "N", "was", "S"},
       {"S", "N", ",", "S", "N", "and", "a", "S", "N"},
       {"so", "S", ",", "really", "S", "N", "and", "S", "N"}},
  };
  return s.at(static_cast<std::size_t>(slots));
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

int neighbor(int cls, int n_classes, std::mt19937_64& rng) {
  if (cls == 0) return 1;
  if (cls == n_classes - 1) return n_classes - 2;
  return std::bernoulli_distribution(0.5)(rng) ? cls - 1 : cls + 1;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

const std::unordered_map<std::string, std::pair<int, int>>& word_index(int n_classes) {
  static std::map<int, std::unordered_map<std::string, std::pair<int, int>>> cache;
  static std::mutex mu;
  std::lock_guard lock(mu);
  auto it = cache.find(n_classes);
  if (it != cache.end()) return it->second;
  std::unordered_map<std::string, std::pair<int, int>> idx;
  const auto& lex = lexicon(n_classes);
  for (int c = 0; c < n_classes; ++c)
    for (std::size_t i = 0; i < lex[static_cast<std::size_t>(c)].size(); ++i)
      idx[lex[static_cast<std::size_t>(c)][i]] = {c, static_cast<int>(i)};
  return cache.emplace(n_classes, std::move(idx)).first->second;
}

void check_lexicons(const std::map<std::string, const std::vector<std::string>*>& domains, int n_classes,
                    const std::vector<std::string>& labels) {
  std::map<std::string, std::string> owner;
  auto claim = [&](const std::string& word, const std::string& who) {
    auto [it, fresh] = owner.emplace(word, who);
    if (!fresh && it->second != who) {
      throw DataError("lexicon collision: '" + word + "' belongs to both " + it->second + " and " + who);
    }
    if (!fresh) throw DataError("lexicon collision: '" + word + "' repeated in " + who);
  };
  for (const auto& w : function_words()) owner.emplace(w, "function words");
  for (int c = 0; c < n_classes; ++c)
    for (const auto& w : lexicon(n_classes)[static_cast<std::size_t>(c)]) claim(w, "sentiment class " + std::to_string(c));
  for (const auto& w : labels) claim(w, "label words");
  for (const auto& [name, nouns] : domains)
    for (const auto& w : *nouns) {
      if (Tokenizer::split(w) != std::vector<std::string>{w}) {
        throw DataError("domain " + name + ": '" + w + "' is not a single lowercase token");
      }
      claim(w, "domain " + name);
    }
}

}  // namespace

const std::vector<std::string>& sentiment_words(int cls, int n_classes) {
  const auto& lex = lexicon(n_classes);
  if (cls < 0 || cls >= n_classes) throw ContractError("sentiment_words: class out of range");
  return lex[static_cast<std::size_t>(cls)];
}

const std::vector<std::string>& default_label_words(int n_classes) {
  static const std::vector<std::string> five{"terrible", "bad", "okay", "good", "great"};
  static const std::vector<std::string> two{"bad", "good"};
  if (n_classes == 5) return five;
  if (n_classes == 2) return two;
  throw ConfigError("no default label words for " + std::to_string(n_classes) + " classes");
}

std::vector<std::string> builtin_domains() {
  std::vector<std::string> out;
  for (const auto& [name, _] : builtin_lexicons()) out.push_back(name);
  return out;
}

const std::vector<std::string>& domain_nouns(const std::string& domain) {
  auto it = builtin_lexicons().find(domain);
  if (it == builtin_lexicons().end()) throw ConfigError("unknown domain '" + domain + "'");
  return it->second;
}

std::string generate_sentence(const std::vector<std::string>& nouns, int cls, int n_classes, double slot_noise,
                              std::mt19937_64& rng) {
  const auto& lex = lexicon(n_classes);
  const int slots = std::uniform_int_distribution<int>(1, 3)(rng);
  const auto& skel = pick(skeletons(slots), rng);
  // One slot of a three-slot sentence may come from a neighbouring class;
  // the other two keep the majority.
  int noisy_slot = -1;
  if (slots == 3 && std::bernoulli_distribution(slot_noise)(rng)) {
    noisy_slot = std::uniform_int_distribution<int>(0, 2)(rng);
  }
  std::vector<std::string> words;
  int slot = 0;
  for (const auto& tok : skel) {
    if (tok == "N") {
      words.push_back(pick(nouns, rng));
    } else if (tok == "S") {
      const int c = slot == noisy_slot ? neighbor(cls, n_classes, rng) : cls;
      words.push_back(pick(lex[static_cast<std::size_t>(c)], rng));
      ++slot;
    } else {
      words.push_back(tok);
    }
  }
  return join(words);
}

int lexicon_label(const std::string& text, int n_classes) {
  const auto& idx = word_index(n_classes);
  std::vector<int> votes(static_cast<std::size_t>(n_classes), 0);
  bool any = false;
  for (const auto& w : Tokenizer::split(text)) {
    auto it = idx.find(w);
    if (it == idx.end()) continue;
    ++votes[static_cast<std::size_t>(it->second.first)];
    any = true;
  }
  if (!any) return -1;
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

std::string swap_class_words(const std::string& text, int from, int to, int n_classes) {
  const auto& idx = word_index(n_classes);
  const auto& target = sentiment_words(to, n_classes);
  std::vector<std::string> words = Tokenizer::split(text);
  for (auto& w : words) {
    auto it = idx.find(w);
    if (it != idx.end() && it->second.first == from) {
      w = target[static_cast<std::size_t>(it->second.second) % target.size()];
    }
  }
  return join(words);
}

std::vector<std::string> Benchmark::reserved_words() const {
  std::vector<std::string> out = label_words;
  for (const char* w : {"it", "was", "."}) out.emplace_back(w);
  return out;
}

Benchmark make_synthetic_benchmark(const BenchmarkSpec& spec, std::uint64_t seed) {
  const int k = spec.n_classes;
  Benchmark bm;
  bm.label_words = default_label_words(k);

  std::map<std::string, const std::vector<std::string>*> domains;
  auto resolve = [&](const std::string& name) -> const std::vector<std::string>& {
    auto c = spec.custom_domains.find(name);
    if (c != spec.custom_domains.end()) return c->second;
    return domain_nouns(name);
  };
  for (const auto& [name, nouns] : spec.custom_domains) {
    if (builtin_lexicons().count(name)) throw ConfigError("custom domain '" + name + "' shadows a built-in one");
    if (nouns.empty()) throw DataError("custom domain '" + name + "' has no nouns");
    domains[name] = &nouns;
  }
  std::vector<std::string> all_names = spec.pretrain_domains;
  all_names.push_back(spec.source_domain);
  all_names.insert(all_names.end(), spec.downstream_domains.begin(), spec.downstream_domains.end());
  for (const auto& name : all_names) domains[name] = &resolve(name);
  check_lexicons(domains, k, bm.label_words);

  const std::set<std::string> pre(spec.pretrain_domains.begin(), spec.pretrain_domains.end());
  for (const auto& d : spec.downstream_domains) {
    if (pre.count(d) || d == spec.source_domain) {
      throw ConfigError("downstream domain '" + d + "' is also used for pre-training");
    }
  }
  if (spec.pretrain_domains.empty() || spec.downstream_domains.empty()) {
    throw ConfigError("benchmark needs at least one pre-training and one downstream domain");
  }

  auto labeled_set = [&](const std::string& name, const std::vector<std::string>& doms, std::size_t n,
                         std::vector<std::string>* domain_of) {
    std::mt19937_64 rng(derive_seed(seed, "dataset/" + name));
    Dataset ds{name, k, {}};
    for (std::size_t i = 0; i < n; ++i) {
      const int cls = static_cast<int>(i % static_cast<std::size_t>(k));
      const auto& dom = doms[std::uniform_int_distribution<std::size_t>(0, doms.size() - 1)(rng)];
      ds.examples.push_back({generate_sentence(*domains.at(dom), cls, k, spec.slot_noise, rng), cls});
      if (domain_of) domain_of->push_back(dom);
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    Dataset shuffled{name, k, {}};
    std::vector<std::string> doms_shuffled;
    for (std::size_t i : perm) {
      shuffled.examples.push_back(ds.examples[i]);
      if (domain_of) doms_shuffled.push_back((*domain_of)[i]);
    }
    if (domain_of) *domain_of = std::move(doms_shuffled);
    return shuffled;
  };

  bm.source = labeled_set("source-" + spec.source_domain, {spec.source_domain}, spec.source_size, nullptr);
  bm.pretrain = labeled_set("open-corpus", spec.pretrain_domains, spec.pretrain_size, &bm.pretrain_domain_of);
  for (const auto& d : spec.downstream_domains) {
    bm.downstream.push_back(labeled_set(d, {d}, spec.downstream_size, nullptr));
  }

  // Backbone text spans every domain. Label words co-occur with the class of
  // the sentence only noisily and in varied frames.
  std::mt19937_64 rng(derive_seed(seed, "backbone-corpus"));
  std::vector<std::string> every;
  for (const auto& [name, _] : domains) every.push_back(name);
  std::bernoulli_distribution carry(spec.label_word_rate), faithful(spec.label_word_fidelity);
  for (std::size_t i = 0; i < spec.backbone_sentences; ++i) {
    const int cls = std::uniform_int_distribution<int>(0, k - 1)(rng);
    std::string s = generate_sentence(*domains.at(pick(every, rng)), cls, k, spec.slot_noise, rng);
    if (carry(rng)) {
      const int lc = faithful(rng) ? cls : neighbor(cls, k, rng);
      const std::string& lw = bm.label_words[static_cast<std::size_t>(lc)];
      switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
        case 0: s += " , it was " + lw + " ."; break;
        case 1: s = lw + " ! " + s; break;
        case 2: s = "in short " + lw + " : " + s; break;
        default: s += " . i would say " + lw; break;
      }
    }
    bm.backbone_corpus.push_back(std::move(s));
  }
  return bm;
}

}  // namespace metapt
