// SPDX-License-Identifier: Apache-2.0
#include "metapt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "metapt/downstream.hpp"
#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"
#include "metapt/parallel.hpp"

namespace metapt {

namespace {

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  return out;
}

}  // namespace

bool Dataset::labeled() const {
  return std::all_of(examples.begin(), examples.end(), [](const Example& e) { return e.label.has_value(); });
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    if (blank(e.text)) throw DataError(name + ": example " + std::to_string(i) + " has empty text");
    if (e.label && (*e.label < 0 || *e.label >= n_classes)) {
      throw DataError(name + ": example " + std::to_string(i) + " label " + std::to_string(*e.label) +
                      " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

std::vector<std::string> Dataset::texts() const {
  std::vector<std::string> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.text);
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(n_classes, 0)), 0);
  for (const auto& e : examples)
    if (e.label) ++counts.at(static_cast<std::size_t>(*e.label));
  return counts;
}

std::string dataset_hash(const Dataset& ds) {
  Sha256 h;
  h.update(ds.name).update_pod(ds.n_classes).update_pod(ds.examples.size());
  for (const auto& e : ds.examples) {
    h.update_pod(e.text.size()).update(e.text);
    const int label = e.label.value_or(-1);
    h.update_pod(label);
  }
  return to_hex(h.finish());
}

Dataset load_jsonl(const std::filesystem::path& path, int n_classes, std::string name) {
  if (!std::filesystem::exists(path)) throw ArtifactError("missing dataset file " + path.string());
  Dataset ds{name.empty() ? path.stem().string() : std::move(name), n_classes, {}};
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (blank(lines[i])) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw DataError(where + ": expected an object with a string \"text\"");
    }
    Example ex{j["text"].get<std::string>(), std::nullopt};
    if (blank(ex.text)) throw DataError(where + ": empty text");
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_number_integer()) throw DataError(where + ": label must be an integer");
      const int label = j["label"].get<int>();
      if (label < 0 || label >= n_classes) {
        throw DataError(where + ": label " + std::to_string(label) + " out of range for " +
                        std::to_string(n_classes) + " classes");
      }
      ex.label = label;
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

void save_jsonl(const std::filesystem::path& path, const Dataset& ds) {
  auto out = open_for_write(path);
  for (const auto& e : ds.examples) {
    nlohmann::json j{{"text", e.text}};
    if (e.label) j["label"] = *e.label;
    out << j.dump() << '\n';
  }
}

std::vector<LabeledInput> encode_dataset(const Dataset& ds, const Tokenizer& tokenizer, const ModelConfig& config) {
  std::vector<LabeledInput> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& e = ds.examples[i];
    if (!e.label) throw DataError(ds.name + ": example " + std::to_string(i) + " is unlabeled");
    out.push_back({apply_template(e.text, tokenizer, config), *e.label});
  }
  return out;
}

FewShotSplit sample_fewshot(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n == 0 || ds.size() < 2 * n) {
    throw DataError(ds.name + ": need at least " + std::to_string(2 * n) + " examples for a " + std::to_string(n) +
                    "-shot split, have " + std::to_string(ds.size()));
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first 2n positions are a uniform ordered sample.
  for (std::size_t i = 0; i < 2 * n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  FewShotSplit split;
  split.train = {ds.name + "/train", ds.n_classes, {}};
  split.valid = {ds.name + "/valid", ds.n_classes, {}};
  std::vector<bool> used(ds.size(), false);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    used[order[i]] = true;
    (i < n ? split.train : split.valid).examples.push_back(ds.examples[order[i]]);
  }
  Dataset test{ds.name + "/test", ds.n_classes, {}};
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!used[i]) test.examples.push_back(ds.examples[i]);
  split.test = HeldOutSet(std::move(test));
  return split;
}

Annotator::Annotator(BackboneParams model, Verbalizer verbalizer, const Tokenizer* tokenizer)
    : model_(std::move(model)), verbalizer_(std::move(verbalizer)), tokenizer_(tokenizer) {
  model_.freeze();
  template_config_ = model_.config;
  template_config_.prompt_len = 0;
}

std::vector<double> Annotator::class_probabilities(const std::string& text) const {
  return metapt::class_probabilities(Tensor{}, model_, apply_template(text, *tokenizer_, template_config_),
                                     verbalizer_);
}

Annotator train_annotator(const Dataset& source, const BackboneParams& backbone, const Tokenizer& tokenizer,
                          const Verbalizer& verbalizer, const TuneConfig& config) {
  if (!source.labeled() || source.empty()) throw DataError(source.name + ": annotator source must be labeled");
  std::set<int> distinct;
  for (const auto& e : source.examples) distinct.insert(*e.label);
  if (static_cast<int>(distinct.size()) < verbalizer.n_classes()) {
    throw DataError(source.name + ": annotator source covers " + std::to_string(distinct.size()) + " of " +
                    std::to_string(verbalizer.n_classes()) + " classes");
  }
  ModelConfig tc = backbone.config;
  tc.prompt_len = 0;
  auto encoded = encode_dataset(source, tokenizer, tc);

  std::vector<std::size_t> order(encoded.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed ^ 0xa5a5a5a5ULL);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_valid = std::max<std::size_t>(1, encoded.size() / 10);
  std::vector<LabeledInput> train, valid;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_valid ? valid : train).push_back(encoded[order[i]]);
  }
  if (train.empty()) train = valid;
  auto result = full_tune(backbone, train, valid, verbalizer, config);
  return Annotator(std::move(result.model), verbalizer, &tokenizer);
}

PseudoLabelResult pseudo_label(const std::vector<std::string>& texts, const Annotator& annotator, double threshold,
                               int workers) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("pseudo_label: threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  std::vector<PseudoRecord> all(texts.size());
  parallel_for(texts.size(), workers, [&](std::size_t i) {
    const auto probs = annotator.class_probabilities(texts[i]);
    const auto best = std::max_element(probs.begin(), probs.end());
    all[i] = {texts[i], static_cast<int>(best - probs.begin()), *best};
  });
  PseudoLabelResult out;
  out.input_count = texts.size();
  for (auto& r : all) {
    if (r.confidence >= threshold) {
      out.records.push_back(std::move(r));
    } else {
      ++out.dropped;
    }
  }
  return out;
}

Dataset balance(const std::vector<PseudoRecord>& records, int n_classes, std::uint64_t seed, std::string name) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int c = records[i].pseudo_label;
    if (c < 0 || c >= n_classes) throw DataError("balance: pseudo label out of range");
    by_class[static_cast<std::size_t>(c)].push_back(i);
  }
  std::size_t target = records.size();
  for (int c = 0; c < n_classes; ++c) {
    if (by_class[static_cast<std::size_t>(c)].empty()) {
      throw DataError("balance: class " + std::to_string(c) + " has no records");
    }
    target = std::min(target, by_class[static_cast<std::size_t>(c)].size());
  }
  std::mt19937_64 rng(seed);
  std::vector<bool> keep(records.size(), false);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < target; ++i) keep[members[i]] = true;
  }
  Dataset out{std::move(name), n_classes, {}};
  for (std::size_t i = 0; i < records.size(); ++i)
    if (keep[i]) out.examples.push_back({records[i].text, records[i].pseudo_label});
  return out;
}

void save_pseudo_jsonl(const std::filesystem::path& path, const std::vector<PseudoRecord>& records) {
  auto out = open_for_write(path);
  for (const auto& r : records) {
    out << nlohmann::json{{"text", r.text}, {"pseudo_label", r.pseudo_label}, {"confidence", r.confidence}}.dump()
        << '\n';
  }
}

std::vector<PseudoRecord> load_pseudo_jsonl(const std::filesystem::path& path) {
  std::vector<PseudoRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    try {
      const auto j = nlohmann::json::parse(lines[i]);
      out.push_back({j.at("text").get<std::string>(), j.at("pseudo_label").get<int>(), j.at("confidence").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace metapt
