// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/model.hpp"
#include "metapt/tokenizer.hpp"

namespace metapt {

struct Example {
  std::string text;
  std::optional<int> label;
  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::string name;
  int n_classes = 0;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  bool labeled() const;
  /// Throws DataError if a label is outside [0, n_classes) or a text is blank.
  void validate() const;
  std::vector<std::string> texts() const;
  std::vector<std::size_t> class_counts() const;
  bool operator==(const Dataset&) const = default;
};

/// SHA-256 over names, texts and labels in order.
std::string dataset_hash(const Dataset& ds);

/// One JSON object per line with "text" and optional "label". CRLF endings
/// are accepted. Errors name the offending line.
Dataset load_jsonl(const std::filesystem::path& path, int n_classes, std::string name = {});
void save_jsonl(const std::filesystem::path& path, const Dataset& ds);

/// Templates every example for classification; unlabeled examples are rejected.
std::vector<LabeledInput> encode_dataset(const Dataset& ds, const Tokenizer& tokenizer, const ModelConfig& config);

/// Test remainder of a few-shot split. Every read goes through
/// `open_for_evaluation()`, which counts accesses so harnesses can assert the
/// split never influenced tuning.
class HeldOutSet {
 public:
  HeldOutSet() = default;
  explicit HeldOutSet(Dataset ds) : data_(std::move(ds)) {}
  const Dataset& open_for_evaluation() const {
    ++accesses_;
    return data_;
  }
  std::size_t size() const { return data_.size(); }
  std::size_t access_count() const { return accesses_; }

 private:
  Dataset data_;
  mutable std::size_t accesses_ = 0;
};

struct FewShotSplit {
  Dataset train;
  Dataset valid;
  HeldOutSet test;
};

/// Two disjoint uniform samples of `n` examples; the remainder (in load
/// order) becomes the held-out test set.
FewShotSplit sample_fewshot(const Dataset& ds, std::size_t n, std::uint64_t seed);

struct PseudoRecord {
  std::string text;
  int pseudo_label = 0;
  double confidence = 0.0;
};

struct TuneConfig;

/// Classifier used to pseudo-label open text: a fully tuned copy of the
/// backbone that reads the verbalizer tokens at the template mask.
class Annotator {
 public:
  Annotator(BackboneParams model, Verbalizer verbalizer, const Tokenizer* tokenizer);

  std::vector<double> class_probabilities(const std::string& text) const;
  int n_classes() const { return verbalizer_.n_classes(); }
  const BackboneParams& model() const { return model_; }

 private:
  BackboneParams model_;
  Verbalizer verbalizer_;
  const Tokenizer* tokenizer_;
  ModelConfig template_config_;
};

/// Full tuning of a copy of `backbone` on the labeled `source` data
/// (10% held out for early stopping). Deterministic per `config.seed`.
Annotator train_annotator(const Dataset& source, const BackboneParams& backbone, const Tokenizer& tokenizer,
                          const Verbalizer& verbalizer, const TuneConfig& config);

struct PseudoLabelResult {
  std::vector<PseudoRecord> records;
  std::size_t dropped = 0;
  std::size_t input_count = 0;
};

/// Keeps texts whose maximum class probability is at least `threshold`.
/// Annotation runs on `workers` threads; output order is input order.
PseudoLabelResult pseudo_label(const std::vector<std::string>& texts, const Annotator& annotator, double threshold,
                               int workers = 1);

/// Downsamples every class to the smallest class count. Retained records keep
/// their input order.
Dataset balance(const std::vector<PseudoRecord>& records, int n_classes, std::uint64_t seed, std::string name = "pseudo");

void save_pseudo_jsonl(const std::filesystem::path& path, const std::vector<PseudoRecord>& records);
std::vector<PseudoRecord> load_pseudo_jsonl(const std::filesystem::path& path);

}  // namespace metapt
