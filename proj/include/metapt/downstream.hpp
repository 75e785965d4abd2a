// SPDX-License-Identifier: Apache-2.0
//
// Few-shot adaptation (prompt tuning and full tuning), evaluation, and the
// multi-seed report type shared by the experiment drivers.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/corpus.hpp"
#include "metapt/model.hpp"
#include "metapt/optim.hpp"

namespace metapt {

NLOHMANN_JSON_SERIALIZE_ENUM(ScheduleMode, {{ScheduleMode::kLinearDecay, "linear"},
                                           {ScheduleMode::kConstant, "constant"}})

struct TuneConfig {
  double lr = 3e-3;
  int batch_size = 4;
  int max_epochs = 200;
  long warmup = 20;
  int patience = 5;
  double weight_decay = 0.01;
  ScheduleMode schedule = ScheduleMode::kLinearDecay;
  std::uint64_t seed = 0;

  void validate() const;
  /// Defaults for tuning every backbone weight.
  static TuneConfig full_tuning();
  bool operator==(const TuneConfig&) const = default;
};

void to_json(nlohmann::json& j, const TuneConfig& c);
void from_json(const nlohmann::json& j, TuneConfig& c);

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return static_cast<double>(correct) / static_cast<double>(total); }
};

/// Fraction of `inputs` classified correctly. `prompt` may be undefined.
Accuracy evaluate(const Tensor& prompt, const BackboneParams& backbone, std::span<const LabeledInput> inputs,
                  const Verbalizer& verbalizer, int workers = 1);
Accuracy evaluate(const SoftPrompt& prompt, const BackboneParams& backbone, std::span<const LabeledInput> inputs,
                  const Verbalizer& verbalizer, int workers = 1);

struct TuneResult {
  SoftPrompt prompt;
  std::vector<double> valid_curve;  // index 0 is before any update
  int best_epoch = 0;
  double best_valid_accuracy = 0.0;
  long steps = 0;
};

/// AdamW on the prompt only, validated once per epoch; returns the best
/// validation prompt (strict improvement, earliest wins).
TuneResult prompt_tune(const SoftPrompt& init, const BackboneParams& backbone, std::span<const LabeledInput> train,
                       std::span<const LabeledInput> valid, const Verbalizer& verbalizer, const TuneConfig& config);

struct FullTuneResult {
  BackboneParams model;  // frozen copy at the best epoch
  std::vector<double> valid_curve;
  int best_epoch = 0;
  double best_valid_accuracy = 0.0;
  long steps = 0;
};

/// Tunes every weight of a private copy of `backbone` with no soft prompt.
FullTuneResult full_tune(const BackboneParams& backbone, std::span<const LabeledInput> train,
                         std::span<const LabeledInput> valid, const Verbalizer& verbalizer, const TuneConfig& config);

enum class Method { kPT, kPPT, kMetaPT, kFT };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct EvalReport {
  std::string method;
  std::string dataset;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stdev = 0.0;  // population
  std::string config_fingerprint;

  /// Recomputes mean and std from `accuracies`.
  void finalize();
  bool operator==(const EvalReport&) const = default;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

struct CellInputs {
  Method method = Method::kPT;
  const Dataset* dataset = nullptr;
  const BackboneParams* backbone = nullptr;
  const Tokenizer* tokenizer = nullptr;
  const Verbalizer* verbalizer = nullptr;
  /// Prompt initialization for PPT / MetaPT; PT draws a fresh one per seed.
  std::optional<SoftPrompt> pretrained_prompt;
  PromptInit pt_init = PromptInit::kRandomNormal;
  std::size_t shots = 40;
  TuneConfig tune;
  TuneConfig ft_tune = TuneConfig::full_tuning();
  std::string config_fingerprint;
};

/// For each seed: resample the few-shot split, adapt, and score the held-out
/// remainder. `audit`, when given, receives each split after evaluation.
EvalReport run_cell(const CellInputs& in, const std::vector<std::uint64_t>& seeds,
                    const std::function<void(const FewShotSplit&)>& audit = {});

std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);
void write_reports_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);

/// Minimal line chart of (x, mean) with std error bars.
std::string render_svg(const std::string& title, const std::string& x_label, const std::vector<double>& xs,
                       const std::vector<double>& means, const std::vector<double>& stds);

}  // namespace metapt
