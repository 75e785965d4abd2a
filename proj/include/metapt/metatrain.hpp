// SPDX-License-Identifier: Apache-2.0
//
// Meta-learning of the soft prompt over auxiliary tasks (one inner gradient
// step per task, outer update on the post-adaptation query losses), and the
// pooled supervised baseline that shares its step machinery.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/downstream.hpp"
#include "metapt/model.hpp"
#include "metapt/optim.hpp"
#include "metapt/taskgen.hpp"

namespace metapt {

enum class MamlMode { kSecondOrder, kFirstOrder };
enum class OuterOptimizer { kAdamW, kSgd };

struct MamlConfig {
  double alpha = 0.08;
  double beta = 0.025;
  int m = 4;  // support and query batch size per task
  int inner_steps = 1;
  MamlMode mode = MamlMode::kSecondOrder;
  OuterOptimizer optimizer = OuterOptimizer::kAdamW;
  double weight_decay = 0.01;
  /// Tasks visited per outer step; 0 visits every task.
  int tasks_per_step = 0;
  long max_outer_steps = 20000;
  long eval_every = 50;
  int patience = 6;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
  bool operator==(const MamlConfig&) const = default;
};

void to_json(nlohmann::json& j, const MamlConfig& c);
void from_json(const nlohmann::json& j, MamlConfig& c);

using PromptLoss = std::function<Tensor(const Tensor& prompt)>;

/// `steps` gradient steps of size `alpha` on `support`, starting from
/// `prompt`. Second-order mode keeps the updates on the gradient record;
/// first-order mode returns a fresh leaf. `prompt` is never modified.
Tensor inner_adapt(const Tensor& prompt, const PromptLoss& support, double alpha, int steps, MamlMode mode);

struct TaskObjective {
  PromptLoss support;
  PromptLoss query;
};

struct OuterGradient {
  Matrix grad;  // d(sum of query losses)/dP
  std::vector<double> support_losses;
  std::vector<double> query_losses;
};

/// Sum over tasks (in order) of the query loss at each adapted prompt,
/// differentiated with respect to `prompt`.
OuterGradient outer_gradient(const Matrix& prompt, std::span<const TaskObjective> tasks, double alpha,
                             int inner_steps, MamlMode mode, int workers = 1);

struct EncodedTask {
  std::vector<LabeledInput> train;
  std::vector<LabeledInput> valid;
};

std::vector<EncodedTask> encode_tasks(const std::vector<MetaTask>& tasks, const Tokenizer& tokenizer,
                                      const ModelConfig& config);

struct TaskBatch {
  std::vector<std::size_t> support;  // indices into the task train split
  std::vector<std::size_t> query;
  bool query_with_replacement = false;
};

/// m support examples, then m query examples disjoint from them when the
/// split holds at least 2m; otherwise the query is drawn with replacement.
TaskBatch sample_task_batch(std::size_t n_train, int m, std::mt19937_64& rng);

struct StepLog {
  long step = 0;
  std::vector<int> task_ids;
  std::vector<double> support_losses;
  std::vector<double> query_losses;
  double grad_norm = 0.0;
  double lr = 0.0;
  int replacement_draws = 0;
  std::optional<double> valid_accuracy;
};

nlohmann::json step_log_json(const StepLog& s);

/// Outer-loop state: prompt, optimizer and batch sampler.
class MetaTrainer {
 public:
  MetaTrainer(std::vector<EncodedTask> tasks, const BackboneParams& backbone, const Verbalizer& verbalizer,
              MamlConfig config, const SoftPrompt& init);

  /// Draws batches for the scheduled tasks and applies one outer update.
  StepLog step();
  /// Outer update with caller-supplied batches for tasks `task_ids`.
  StepLog step(const std::vector<int>& task_ids, const std::vector<TaskBatch>& batches);

  /// Mean over tasks of validation-split accuracy.
  double validation_accuracy() const;
  const Matrix& prompt() const { return prompt_; }
  long steps_taken() const { return steps_; }
  const std::vector<EncodedTask>& tasks() const { return tasks_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::vector<EncodedTask> tasks_;
  const BackboneParams* backbone_;
  const Verbalizer* verbalizer_;
  MamlConfig config_;
  Matrix prompt_;
  AdamWState<double> adam_;
  std::mt19937_64 rng_;
  long steps_ = 0;
};

struct TrainResult {
  SoftPrompt best;
  SoftPrompt last;
  double best_valid_accuracy = 0.0;
  long best_step = 0;
  long steps = 0;
  std::vector<double> valid_curve;
  std::string stop_reason;
};

using LogSink = std::function<void(const nlohmann::json&)>;

/// Runs outer steps with periodic validation and patience-based stopping;
/// returns the best-validation prompt.
TrainResult meta_train(const std::vector<EncodedTask>& tasks, const BackboneParams& backbone,
                       const Verbalizer& verbalizer, const MamlConfig& config, const SoftPrompt& init,
                       const LogSink& log = {});

struct PptConfig {
  double lr = 3e-3;
  int batch_size = 4;
  int max_epochs = 5;
  long warmup = 20;
  int patience = 5;
  long eval_every = 50;
  double weight_decay = 0.01;
  ScheduleMode schedule = ScheduleMode::kLinearDecay;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const PptConfig&) const = default;
};

void to_json(nlohmann::json& j, const PptConfig& c);
void from_json(const nlohmann::json& j, PptConfig& c);

/// Plain prompt tuning on pooled data, one mini-batch at a time.
class PptTrainer {
 public:
  PptTrainer(const BackboneParams& backbone, const Verbalizer& verbalizer, PptConfig config, const SoftPrompt& init,
             long total_steps);
  StepLog step(std::span<const LabeledInput> batch);
  const Matrix& prompt() const { return prompt_; }

 private:
  const BackboneParams* backbone_;
  const Verbalizer* verbalizer_;
  PptConfig config_;
  Matrix prompt_;
  AdamWState<double> adam_;
  long total_steps_;
  long steps_ = 0;
};

/// Concatenates every task's train and validation splits.
EncodedTask pool_tasks(const std::vector<EncodedTask>& tasks);

/// Epochs of shuffled mini-batches over `train`, validated every
/// `eval_every` steps; returns the best-validation prompt.
TrainResult ppt_train(std::span<const LabeledInput> train, std::span<const LabeledInput> valid,
                      const BackboneParams& backbone, const Verbalizer& verbalizer, const PptConfig& config,
                      const SoftPrompt& init, const LogSink& log = {});

}  // namespace metapt
