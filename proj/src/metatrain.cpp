// SPDX-License-Identifier: Apache-2.0
#include "metapt/metatrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metapt/errors.hpp"
#include "metapt/parallel.hpp"

namespace metapt {

void MamlConfig::validate() const {
  if (!(alpha >= 0)) throw ConfigError("maml.alpha must be >= 0");
  if (!(beta > 0)) throw ConfigError("maml.beta must be positive");
  if (m < 1) throw ConfigError("maml.m must be >= 1");
  if (inner_steps < 1) throw ConfigError("maml.inner_steps must be >= 1");
  if (tasks_per_step < 0) throw ConfigError("maml.tasks_per_step must be >= 0");
  if (max_outer_steps < 0) throw ConfigError("maml.max_outer_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("maml.eval_every must be >= 1");
  if (patience < 1) throw ConfigError("maml.patience must be >= 1");
  if (weight_decay < 0) throw ConfigError("maml.weight_decay must be >= 0");
}

NLOHMANN_JSON_SERIALIZE_ENUM(MamlMode, {{MamlMode::kSecondOrder, "second-order"}, {MamlMode::kFirstOrder, "first-order"}})
NLOHMANN_JSON_SERIALIZE_ENUM(OuterOptimizer, {{OuterOptimizer::kAdamW, "adamw"}, {OuterOptimizer::kSgd, "sgd"}})

void to_json(nlohmann::json& j, const MamlConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"m", c.m},
       {"inner_steps", c.inner_steps},
       {"mode", c.mode},
       {"optimizer", c.optimizer},
       {"weight_decay", c.weight_decay},
       {"tasks_per_step", c.tasks_per_step},
       {"max_outer_steps", c.max_outer_steps},
       {"eval_every", c.eval_every},
       {"patience", c.patience},
       {"seed", c.seed},
       {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, MamlConfig& c) {
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.m = j.at("m").get<int>();
  c.inner_steps = j.at("inner_steps").get<int>();
  c.mode = j.at("mode").get<MamlMode>();
  c.optimizer = j.at("optimizer").get<OuterOptimizer>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.tasks_per_step = j.at("tasks_per_step").get<int>();
  c.max_outer_steps = j.at("max_outer_steps").get<long>();
  c.eval_every = j.at("eval_every").get<long>();
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.workers = j.at("workers").get<int>();
}

Tensor inner_adapt(const Tensor& prompt, const PromptLoss& support, double alpha, int steps, MamlMode mode) {
  if (steps < 1) throw ContractError("inner_adapt: steps must be >= 1");
  Tensor cur = prompt;
  for (int s = 0; s < steps; ++s) {
    if (mode == MamlMode::kSecondOrder) {
      const Tensor g = ad::grad(support(cur), {cur}, true).front();
      cur = ad::sub(cur, ad::scale(g, alpha));
    } else {
      const Tensor g = ad::grad(support(cur), {cur}).front();
      cur = Tensor::parameter(cur.value() - alpha * g.value());
    }
  }
  return cur;
}

OuterGradient outer_gradient(const Matrix& prompt, std::span<const TaskObjective> tasks, double alpha,
                             int inner_steps, MamlMode mode, int workers) {
  if (tasks.empty()) throw ContractError("outer_gradient: empty task list");
  std::vector<Matrix> grads(tasks.size());
  OuterGradient out;
  out.support_losses.resize(tasks.size());
  out.query_losses.resize(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const Tensor p = Tensor::parameter(prompt);
    out.support_losses[i] = tasks[i].support(p).item();
    const Tensor adapted = inner_adapt(p, tasks[i].support, alpha, inner_steps, mode);
    const Tensor q = tasks[i].query(adapted);
    out.query_losses[i] = q.item();
    // First-order mode: the adapted prompt is its own leaf, and its gradient
    // is applied to the original prompt unchanged.
    const Tensor wrt = mode == MamlMode::kSecondOrder ? p : adapted;
    grads[i] = ad::grad(q, {wrt}).front().value();
  });
  out.grad = Matrix::Zero(prompt.rows(), prompt.cols());
  for (const auto& g : grads) out.grad += g;
  return out;
}

std::vector<EncodedTask> encode_tasks(const std::vector<MetaTask>& tasks, const Tokenizer& tokenizer,
                                      const ModelConfig& config) {
  std::vector<EncodedTask> out;
  for (const auto& t : tasks) {
    out.push_back({encode_dataset(t.train, tokenizer, config), encode_dataset(t.valid, tokenizer, config)});
  }
  return out;
}

TaskBatch sample_task_batch(std::size_t n_train, int m, std::mt19937_64& rng) {
  const auto mm = static_cast<std::size_t>(m);
  if (n_train < mm) {
    throw DataError("task train split has " + std::to_string(n_train) + " examples, need at least " +
                    std::to_string(m));
  }
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t draw = std::min(n_train, 2 * mm);
  for (std::size_t i = 0; i < draw; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_train - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  TaskBatch b;
  b.support.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(mm));
  if (n_train >= 2 * mm) {
    b.query.assign(order.begin() + static_cast<std::ptrdiff_t>(mm), order.begin() + static_cast<std::ptrdiff_t>(2 * mm));
  } else {
    b.query_with_replacement = true;
    std::uniform_int_distribution<std::size_t> any(0, n_train - 1);
    for (std::size_t i = 0; i < mm; ++i) b.query.push_back(any(rng));
  }
  return b;
}

nlohmann::json step_log_json(const StepLog& s) {
  nlohmann::json j{{"step", s.step},
                   {"tasks", s.task_ids},
                   {"support_losses", s.support_losses},
                   {"query_losses", s.query_losses},
                   {"grad_norm", s.grad_norm},
                   {"lr", s.lr},
                   {"replacement_draws", s.replacement_draws}};
  if (s.valid_accuracy) j["valid_accuracy"] = *s.valid_accuracy;
  return j;
}

namespace {

std::vector<LabeledInput> gather(const std::vector<LabeledInput>& src, const std::vector<std::size_t>& idx) {
  std::vector<LabeledInput> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(src.at(i));
  return out;
}

void check_prompt(const SoftPrompt& init, const BackboneParams& backbone) {
  if (!backbone.frozen) throw ContractError("prompt training requires a frozen backbone");
  const auto& c = backbone.config;
  if (init.values.rows() != c.prompt_len || init.values.cols() != c.d_model) {
    throw ShapeError("prompt is " + std::to_string(init.values.rows()) + "x" + std::to_string(init.values.cols()) +
                     ", model expects " + std::to_string(c.prompt_len) + "x" + std::to_string(c.d_model));
  }
}

}  // namespace

MetaTrainer::MetaTrainer(std::vector<EncodedTask> tasks, const BackboneParams& backbone, const Verbalizer& verbalizer,
                         MamlConfig config, const SoftPrompt& init)
    : tasks_(std::move(tasks)),
      backbone_(&backbone),
      verbalizer_(&verbalizer),
      config_(config),
      prompt_(init.values),
      adam_({.lr = config.beta, .weight_decay = config.weight_decay}),
      rng_(config.seed) {
  config_.validate();
  check_prompt(init, backbone);
  if (tasks_.empty()) throw ContractError("meta-training needs at least one task");
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i].train.size() < static_cast<std::size_t>(config_.m)) {
      throw DataError("task " + std::to_string(i) + " has fewer than m=" + std::to_string(config_.m) +
                      " training examples");
    }
    if (tasks_[i].valid.empty()) throw DataError("task " + std::to_string(i) + " has no validation examples");
  }
}

StepLog MetaTrainer::step() {
  std::vector<int> ids(tasks_.size());
  std::iota(ids.begin(), ids.end(), 0);
  if (config_.tasks_per_step > 0 && static_cast<std::size_t>(config_.tasks_per_step) < ids.size()) {
    std::shuffle(ids.begin(), ids.end(), rng_);
    ids.resize(static_cast<std::size_t>(config_.tasks_per_step));
    std::sort(ids.begin(), ids.end());
  }
  std::vector<TaskBatch> batches;
  for (int id : ids) batches.push_back(sample_task_batch(tasks_[static_cast<std::size_t>(id)].train.size(), config_.m, rng_));
  return step(ids, batches);
}

StepLog MetaTrainer::step(const std::vector<int>& task_ids, const std::vector<TaskBatch>& batches) {
  if (task_ids.size() != batches.size() || task_ids.empty()) {
    throw ContractError("MetaTrainer::step: one batch per scheduled task required");
  }
  std::vector<std::vector<LabeledInput>> support(task_ids.size()), query(task_ids.size());
  std::vector<TaskObjective> objectives;
  StepLog log;
  for (std::size_t i = 0; i < task_ids.size(); ++i) {
    const auto& t = tasks_.at(static_cast<std::size_t>(task_ids[i]));
    support[i] = gather(t.train, batches[i].support);
    query[i] = gather(t.train, batches[i].query);
    log.replacement_draws += batches[i].query_with_replacement;
  }
  for (std::size_t i = 0; i < task_ids.size(); ++i) {
    objectives.push_back({[&, i](const Tensor& p) { return label_loss(p, *backbone_, support[i], *verbalizer_); },
                          [&, i](const Tensor& p) { return label_loss(p, *backbone_, query[i], *verbalizer_); }});
  }
  auto og = outer_gradient(prompt_, objectives, config_.alpha, config_.inner_steps, config_.mode, config_.workers);
  ++steps_;
  log.step = steps_;
  log.task_ids = task_ids;
  log.support_losses = std::move(og.support_losses);
  log.query_losses = std::move(og.query_losses);
  log.grad_norm = og.grad.norm();
  log.lr = config_.beta;
  if (config_.optimizer == OuterOptimizer::kSgd) {
    prompt_ -= config_.beta * og.grad;
  } else {
    std::vector<Matrix*> p{&prompt_};
    std::vector<Matrix> g{std::move(og.grad)};
    adamw_step<double>(p, g, adam_);
  }
  return log;
}

double MetaTrainer::validation_accuracy() const {
  double total = 0;
  for (const auto& t : tasks_) {
    total += evaluate(Tensor::constant(prompt_), *backbone_, t.valid, *verbalizer_, config_.workers).value();
  }
  return total / static_cast<double>(tasks_.size());
}

TrainResult meta_train(const std::vector<EncodedTask>& tasks, const BackboneParams& backbone,
                       const Verbalizer& verbalizer, const MamlConfig& config, const SoftPrompt& init,
                       const LogSink& log) {
  MetaTrainer trainer(tasks, backbone, verbalizer, config, init);
  TrainResult r;
  r.best = init;
  r.best_valid_accuracy = -1.0;
  r.stop_reason = "max_outer_steps";
  int stale = 0;
  for (long s = 1; s <= config.max_outer_steps; ++s) {
    StepLog entry = trainer.step();
    if (s % config.eval_every == 0) {
      const double acc = trainer.validation_accuracy();
      entry.valid_accuracy = acc;
      r.valid_curve.push_back(acc);
      if (acc > r.best_valid_accuracy) {
        r.best_valid_accuracy = acc;
        r.best = SoftPrompt{trainer.prompt()};
        r.best_step = s;
        stale = 0;
      } else {
        ++stale;
      }
    }
    if (log) log(step_log_json(entry));
    if (stale >= config.patience) {
      r.stop_reason = "patience";
      break;
    }
  }
  r.steps = trainer.steps_taken();
  r.last = SoftPrompt{trainer.prompt()};
  if (r.valid_curve.empty()) {
    // Too few steps for any evaluation: the final prompt is the only candidate.
    r.best = r.last;
    r.best_valid_accuracy = trainer.validation_accuracy();
    r.best_step = r.steps;
  }
  return r;
}

void PptConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("ppt.lr must be positive");
  if (batch_size < 1) throw ConfigError("ppt.batch_size must be >= 1");
  if (max_epochs < 0) throw ConfigError("ppt.max_epochs must be >= 0");
  if (warmup < 0) throw ConfigError("ppt.warmup must be >= 0");
  if (patience < 1) throw ConfigError("ppt.patience must be >= 1");
  if (eval_every < 1) throw ConfigError("ppt.eval_every must be >= 1");
  if (weight_decay < 0) throw ConfigError("ppt.weight_decay must be >= 0");
}

void to_json(nlohmann::json& j, const PptConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"warmup", c.warmup},
       {"patience", c.patience},
       {"eval_every", c.eval_every},
       {"weight_decay", c.weight_decay},
       {"schedule", c.schedule},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PptConfig& c) {
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.warmup = j.at("warmup").get<long>();
  c.patience = j.at("patience").get<int>();
  c.eval_every = j.at("eval_every").get<long>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.schedule = j.at("schedule").get<ScheduleMode>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

PptTrainer::PptTrainer(const BackboneParams& backbone, const Verbalizer& verbalizer, PptConfig config,
                       const SoftPrompt& init, long total_steps)
    : backbone_(&backbone),
      verbalizer_(&verbalizer),
      config_(config),
      prompt_(init.values),
      adam_({.lr = config.lr, .weight_decay = config.weight_decay}),
      total_steps_(total_steps) {
  config_.validate();
  check_prompt(init, backbone);
}

StepLog PptTrainer::step(std::span<const LabeledInput> batch) {
  if (steps_ >= total_steps_) throw ContractError("PptTrainer: schedule exhausted");
  Tensor p = Tensor::parameter(prompt_);
  const Tensor loss = label_loss(p, *backbone_, batch, *verbalizer_);
  Matrix g = ad::grad(loss, {p}).front().value();
  ++steps_;
  StepLog log;
  log.step = steps_;
  log.query_losses = {loss.item()};
  log.grad_norm = g.norm();
  log.lr = lr_schedule(steps_, std::min(config_.warmup, total_steps_), total_steps_, config_.lr, config_.schedule);
  std::vector<Matrix*> pv{&prompt_};
  std::vector<Matrix> gv{std::move(g)};
  adamw_step<double>(pv, gv, adam_, log.lr);
  return log;
}

EncodedTask pool_tasks(const std::vector<EncodedTask>& tasks) {
  EncodedTask pooled;
  for (const auto& t : tasks) {
    pooled.train.insert(pooled.train.end(), t.train.begin(), t.train.end());
    pooled.valid.insert(pooled.valid.end(), t.valid.begin(), t.valid.end());
  }
  return pooled;
}

TrainResult ppt_train(std::span<const LabeledInput> train, std::span<const LabeledInput> valid,
                      const BackboneParams& backbone, const Verbalizer& verbalizer, const PptConfig& config,
                      const SoftPrompt& init, const LogSink& log) {
  config.validate();
  if (train.empty()) throw DataError("ppt_train: empty pool");
  if (valid.empty()) throw DataError("ppt_train: empty validation pool");
  const auto b = static_cast<std::size_t>(config.batch_size);
  const long per_epoch = static_cast<long>((train.size() + b - 1) / b);
  const long total = std::max<long>(per_epoch * config.max_epochs, 1);
  PptTrainer trainer(backbone, verbalizer, config, init, total);

  TrainResult r;
  r.best = init;
  r.best_valid_accuracy = evaluate(init, backbone, valid, verbalizer).value();
  r.valid_curve.push_back(r.best_valid_accuracy);
  r.stop_reason = "max_epochs";
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  int stale = 0;
  long step = 0;
  bool stop = false;
  for (int epoch = 0; epoch < config.max_epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size() && !stop; start += b) {
      std::vector<LabeledInput> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + b); ++i) batch.push_back(train[order[i]]);
      StepLog entry = trainer.step(batch);
      ++step;
      if (step % config.eval_every == 0 || step == total) {
        const double acc = evaluate(SoftPrompt{trainer.prompt()}, backbone, valid, verbalizer).value();
        entry.valid_accuracy = acc;
        r.valid_curve.push_back(acc);
        if (acc > r.best_valid_accuracy) {
          r.best_valid_accuracy = acc;
          r.best = SoftPrompt{trainer.prompt()};
          r.best_step = step;
          stale = 0;
        } else if (++stale >= config.patience) {
          r.stop_reason = "patience";
          stop = true;
        }
      }
      if (log) log(step_log_json(entry));
    }
  }
  r.steps = step;
  r.last = SoftPrompt{trainer.prompt()};
  return r;
}

}  // namespace metapt
