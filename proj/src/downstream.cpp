// SPDX-License-Identifier: Apache-2.0
#include "metapt/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "metapt/errors.hpp"
#include "metapt/parallel.hpp"

namespace metapt {

void TuneConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("tune.lr must be positive");
  if (batch_size < 1) throw ConfigError("tune.batch_size must be >= 1");
  if (max_epochs < 0) throw ConfigError("tune.max_epochs must be >= 0");
  if (warmup < 0) throw ConfigError("tune.warmup must be >= 0");
  if (patience < 1) throw ConfigError("tune.patience must be >= 1");
  if (weight_decay < 0) throw ConfigError("tune.weight_decay must be >= 0");
}

TuneConfig TuneConfig::full_tuning() {
  TuneConfig c;
  c.lr = 3e-5;
  return c;
}


void to_json(nlohmann::json& j, const TuneConfig& c) {
  j = {{"lr", c.lr},           {"batch_size", c.batch_size},     {"max_epochs", c.max_epochs},
       {"warmup", c.warmup},   {"patience", c.patience},         {"weight_decay", c.weight_decay},
       {"schedule", c.schedule}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TuneConfig& c) {
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.warmup = j.at("warmup").get<long>();
  c.patience = j.at("patience").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.schedule = j.at("schedule").get<ScheduleMode>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

Accuracy evaluate(const Tensor& prompt, const BackboneParams& backbone, std::span<const LabeledInput> inputs,
                  const Verbalizer& verbalizer, int workers) {
  if (inputs.empty()) throw DataError("evaluate: empty test set");
  ad::NoGrad guard;
  std::vector<char> hit(inputs.size(), 0);
  const Tensor p = prompt.defined() ? prompt.detach() : Tensor{};
  parallel_for(inputs.size(), workers, [&](std::size_t i) {
    ad::NoGrad local;
    hit[i] = predict(p, backbone, inputs[i].input, verbalizer) == inputs[i].label;
  });
  return {static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1)), inputs.size()};
}

Accuracy evaluate(const SoftPrompt& prompt, const BackboneParams& backbone, std::span<const LabeledInput> inputs,
                  const Verbalizer& verbalizer, int workers) {
  return evaluate(Tensor::constant(prompt.values), backbone, inputs, verbalizer, workers);
}

namespace {

struct LoopResult {
  std::vector<double> curve;
  int best_epoch = 0;
  double best = 0.0;
  long steps = 0;
  std::vector<Matrix> best_values;
};

/// Shared epoch loop: shuffled mini-batches, AdamW with the configured
/// schedule, validation after every epoch, patience-based stopping.
template <typename LossFn, typename ValidFn>
LoopResult tune_loop(const std::vector<Tensor>& leaves, std::span<const LabeledInput> train, const TuneConfig& cfg,
                     LossFn&& loss_fn, ValidFn&& valid_fn) {
  cfg.validate();
  if (train.empty()) throw DataError("tuning: empty training split");
  std::vector<Matrix*> values;
  for (Tensor t : leaves) values.push_back(&t.mutable_value());
  auto snapshot = [&] {
    std::vector<Matrix> s;
    for (auto* v : values) s.push_back(*v);
    return s;
  };

  LoopResult r;
  r.best = valid_fn();
  r.curve.push_back(r.best);
  r.best_values = snapshot();

  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const long per_epoch = static_cast<long>((train.size() + b - 1) / b);
  const long total = per_epoch * cfg.max_epochs;
  const long warmup = std::min(cfg.warmup, total);
  AdamWState<double> state({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  int stale = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += b) {
      std::vector<LabeledInput> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + b); ++i) batch.push_back(train[order[i]]);
      std::vector<Matrix> grads;
      {
        const Tensor loss = loss_fn(std::span<const LabeledInput>(batch));
        for (auto& g : ad::grad(loss, leaves)) grads.push_back(g.value());
      }
      ++r.steps;
      adamw_step<double>(values, grads, state, lr_schedule(r.steps, warmup, total, cfg.lr, cfg.schedule));
    }
    const double acc = valid_fn();
    r.curve.push_back(acc);
    if (acc > r.best) {
      r.best = acc;
      r.best_epoch = epoch;
      r.best_values = snapshot();
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return r;
}

}  // namespace

TuneResult prompt_tune(const SoftPrompt& init, const BackboneParams& backbone, std::span<const LabeledInput> train,
                       std::span<const LabeledInput> valid, const Verbalizer& verbalizer, const TuneConfig& config) {
  if (!backbone.frozen) throw ContractError("prompt_tune: backbone must be frozen");
  if (valid.empty()) throw DataError("prompt_tune: empty validation split");
  Tensor prompt = Tensor::parameter(init.values);
  auto r = tune_loop(
      {prompt}, train, config,
      [&](std::span<const LabeledInput> batch) { return label_loss(prompt, backbone, batch, verbalizer); },
      [&] { return evaluate(prompt, backbone, valid, verbalizer).value(); });
  return {SoftPrompt{std::move(r.best_values.front())}, std::move(r.curve), r.best_epoch, r.best, r.steps};
}

FullTuneResult full_tune(const BackboneParams& backbone, std::span<const LabeledInput> train,
                         std::span<const LabeledInput> valid, const Verbalizer& verbalizer, const TuneConfig& config) {
  if (valid.empty()) throw DataError("full_tune: empty validation split");
  BackboneParams model = backbone.clone(true);
  std::vector<Tensor> leaves;
  for (auto* p : model.parameters()) leaves.push_back(*p);
  auto r = tune_loop(
      leaves, train, config,
      [&](std::span<const LabeledInput> batch) { return label_loss(Tensor{}, model, batch, verbalizer); },
      [&] { return evaluate(Tensor{}, model, valid, verbalizer).value(); });
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = Tensor::constant(std::move(r.best_values[i]));
  model.frozen = true;
  return {std::move(model), std::move(r.curve), r.best_epoch, r.best, r.steps};
}

std::string method_name(Method m) {
  switch (m) {
    case Method::kPT: return "PT";
    case Method::kPPT: return "PPT";
    case Method::kMetaPT: return "MetaPT";
    case Method::kFT: return "FT";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::kPT, Method::kPPT, Method::kMetaPT, Method::kFT})
    if (method_name(m) == name) return m;
  throw ConfigError("unknown method '" + name + "' (expected PT, PPT, MetaPT or FT)");
}

void EvalReport::finalize() {
  if (accuracies.empty()) {
    mean = stdev = 0.0;
    return;
  }
  const double n = static_cast<double>(accuracies.size());
  mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  stdev = std::sqrt(ss / n);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"method", r.method}, {"dataset", r.dataset}, {"seeds", r.seeds},
       {"accuracies", r.accuracies}, {"mean", r.mean}, {"std", r.stdev},
       {"config_fingerprint", r.config_fingerprint}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.method = j.at("method").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.mean = j.at("mean").get<double>();
  r.stdev = j.at("std").get<double>();
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
}

EvalReport run_cell(const CellInputs& in, const std::vector<std::uint64_t>& seeds,
                    const std::function<void(const FewShotSplit&)>& audit) {
  if (!in.dataset || !in.backbone || !in.tokenizer || !in.verbalizer) {
    throw ContractError("run_cell: dataset, backbone, tokenizer and verbalizer are required");
  }
  if ((in.method == Method::kPPT || in.method == Method::kMetaPT) && !in.pretrained_prompt) {
    throw ArtifactError("run_cell: " + method_name(in.method) + " needs a pre-trained prompt checkpoint");
  }
  const auto& cfg = in.backbone->config;
  ModelConfig ft_cfg = cfg;
  ft_cfg.prompt_len = 0;

  EvalReport report{method_name(in.method), in.dataset->name, seeds, {}, 0, 0, in.config_fingerprint};
  for (std::uint64_t seed : seeds) {
    auto split = sample_fewshot(*in.dataset, in.shots, seed);
    double acc = 0.0;
    if (in.method == Method::kFT) {
      auto train = encode_dataset(split.train, *in.tokenizer, ft_cfg);
      auto valid = encode_dataset(split.valid, *in.tokenizer, ft_cfg);
      TuneConfig tc = in.ft_tune;
      tc.seed = seed;
      auto tuned = full_tune(*in.backbone, train, valid, *in.verbalizer, tc);
      auto test = encode_dataset(split.test.open_for_evaluation(), *in.tokenizer, ft_cfg);
      acc = evaluate(Tensor{}, tuned.model, test, *in.verbalizer).value();
    } else {
      SoftPrompt init = in.method == Method::kPT ? init_prompt(cfg, in.pt_init, seed, in.backbone)
                                                 : *in.pretrained_prompt;
      auto train = encode_dataset(split.train, *in.tokenizer, cfg);
      auto valid = encode_dataset(split.valid, *in.tokenizer, cfg);
      TuneConfig tc = in.tune;
      tc.seed = seed;
      auto tuned = prompt_tune(init, *in.backbone, train, valid, *in.verbalizer, tc);
      auto test = encode_dataset(split.test.open_for_evaluation(), *in.tokenizer, cfg);
      acc = evaluate(tuned.prompt, *in.backbone, test, *in.verbalizer).value();
    }
    report.accuracies.push_back(acc);
    if (audit) audit(split);
  }
  report.finalize();
  return report;
}

std::string report_csv_header() { return "method,dataset,seeds,mean,std,accuracies,config_fingerprint"; }

std::string report_csv_row(const EvalReport& r) {
  auto join = [](const auto& xs, auto fmt) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ";" : "") + fmt(xs[i]);
    return s;
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << r.method << ',' << r.dataset << ',' << join(r.seeds, [](auto s) { return std::to_string(s); }) << ','
     << num(r.mean) << ',' << num(r.stdev) << ',' << join(r.accuracies, num) << ',' << r.config_fingerprint;
  return os.str();
}

void write_reports_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << report_csv_header() << '\n';
  for (const auto& r : reports) out << report_csv_row(r) << '\n';
}

std::string render_svg(const std::string& title, const std::string& x_label, const std::vector<double>& xs,
                       const std::vector<double>& means, const std::vector<double>& stds) {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 40, B = 50;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
     << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label
     << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  if (xs.empty()) {
    os << "</svg>\n";
    return os.str();
  }
  // Points are spaced evenly by index; sweep values are labels.
  auto px = [&](std::size_t i) {
    return xs.size() == 1 ? (L + W - R) / 2 : L + (W - L - R) * static_cast<double>(i) / (xs.size() - 1);
  };
  auto py = [&](double acc) { return H - B - (H - T - B) * std::clamp(acc, 0.0, 1.0); };
  std::string path;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double sd = i < stds.size() ? stds[i] : 0.0;
    os << "<line x1=\"" << px(i) << "\" y1=\"" << py(means[i] - sd) << "\" x2=\"" << px(i) << "\" y2=\""
       << py(means[i] + sd) << "\" stroke=\"gray\"/>\n"
       << "<circle cx=\"" << px(i) << "\" cy=\"" << py(means[i]) << "\" r=\"3\"/>\n"
       << "<text x=\"" << px(i) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << xs[i] << "</text>\n";
    path += (i ? " L " : "M ") + std::to_string(px(i)) + " " + std::to_string(py(means[i]));
  }
  os << "<path d=\"" << path << "\" fill=\"none\" stroke=\"steelblue\"/>\n</svg>\n";
  return os.str();
}

}  // namespace metapt
