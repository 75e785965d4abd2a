// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. Criteria 5 and 7 to 11 drive the real pipeline on
// the smoke and acceptance configs inside a scratch directory.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "metapt/checkpoint.hpp"
#include "metapt/config.hpp"
#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"
#include "metapt/metatrain.hpp"
#include "metapt/pipeline.hpp"
#include "metapt/synthetic.hpp"
#include "metapt/taskgen.hpp"
#include "test_util.hpp"

using namespace metapt;
using namespace metapt::test;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- criterion 1

Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  const auto tok = toy_tokenizer();
  const Verbalizer verb(five_label_words(), tok);
  const auto texts = toy_texts();
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    ModelConfig cfg = tiny_config(tok, 2 + static_cast<int>(seed % 3));
    cfg.n_heads = 1 + static_cast<int>(seed % 2);
    cfg.d_model = 4 * cfg.n_heads * (1 + static_cast<int>((seed / 2) % 2));
    cfg.d_ff = 2 * cfg.d_model;
    cfg.n_layers = 1 + static_cast<int>((seed / 3) % 2);
    const auto backbone = scrambled_backbone(cfg, seed + 1000);
    std::vector<LabeledInput> batch;
    for (int i = 0; i < 3; ++i) {
      batch.push_back({apply_template(texts[rng() % texts.size()], tok, cfg), static_cast<int>(rng() % 5)});
    }
    const Matrix p0 = random_matrix(rng, cfg.prompt_len, cfg.d_model, 0.5);
    const Tensor p = Tensor::parameter(p0);
    const Matrix analytic = ad::grad(label_loss(p, backbone, batch, verb), {p}).front().value();
    auto f = [&](const Matrix& x) { return label_loss(Tensor::constant(x), backbone, batch, verb).item(); };
    worst = std::max(worst, rel_err(analytic, ad::finite_diff_grad<double>(f, p0, 1e-5)));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 120, fmt("100 models, max rel err %.2e (< 1e-5), %.1f s (< 120 s)", worst, secs)};
}

// ---------------------------------------------------------------- criteria 2, 3

// L(P) = 1/2 (P - c) A (P - c)^T on a 1 x 2 prompt.
struct Quadratic {
  Matrix a, c;
  Tensor operator()(const Tensor& p) const {
    const Tensor d = ad::sub(p, Tensor::constant(c));
    return ad::scale(ad::sum(ad::mul(ad::matmul(d, Tensor::constant(a)), d)), 0.5);
  }
  Matrix grad_at(const Matrix& p) const { return (p - c) * a; }
};

struct QuadTask {
  Quadratic support, query;
};

std::vector<QuadTask> quadratic_suite(std::uint64_t seed, int n_tasks) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto spd = [&] {
    Matrix b(2, 2);
    for (int i = 0; i < 4; ++i) b.data()[i] = nd(rng);
    Matrix a = b * b.transpose();
    a.diagonal().array() += 0.5;
    return a;
  };
  auto point = [&] {
    Matrix c(1, 2);
    c << nd(rng), nd(rng);
    return c;
  };
  std::vector<QuadTask> out;
  for (int i = 0; i < n_tasks; ++i) out.push_back({{spd(), point()}, {spd(), point()}});
  return out;
}

std::vector<TaskObjective> objectives(const std::vector<QuadTask>& suite) {
  std::vector<TaskObjective> out;
  for (const auto& t : suite) out.push_back({t.support, t.query});
  return out;
}

Verdict maml_second_order() {
  // Finite differences of the unrolled outer objective on a 16 x 32 prompt.
  const auto tok = toy_tokenizer();
  const Verbalizer verb(five_label_words(), tok);
  ModelConfig cfg = tiny_config(tok, 16);
  cfg.d_model = 32;
  cfg.d_ff = 64;
  const auto backbone = scrambled_backbone(cfg, 3);
  std::vector<LabeledInput> all;
  const auto texts = toy_texts();
  for (std::size_t i = 0; i < texts.size(); ++i) all.push_back({apply_template(texts[i], tok, cfg), static_cast<int>(i % 5)});
  std::vector<std::vector<LabeledInput>> support{{all[0], all[1]}, {all[4], all[5]}};
  std::vector<std::vector<LabeledInput>> query{{all[2], all[3]}, {all[6], all[7]}};
  std::vector<TaskObjective> objs;
  for (int t = 0; t < 2; ++t) {
    objs.push_back({[&, t](const Tensor& p) { return label_loss(p, backbone, support[t], verb); },
                    [&, t](const Tensor& p) { return label_loss(p, backbone, query[t], verb); }});
  }
  const double alpha = 0.5;
  std::mt19937_64 rng(4);
  const Matrix p0 = random_matrix(rng, 16, 32, 0.5);
  const Matrix analytic = outer_gradient(p0, objs, alpha, 1, MamlMode::kSecondOrder).grad;
  auto unrolled = [&](const Matrix& p) {
    double total = 0;
    for (const auto& o : objs) {
      const Tensor leaf = Tensor::parameter(p);
      const Matrix g = ad::grad(o.support(leaf), {leaf}).front().value();
      total += o.query(Tensor::constant(p - alpha * g)).item();
    }
    return total;
  };
  const double fd_err = rel_err(analytic, ad::finite_diff_grad<double>(unrolled, p0, 1e-5));

  // Closed form sum_t grad L_q(P') (I - alpha A_s) on the quadratic family.
  double cf_err = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto suite = quadratic_suite(seed, 4);
    auto qobjs = objectives(suite);
    Matrix p(1, 2);
    p << 0.3 * static_cast<double>(seed % 5) - 0.6, 0.7;
    for (double a : {0.0, 0.02, 0.08, 0.2}) {
      Matrix expect = Matrix::Zero(1, 2);
      for (const auto& t : suite) {
        const Matrix adapted = p - a * t.support.grad_at(p);
        expect += t.query.grad_at(adapted) * (Matrix::Identity(2, 2) - a * t.support.a);
      }
      cf_err = std::max(cf_err, rel_err(outer_gradient(p, qobjs, a, 1, MamlMode::kSecondOrder).grad, expect));
    }
  }
  return {fd_err < 1e-4 && cf_err < 1e-10,
          fmt("16x32 finite-difference rel err %.2e (< 1e-4), quadratic closed-form rel err %.2e (< 1e-10)", fd_err,
              cf_err)};
}

Verdict first_order_limit() {
  auto suite = quadratic_suite(7, 5);
  auto objs = objectives(suite);
  Matrix p(1, 2);
  p << 0.4, -0.9;
  std::vector<double> gaps;
  for (double alpha = 0.02; gaps.size() < 4; alpha /= 2) {
    const Matrix g2 = outer_gradient(p, objs, alpha, 1, MamlMode::kSecondOrder).grad;
    const Matrix g1 = outer_gradient(p, objs, alpha, 1, MamlMode::kFirstOrder).grad;
    gaps.push_back((g2 - g1).norm() / g2.norm());
  }
  bool ok = true;
  std::string ratios;
  for (std::size_t i = 1; i < gaps.size(); ++i) {
    const double r = gaps[i - 1] / gaps[i];
    ok = ok && r >= 1.5 && r <= 2.5;
    ratios += fmt("%s%.3f", i > 1 ? ", " : "", r);
  }
  return {ok, "gap ratios per halving from alpha 0.02: " + ratios + " (each in [1.5, 2.5])"};
}

// ---------------------------------------------------------------- criterion 4

Verdict degeneracy() {
  const auto tok = toy_tokenizer();
  const Verbalizer verb(five_label_words(), tok);
  const ModelConfig cfg = tiny_config(tok, 4);
  const auto backbone = scrambled_backbone(cfg, 8);
  std::vector<LabeledInput> all;
  const auto texts = toy_texts();
  for (std::size_t i = 0; i < texts.size(); ++i) all.push_back({apply_template(texts[i], tok, cfg), static_cast<int>(i % 5)});
  std::vector<EncodedTask> tasks{{{all.begin(), all.begin() + 6}, {all.begin() + 6, all.end()}}};
  std::mt19937_64 rng(9);
  const SoftPrompt init{random_matrix(rng, cfg.prompt_len, cfg.d_model, 0.5)};

  // (a) one outer step against a hand-built AdamW step.
  MamlConfig mc;
  mc.alpha = 0.0;
  mc.beta = 0.01;
  mc.m = 2;
  MetaTrainer one(tasks, backbone, verb, mc, init);
  const TaskBatch b{{0, 1}, {2, 3}, false};
  one.step({0}, {b});
  std::vector<LabeledInput> q{tasks[0].train[2], tasks[0].train[3]};
  const Tensor p = Tensor::parameter(init.values);
  const Matrix g = ad::grad(label_loss(p, backbone, q, verb), {p}).front().value();
  Matrix expect = init.values;
  AdamWState<double> st({.lr = mc.beta, .weight_decay = mc.weight_decay});
  std::vector<Matrix*> pv{&expect};
  std::vector<Matrix> gv{g};
  adamw_step<double>(pv, gv, st);
  const double diff_a = (one.prompt() - expect).cwiseAbs().maxCoeff();

  // (b) step-for-step tracking of the pooled trainer under the same batches.
  PptConfig pc;
  pc.lr = mc.beta;
  pc.warmup = 0;
  pc.schedule = ScheduleMode::kConstant;
  pc.weight_decay = mc.weight_decay;
  MetaTrainer meta(tasks, backbone, verb, mc, init);
  PptTrainer ppt(backbone, verb, pc, init, 1000);
  double diff_b = 0;
  for (int s = 0; s < 50; ++s) {
    const auto batch = sample_task_batch(tasks[0].train.size(), mc.m, rng);
    meta.step({0}, {batch});
    std::vector<LabeledInput> qb;
    for (auto i : batch.query) qb.push_back(tasks[0].train[i]);
    ppt.step(qb);
    diff_b = std::max(diff_b, (meta.prompt() - ppt.prompt()).cwiseAbs().maxCoeff());
  }
  return {diff_a < 1e-10 && diff_b < 1e-10,
          fmt("(a) AdamW step diff %.2e, (b) max diff over 50 steps %.2e (both < 1e-10)", diff_a, diff_b)};
}

// ---------------------------------------------------------------- criterion 6

Verdict clustering_oracles() {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 0.3);
  const double centers[3][2] = {{0, 0}, {6, 0}, {3, 5}};
  Matrix pts(300, 2);
  std::vector<int> truth;
  for (int i = 0; i < 300; ++i) {
    pts(i, 0) = centers[i % 3][0] + nd(rng);
    pts(i, 1) = centers[i % 3][1] + nd(rng);
    truth.push_back(i % 3);
  }
  const auto km = kmeans(pts, 3, 5);
  const double ari = adjusted_rand_index(km.assignments, truth);
  bool monotone = true;
  for (std::size_t i = 1; i < km.inertia_history.size(); ++i)
    monotone = monotone && km.inertia_history[i] <= km.inertia_history[i - 1];

  // Three-topic generative corpus with skewed in-topic word frequencies.
  const std::vector<std::vector<std::string>> lex{
      {"apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "plum"},
      {"hammer", "wrench", "drill", "saw", "chisel", "pliers", "level", "clamp"},
      {"violin", "cello", "flute", "oboe", "harp", "trumpet", "tuba", "piano"}};
  std::discrete_distribution<int> word({8, 7, 6, 5, 4, 3, 2, 1});
  Dataset ds{"topics", 3, {}};
  for (int d = 0; d < 150; ++d) {
    std::string text;
    for (int i = 0; i < 12; ++i) text += lex[d % 3][word(rng)] + " ";
    ds.examples.push_back({text, d % 3});
  }
  LdaOptions o;
  o.k = 3;
  o.iterations = 200;
  o.seed = 11;
  o.stopword_fraction = 0.0;
  const auto lda = lda_fit(ds, o);
  // Each true topic is matched to the learned topic sharing most top-5 words.
  std::size_t recovered = 0;
  for (const auto& words : lex) {
    const std::set<std::string> top(words.begin(), words.begin() + 5);
    std::size_t best = 0;
    for (int t = 0; t < 3; ++t) {
      std::size_t hit = 0;
      for (const auto& w : lda.top_words(t, 5)) hit += top.count(w);
      best = std::max(best, hit);
    }
    recovered += best;
  }
  const double recovery = static_cast<double>(recovered) / 15.0;
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += lda.log_likelihood[i] / 20;
    last += lda.log_likelihood[lda.log_likelihood.size() - 1 - i] / 20;
  }
  const bool climbs = lda.log_likelihood.size() == 200 && last > first;
  return {ari > 0.99 && monotone && recovery >= 0.8 && climbs,
          fmt("kmeans ARI %.4f (> 0.99), inertia non-increasing %s; LDA top-5 recovery %.2f (>= 0.8), "
              "log-lik first/last 20 iters %.1f -> %.1f",
              ari, monotone ? "yes" : "no", recovery, first, last)};
}

// ---------------------------------------------------------------- pipeline runs

ExperimentConfig config_at(const fs::path& file, const fs::path& root, std::vector<std::string> overrides = {}) {
  overrides.push_back("artifact_dir=" + root.string());
  return load_config(file, overrides);
}

struct SmokeRun {
  ExperimentConfig cfg;
  std::string backbone_after_pretrain;
  std::string backbone_after_all;
  std::string backbone_content;
  std::string manifest_backbone_hash;
};

SmokeRun run_smoke(const fs::path& config, const fs::path& root) {
  fs::remove_all(root);
  SmokeRun r{config_at(config, root), {}, {}, {}, {}};
  ArtifactLock lock(root);
  EventLog log(root / "logs/events.jsonl", false);
  cmd_generate(r.cfg, log);
  cmd_pretrain_backbone(r.cfg, log);
  r.backbone_after_pretrain = file_hash(root / "backbone/backbone.ckpt");
  cmd_pseudo_label(r.cfg, log);
  cmd_cluster(r.cfg, log);
  cmd_meta_train(r.cfg, log);
  cmd_ppt_train(r.cfg, log);
  cmd_eval(r.cfg, log);
  r.backbone_after_all = file_hash(root / "backbone/backbone.ckpt");
  const auto ws = Workspace::open(r.cfg);
  r.backbone_content = ws.backbone.content_hash();
  r.manifest_backbone_hash = nlohmann::json::parse(slurp(root / "backbone/manifest.json")).at("backbone_hash");
  return r;
}

Verdict frozen_backbone(const SmokeRun& r) {
  const bool ok = r.backbone_after_pretrain == r.backbone_after_all && r.backbone_content == r.manifest_backbone_hash;
  return {ok, "backbone.ckpt sha256 " + r.backbone_after_pretrain.substr(0, 16) + " after pretraining, " +
                  r.backbone_after_all.substr(0, 16) + " after meta-train, ppt-train and eval"};
}

Verdict pseudo_label_pipeline(const SmokeRun& r) {
  const auto ws = Workspace::open(r.cfg);
  const Dataset source = load_jsonl(ws.root / "data/source.jsonl", r.cfg.benchmark.n_classes);
  auto spec = r.cfg.benchmark;
  spec.pretrain_size = 1000;
  const auto corpus = make_synthetic_benchmark(spec, derive_seed(r.cfg.seed, "acceptance/pseudo")).pretrain.texts();
  const auto annotator = train_annotator(source, ws.backbone, ws.tokenizer, ws.verbalizer, r.cfg.pseudo.annotator);
  const auto result = pseudo_label(corpus, annotator, 0.95, r.cfg.workers);
  double min_conf = 1.0;
  for (const auto& rec : result.records) min_conf = std::min(min_conf, rec.confidence);
  const auto balanced = balance(result.records, r.cfg.benchmark.n_classes, 1);
  const auto counts = balanced.class_counts();
  const bool equal = std::all_of(counts.begin(), counts.end(), [&](std::size_t c) { return c == counts[0]; });
  const bool sums = result.records.size() + result.dropped == corpus.size() && result.input_count == corpus.size();
  std::string cs;
  for (auto c : counts) cs += (cs.empty() ? "" : "/") + std::to_string(c);
  return {corpus.size() == 1000 && min_conf >= 0.95 && equal && sums,
          fmt("1000 inputs: %zu retained + %zu dropped, min confidence %.4f (>= 0.95), balanced counts ", result.records.size(),
              result.dropped, result.records.empty() ? 0.0 : min_conf) +
              cs};
}

Verdict determinism(const SmokeRun& a, const fs::path& root_b, const fs::path& config) {
  const SmokeRun b = run_smoke(config, root_b);
  std::vector<std::string> compared;
  std::string mismatch;
  const fs::path ra = artifact_root(a.cfg), rb = artifact_root(b.cfg);
  for (const auto& e : fs::directory_iterator(ra / "prompts")) {
    if (e.path().extension() != ".ckpt") continue;
    const auto rel = fs::relative(e.path(), ra);
    compared.push_back(rel.string());
    if (slurp(ra / rel) != slurp(rb / rel)) mismatch += " " + rel.string();
  }
  for (const char* rel : {"reports/eval.json", "reports/eval.csv"}) {
    compared.push_back(rel);
    if (slurp(ra / rel) != slurp(rb / rel)) mismatch += std::string(" ") + rel;
  }
  const bool ok = mismatch.empty() && compared.size() >= 4;
  return {ok, ok ? fmt("%zu files byte-identical across two runs (prompt checkpoints, eval reports)", compared.size())
                 : "differs:" + mismatch};
}

struct MethodSummary {
  double mean = 0, stdev = 0;
};

std::map<std::string, MethodSummary> summarize(const std::vector<EvalReport>& reports) {
  std::map<std::string, MethodSummary> out;
  std::map<std::string, int> n;
  for (const auto& r : reports) {
    out[r.method].mean += r.mean;
    out[r.method].stdev += r.stdev;
    ++n[r.method];
  }
  for (auto& [m, s] : out) {
    s.mean /= n[m];
    s.stdev /= n[m];
  }
  return out;
}

struct DirectionalOutcome {
  bool orderings = false;
  bool tie = false;
  std::string detail;
};

DirectionalOutcome directional(const std::vector<EvalReport>& reports, std::uint64_t seed) {
  auto s = summarize(reports);
  const auto& meta = s.at("MetaPT");
  const auto& ppt = s.at("PPT");
  const auto& pt = s.at("PT");
  DirectionalOutcome o;
  o.orderings = meta.mean >= ppt.mean && ppt.mean >= pt.mean && meta.stdev <= pt.stdev;
  o.tie = std::abs(meta.mean - ppt.mean) < 0.005;
  o.detail = fmt("seed %llu: MetaPT %.4f±%.4f, PPT %.4f±%.4f, PT %.4f±%.4f", static_cast<unsigned long long>(seed),
                 meta.mean, meta.stdev, ppt.mean, ppt.stdev, pt.mean, pt.stdev);
  return o;
}

Verdict table_ordering(const fs::path& config, const fs::path& work, std::vector<EvalReport>& first_reports,
                       ExperimentConfig& first_cfg) {
  auto run = [&](std::uint64_t seed) {
    const fs::path root = work / ("acceptance-seed" + std::to_string(seed));
    fs::remove_all(root);
    auto cfg = config_at(config, root, {"seed=" + std::to_string(seed)});
    ArtifactLock lock(root);
    EventLog log(root / "logs/events.jsonl", false);
    auto reports = run_pipeline(cfg, log);
    return std::make_pair(cfg, reports);
  };
  auto [cfg, reports] = run(1);
  first_cfg = cfg;
  first_reports = reports;
  const auto o = directional(reports, 1);
  if (!o.tie) return {o.orderings, "mean over downstream datasets, " + o.detail};
  // A MetaPT/PPT tie within half a point is inconclusive; rerun once on a second benchmark seed.
  auto [cfg2, reports2] = run(2);
  const auto o2 = directional(reports2, 2);
  return {o2.orderings && !o2.tie,
          "tie within 0.5 points (soft failure), " + o.detail + "; rerun " + o2.detail};
}

// Scored on every downstream dataset, as in criterion 8, and averaged per strategy.
Verdict cluster_ordering(const ExperimentConfig& acceptance) {
  ExperimentConfig cfg = acceptance;
  cfg.ablation.datasets =
      cfg.downstream.datasets.empty() ? cfg.benchmark.downstream_domains : cfg.downstream.datasets;
  EventLog log(artifact_root(cfg) / "logs/events.jsonl", false);
  const auto rows = cmd_ablate(cfg, log, Sweep::kMethods);
  std::map<std::string, double> mean;
  std::map<std::string, int> count;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (!count[r.setting]++) order.push_back(r.setting);
    mean[r.setting] += r.report.mean;
  }
  std::string all;
  for (const auto& s : order) {
    mean[s] /= count[s];
    all += fmt("%s%s %.4f", all.empty() ? "" : ", ", s.c_str(), mean[s]);
  }
  all = fmt("mean over %zu datasets: ", cfg.ablation.datasets.size()) + all;
  if (!mean.count("kmeans") || !mean.count("random")) return {false, "kmeans or random row missing: " + all};
  return {mean["kmeans"] >= mean["random"], all};
}

Verdict sweep_harness(const ExperimentConfig& cfg) {
  EventLog log(artifact_root(cfg) / "logs/events.jsonl", false);
  auto check_csv = [&](Sweep s, std::size_t expect_rows) {
    const auto rows = cmd_ablate(cfg, log, s);
    const fs::path csv = artifact_root(cfg) / ("reports/ablate-" + sweep_name(s) + ".csv");
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    const bool header = line == ablation_csv_header();
    const auto commas = std::count(line.begin(), line.end(), ',');
    std::size_t n = 0;
    bool shape = true;
    while (std::getline(in, line)) {
      ++n;
      shape = shape && std::count(line.begin(), line.end(), ',') == commas;
    }
    std::string settings;
    for (const auto& r : rows) settings += fmt("%s%s:%.3f", settings.empty() ? "" : " ", r.setting.c_str(), r.report.mean);
    return std::make_pair(header && shape && n == expect_rows && rows.size() == expect_rows,
                          sweep_name(s) + fmt(" %zu rows [", n) + settings + "]");
  };
  auto [ok_size, size_detail] = check_csv(Sweep::kDatasize, cfg.ablation.sizes.size());
  auto [ok_k, k_detail] = check_csv(Sweep::kClusters, cfg.ablation.ks.size());
  return {ok_size && ok_k, size_detail + "; " + k_detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metapt acceptance suite"};
  fs::path smoke = fs::path(METAPT_SOURCE_DIR) / "configs/smoke.json";
  fs::path acceptance = fs::path(METAPT_SOURCE_DIR) / "configs/acceptance.json";
  fs::path work = fs::temp_directory_path() / "metapt-acceptance";
  std::vector<int> only;
  app.add_option("--smoke-config", smoke, "config for criteria 5, 7 and 10")->check(CLI::ExistingFile);
  app.add_option("--acceptance-config", acceptance, "config for criteria 8, 9 and 11")->check(CLI::ExistingFile);
  app.add_option("--work-dir", work, "scratch directory for artifacts");
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);
  ::unsetenv("METAPT_ARTIFACT_ROOT");

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int c) { return selected.empty() || selected.count(c); };
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Verdict()>& body) {
    if (!wanted(id)) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = body();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << " " << name << ": " << v.detail
              << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
  };

  report(1, "gradient correctness", gradient_correctness);
  report(2, "second-order MAML gradient", maml_second_order);
  report(3, "first-order limit", first_order_limit);
  report(4, "degeneracy equivalences", degeneracy);

  std::optional<SmokeRun> smoke_run;
  auto need_smoke = [&]() -> const SmokeRun& {
    if (!smoke_run) smoke_run = run_smoke(smoke, work / "smoke-a");
    return *smoke_run;
  };
  report(5, "frozen backbone", [&] { return frozen_backbone(need_smoke()); });
  report(6, "clustering oracles", clustering_oracles);
  report(7, "pseudo-label pipeline", [&] { return pseudo_label_pipeline(need_smoke()); });

  std::vector<EvalReport> reports;
  ExperimentConfig acc_cfg;
  bool have_acceptance = false;
  report(8, "directional method ordering", [&] {
    auto v = table_ordering(acceptance, work, reports, acc_cfg);
    have_acceptance = true;
    return v;
  });
  auto need_acceptance = [&]() -> const ExperimentConfig& {
    if (!have_acceptance) {
      table_ordering(acceptance, work, reports, acc_cfg);
      have_acceptance = true;
    }
    return acc_cfg;
  };
  report(9, "clustering strategy ordering", [&] { return cluster_ordering(need_acceptance()); });
  report(10, "determinism", [&] { return determinism(need_smoke(), work / "smoke-b", smoke); });
  report(11, "sweep harness", [&] { return sweep_harness(need_acceptance()); });

  std::cout << (failures == 0 ? "all selected criteria PASS" : fmt("%d criteria FAIL", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
