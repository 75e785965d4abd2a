// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "fixtures.hpp"
#include "metapt/downstream.hpp"
#include "metapt/errors.hpp"
#include "test_util.hpp"

using namespace metapt;
using namespace metapt::test;

namespace {

struct World {
  Tokenizer tok;
  ModelConfig cfg;
  BackboneParams backbone;
  Verbalizer verb;
};

World make_world(int prompt_len, int d_model, std::uint64_t seed) {
  auto tok = toy_tokenizer();
  ModelConfig cfg = tiny_config(tok, prompt_len);
  cfg.d_model = d_model;
  cfg.d_ff = 2 * d_model;
  auto bb = scrambled_backbone(cfg, seed);
  Verbalizer verb(five_label_words(), tok);
  return {std::move(tok), cfg, std::move(bb), std::move(verb)};
}

/// Pairs of toy sentences with the label of the first; 64 distinct texts.
Dataset pair_dataset(int n_classes) {
  Dataset ds{"pairs", n_classes, {}};
  const auto t = toy_texts();
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < t.size(); ++j) {
      ds.examples.push_back({t[i] + " and " + t[j], static_cast<int>((i + j) % static_cast<std::size_t>(n_classes))});
    }
  }
  return ds;
}

SoftPrompt random_prompt(const ModelConfig& cfg, std::uint64_t seed, double sd = 0.5) {
  std::mt19937_64 rng(seed);
  return SoftPrompt{random_matrix(rng, cfg.prompt_len, cfg.d_model, sd)};
}

double population_std(const std::vector<double>& xs) {
  long double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<long double>(xs.size());
  long double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return static_cast<double>(std::sqrt(ss / static_cast<long double>(xs.size())));
}

}  // namespace

TEST_CASE("tune config validation and json round trip") {
  TuneConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(TuneConfig::full_tuning().lr == doctest::Approx(3e-5));
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TuneConfig{};
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TuneConfig d;
  d.schedule = ScheduleMode::kConstant;
  d.seed = 99;
  nlohmann::json j = d;
  CHECK(j.get<TuneConfig>() == d);
}

TEST_CASE("evaluate is an exact count, pure, and rejects empty input") {
  auto w = make_world(4, 8, 1);
  const auto prompt = random_prompt(w.cfg, 2);
  std::vector<LabeledInput> in;
  for (const auto& t : toy_texts()) in.push_back({apply_template(t, w.tok, w.cfg), 0});
  for (auto& x : in) x.label = predict(Tensor::constant(prompt.values), w.backbone, x.input, w.verb);
  auto all = evaluate(prompt, w.backbone, in, w.verb);
  CHECK(all.correct == in.size());
  CHECK(all.value() == 1.0);
  in[0].label = (in[0].label + 1) % 5;
  in[3].label = (in[3].label + 2) % 5;
  auto some = evaluate(prompt, w.backbone, in, w.verb);
  CHECK(some.correct == in.size() - 2);
  CHECK(some.value() == 6.0 / 8.0);
  CHECK(evaluate(prompt, w.backbone, in, w.verb, 3).correct == some.correct);
  CHECK_THROWS_AS(evaluate(prompt, w.backbone, std::span<const LabeledInput>{}, w.verb), DataError);
}

TEST_CASE("random prompt on labels independent of the text scores at chance") {
  auto w = make_world(4, 8, 3);
  auto ds = pair_dataset(5);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> label(0, 4);
  std::vector<LabeledInput> in;
  for (int rep = 0; rep < 8; ++rep) {
    for (const auto& e : ds.examples) in.push_back({apply_template(e.text, w.tok, w.cfg), label(rng)});
  }
  const double n = static_cast<double>(in.size());
  const double half_width = 3.5 * std::sqrt(0.2 * 0.8 / n);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const double acc = evaluate(random_prompt(w.cfg, 100 + s), w.backbone, in, w.verb).value();
    CHECK(std::abs(acc - 0.2) < half_width);
  }
}

TEST_CASE("prompt tuning returns its best checkpoint and never touches the backbone") {
  auto w = make_world(4, 32, 5);
  auto ds = pair_dataset(5);
  auto enc = encode_dataset(ds, w.tok, w.cfg);
  std::vector<LabeledInput> train(enc.begin(), enc.begin() + 20), valid(enc.begin() + 20, enc.begin() + 40);
  const auto init = random_prompt(w.cfg, 6, 0.05);
  const auto before = w.backbone.content_hash();

  TuneConfig cfg;
  cfg.max_epochs = 0;
  auto none = prompt_tune(init, w.backbone, train, valid, w.verb, cfg);
  CHECK(none.prompt.values == init.values);
  CHECK(none.steps == 0);
  CHECK(none.valid_curve.size() == 1);

  cfg.max_epochs = 15;
  cfg.lr = 0.02;
  cfg.patience = 3;
  auto r = prompt_tune(init, w.backbone, train, valid, w.verb, cfg);
  CHECK(r.best_valid_accuracy >= r.valid_curve.front());
  CHECK(r.best_valid_accuracy == *std::max_element(r.valid_curve.begin(), r.valid_curve.end()));
  CHECK(r.valid_curve[static_cast<std::size_t>(r.best_epoch)] == r.best_valid_accuracy);
  CHECK(evaluate(r.prompt, w.backbone, valid, w.verb).value() == r.best_valid_accuracy);
  CHECK(w.backbone.content_hash() == before);
  CHECK(init.values == random_prompt(w.cfg, 6, 0.05).values);
  auto again = prompt_tune(init, w.backbone, train, valid, w.verb, cfg);
  CHECK(again.prompt.values == r.prompt.values);

  CHECK_THROWS_AS(prompt_tune(init, w.backbone, {}, valid, w.verb, cfg), DataError);
  CHECK_THROWS_AS(prompt_tune(init, w.backbone, train, {}, w.verb, cfg), DataError);
}

TEST_CASE("full tuning fits two separable classes on a private copy") {
  auto w = make_world(0, 16, 7);
  Verbalizer two({"bad", "good"}, w.tok);
  std::vector<LabeledInput> train;
  const auto t = toy_texts();
  for (std::size_t i = 0; i < t.size(); ++i) {
    // Class is fixed by the first sentence: positive ones get 1.
    const int cls = (i == 0 || i == 2 || i == 4) ? 1 : 0;
    for (std::size_t j = 0; j < t.size(); j += 2) {
      train.push_back({apply_template(t[i] + " and " + t[j], w.tok, w.cfg), cls});
    }
  }
  const auto before = w.backbone.content_hash();
  TuneConfig cfg = TuneConfig::full_tuning();
  cfg.lr = 3e-3;
  cfg.max_epochs = 60;
  cfg.warmup = 5;
  cfg.patience = 60;
  auto r = full_tune(w.backbone, train, train, two, cfg);
  const double acc = evaluate(Tensor{}, r.model, train, two).value();
  MESSAGE("train accuracy " << acc);
  CHECK(acc >= 0.99);
  CHECK(r.model.frozen);
  CHECK(w.backbone.content_hash() == before);
  auto again = full_tune(w.backbone, train, train, two, cfg);
  CHECK(again.model.content_hash() == r.model.content_hash());
}

TEST_CASE("report statistics are recomputed exactly") {
  EvalReport r;
  r.accuracies = {0.41, 0.43, 0.47, 0.39, 0.45};
  r.finalize();
  const double mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / 5.0;
  CHECK(std::abs(r.mean - mean) < 1e-12);
  CHECK(std::abs(r.stdev - population_std(r.accuracies)) < 1e-15);
  EvalReport single;
  single.accuracies = {0.3};
  single.finalize();
  CHECK(single.stdev == 0.0);
  CHECK(single.mean == 0.3);
  nlohmann::json j = r;
  CHECK(j.contains("std"));
  CHECK(j.get<EvalReport>() == r);
}

TEST_CASE("run_cell reproduces, audits the held-out split and needs its checkpoint") {
  auto w = make_world(4, 16, 9);
  auto ds = pair_dataset(5);
  const auto before = w.backbone.content_hash();
  CellInputs in;
  in.method = Method::kPT;
  in.dataset = &ds;
  in.backbone = &w.backbone;
  in.tokenizer = &w.tok;
  in.verbalizer = &w.verb;
  in.shots = 10;
  in.tune.max_epochs = 3;
  in.ft_tune.max_epochs = 2;
  in.config_fingerprint = "abc";

  std::vector<std::size_t> accesses;
  std::vector<std::size_t> test_sizes;
  auto audit = [&](const FewShotSplit& s) {
    accesses.push_back(s.test.access_count());
    test_sizes.push_back(s.test.size());
  };
  auto one = run_cell(in, {1}, audit);
  CHECK(one.accuracies.size() == 1);
  CHECK(one.stdev == 0.0);
  CHECK(one.config_fingerprint == "abc");

  accesses.clear();
  test_sizes.clear();
  auto five = run_cell(in, {1, 2, 3, 4, 5}, audit);
  REQUIRE(five.accuracies.size() == 5);
  CHECK(five.accuracies.front() == one.accuracies.front());
  CHECK(std::abs(five.mean - std::accumulate(five.accuracies.begin(), five.accuracies.end(), 0.0) / 5) < 1e-12);
  CHECK(std::abs(five.stdev - population_std(five.accuracies)) < 1e-15);
  for (auto a : accesses) CHECK(a == 1);
  for (auto s : test_sizes) CHECK(s == ds.size() - 20);
  for (double a : five.accuracies) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
  CHECK(run_cell(in, {1, 2, 3, 4, 5}) == five);

  in.method = Method::kFT;
  auto ft = run_cell(in, {1, 2});
  CHECK(ft.method == "FT");
  CHECK(ft.accuracies.size() == 2);

  in.method = Method::kMetaPT;
  CHECK_THROWS_AS(run_cell(in, {1}), ArtifactError);
  in.pretrained_prompt = random_prompt(w.cfg, 3, 0.05);
  auto meta = run_cell(in, {1});
  CHECK(meta.method == "MetaPT");
  CHECK(w.backbone.content_hash() == before);
}

TEST_CASE("method names round trip") {
  for (auto m : {Method::kPT, Method::kPPT, Method::kMetaPT, Method::kFT}) CHECK(parse_method(method_name(m)) == m);
  CHECK_THROWS_AS(parse_method("prompt"), ConfigError);
}

TEST_CASE("csv reports carry one row per cell and svg output is well formed") {
  std::vector<EvalReport> reports;
  for (int i = 0; i < 3; ++i) {
    EvalReport r{"MetaPT", "d" + std::to_string(i), {1, 2}, {0.5, 0.25 * i}, 0, 0, "fp"};
    r.finalize();
    reports.push_back(r);
  }
  CHECK(report_csv_row(reports[0]).rfind("MetaPT,d0,1;2,", 0) == 0);
  const auto path = std::filesystem::temp_directory_path() / "metapt_test_reports.csv";
  write_reports_csv(path, reports);
  std::ifstream f(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(f, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == report_csv_header());
  for (std::size_t i = 1; i < lines.size(); ++i) CHECK(std::count(lines[i].begin(), lines[i].end(), ',') == 6);
  std::filesystem::remove(path);

  const auto svg = render_svg("sweep", "K", {3, 10, 30}, {0.3, 0.4, 0.35}, {0.01, 0.02, 0.0});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
}
