// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "metapt/errors.hpp"
#include "metapt/synthetic.hpp"
#include "metapt/taskgen.hpp"

using namespace metapt;

namespace {

Matrix blobs(std::vector<int>& truth, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.3);
  const double centers[3][2] = {{0, 0}, {6, 0}, {3, 5}};
  Matrix m(300, 2);
  truth.clear();
  for (int i = 0; i < 300; ++i) {
    const int c = i % 3;
    m(i, 0) = centers[c][0] + nd(rng);
    m(i, 1) = centers[c][1] + nd(rng);
    truth.push_back(c);
  }
  return m;
}

const std::vector<std::vector<std::string>>& topic_lexicons() {
  static const std::vector<std::vector<std::string>> lex{
      {"apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "plum"},
      {"hammer", "wrench", "drill", "saw", "chisel", "pliers", "level", "clamp"},
      {"violin", "cello", "flute", "oboe", "harp", "trumpet", "tuba", "piano"},
  };
  return lex;
}

// Each document draws all its words from one topic lexicon, with a skewed
// word distribution so the top words are well defined.
Dataset topic_corpus(std::vector<int>& truth, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> word({8, 7, 6, 5, 4, 3, 2, 1});
  Dataset ds{"topics", 3, {}};
  truth.clear();
  for (int d = 0; d < 150; ++d) {
    const int t = d % 3;
    std::string text;
    for (int i = 0; i < 12; ++i) text += topic_lexicons()[t][word(rng)] + " ";
    ds.examples.push_back({text, t});
    truth.push_back(t);
  }
  return ds;
}

Dataset labeled_pool(std::size_t n, int k) {
  Dataset ds{"pool", k, {}};
  for (std::size_t i = 0; i < n; ++i) ds.examples.push_back({"text " + std::to_string(i), static_cast<int>(i % k)});
  return ds;
}

}  // namespace

TEST_CASE("tf-idf rows are normalized, deterministic and one-hot for single words") {
  Dataset ds{"t", 2, {{"alpha beta", 0}, {"gamma", 1}, {"alpha beta", 0}, {"beta beta delta", 1}}};
  auto e = embed(ds, EmbedMethod::kTfIdf);
  REQUIRE(e.rows.rows() == 4);
  for (int i = 0; i < 4; ++i) CHECK(e.rows.row(i).norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e.rows.row(0) == e.rows.row(2));
  int nonzero = 0;
  for (int j = 0; j < e.rows.cols(); ++j) nonzero += e.rows(1, j) != 0.0;
  CHECK(nonzero == 1);
  CHECK(e.rows.row(1).maxCoeff() == 1.0);
  CHECK_THROWS_AS(embed(Dataset{"e", 2, {}}, EmbedMethod::kTfIdf), DataError);
  CHECK_THROWS_AS(embed(ds, EmbedMethod::kMeanPooledBackbone), ContractError);
}

TEST_CASE("same-domain sentences are closer than cross-domain ones") {
  BenchmarkSpec spec;
  spec.backbone_sentences = 10;
  spec.source_size = 10;
  spec.pretrain_size = 300;
  spec.downstream_size = 10;
  auto bm = make_synthetic_benchmark(spec, 4);
  auto tok = Tokenizer::build(bm.pretrain.texts(), 1000, bm.reserved_words());
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(tok.size());
  cfg.d_model = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.max_seq_len = 48;
  auto backbone = BackboneParams::random_init(cfg, 1);
  backbone.freeze();

  for (auto method : {EmbedMethod::kTfIdf, EmbedMethod::kMeanPooledBackbone}) {
    auto e = embed(bm.pretrain, method, &backbone, &tok);
    const Matrix sim = e.rows * e.rows.transpose();
    double same = 0, cross = 0;
    long ns = 0, nc = 0;
    for (Eigen::Index i = 0; i < sim.rows(); ++i)
      for (Eigen::Index j = i + 1; j < sim.cols(); ++j) {
        if (bm.pretrain_domain_of[i] == bm.pretrain_domain_of[j]) {
          same += sim(i, j), ++ns;
        } else {
          cross += sim(i, j), ++nc;
        }
      }
    MESSAGE(embed_method_name(method) << ": same " << same / ns << " cross " << cross / nc);
    CHECK(same / ns > cross / nc);
  }
}

TEST_CASE("kmeans with one cluster and with too many clusters") {
  std::vector<int> truth;
  auto pts = blobs(truth, 1);
  auto r = kmeans(pts, 1, 0);
  for (int a : r.assignments) CHECK(a == 0);
  CHECK_THROWS_AS(kmeans(pts.topRows(2), 3, 0), DataError);
  CHECK_THROWS_AS(kmeans(pts, 0, 0), ContractError);
}

TEST_CASE("kmeans recovers separated blobs with non-increasing inertia") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<int> truth;
    auto pts = blobs(truth, seed);
    auto r = kmeans(pts, 3, seed);
    CHECK(adjusted_rand_index(r.assignments, truth) > 0.99);
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      CHECK(r.inertia_history[i] <= r.inertia_history[i - 1]);
    CHECK(silhouette(pts, r.assignments) > 0.7);
  }
}

TEST_CASE("kmeans repairs empty clusters") {
  Matrix pts = Matrix::Zero(6, 2);
  pts(5, 0) = 1.0;
  auto r = kmeans(pts, 3, 2);
  std::set<int> used(r.assignments.begin(), r.assignments.end());
  CHECK(used.size() == 3);
}

TEST_CASE("adjusted rand index reference values") {
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  // Reference value from the standard contingency formula.
  CHECK(adjusted_rand_index({0, 0, 1, 1, 2, 2}, {0, 0, 1, 2, 2, 2}) == doctest::Approx(0.4444444444444444));
}

TEST_CASE("LDA recovers disjoint topic lexicons and its likelihood improves") {
  std::vector<int> truth;
  auto ds = topic_corpus(truth, 3);
  LdaOptions o;
  o.k = 3;
  o.iterations = 200;
  o.seed = 11;
  o.stopword_fraction = 0.0;
  auto m = lda_fit(ds, o);
  m.check_consistency();
  CHECK(m.alpha == doctest::Approx(50.0 / 3));
  REQUIRE(m.log_likelihood.size() == 200);
  CHECK(m.log_likelihood.back() > m.log_likelihood.front());
  std::vector<double> window;
  for (std::size_t i = 49; i < m.log_likelihood.size(); i += 50) {
    double s = 0;
    for (std::size_t j = i - 49; j <= i; ++j) s += m.log_likelihood[j];
    window.push_back(s / 50);
  }
  // Post burn-in fluctuation is tiny compared with the initial climb.
  for (std::size_t i = 1; i < window.size(); ++i) CHECK(window[i] >= window[i - 1] - 1e-3 * std::abs(window[0]));
  for (int t = 0; t < 3; ++t) {
    std::set<int> sources;
    for (const auto& w : m.top_words(t, 5))
      for (int s = 0; s < 3; ++s)
        if (std::count(topic_lexicons()[s].begin(), topic_lexicons()[s].end(), w)) sources.insert(s);
    CHECK(sources.size() == 1);
  }
  auto assign = assign_by_lda(m, ds);
  CHECK(adjusted_rand_index(assign, truth) > 0.99);
  for (int a : assign) CHECK((a >= 0 && a < 3));

  auto again = lda_fit(ds, o);
  CHECK(again.topic_of == m.topic_of);
  CHECK(again.log_likelihood == m.log_likelihood);
}

TEST_CASE("LDA stopwords, preconditions and assignment rules") {
  std::vector<int> truth;
  auto ds = topic_corpus(truth, 5);
  LdaOptions o;
  o.k = 3;
  o.iterations = 5;
  o.stopword_fraction = 0.2;  // 24 word types -> 4 stopwords
  auto m = lda_fit(ds, o);
  CHECK(m.stopwords.size() == 4);
  CHECK(m.vocab.size() == 20);

  auto tie = m;
  for (auto& row : tie.doc_topic) std::fill(row.begin(), row.end(), 2);
  for (int a : assign_by_lda(tie, ds)) CHECK(a == 0);

  Dataset other = ds;
  other.examples.pop_back();
  CHECK_THROWS_AS(assign_by_lda(m, other), ContractError);
  CHECK_THROWS_AS(lda_fit(Dataset{"tiny", 2, {{"a b", 0}, {"c d", 1}}}, {.k = 3}), DataError);
  CHECK_THROWS_AS(lda_fit(ds, {.k = 1}), ContractError);
}

TEST_CASE("random split sizes differ by at most one") {
  auto a = split_random(10, 3, 7);
  std::map<int, int> sizes;
  for (int x : a) ++sizes[x];
  CHECK(sizes == std::map<int, int>{{0, 4}, {1, 3}, {2, 3}});
  CHECK(split_random(10, 3, 7) == a);
  CHECK_FALSE(split_random(10, 3, 8) == a);
}

TEST_CASE("label split: exact, subdivided, and too few clusters") {
  auto ds = labeled_pool(100, 5);
  auto exact = split_by_label(ds, 5, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(exact[i] == *ds.examples[i].label);

  auto sub = split_by_label(ds, 10, 0);
  std::map<int, std::set<int>> clusters_per_label;
  std::map<int, std::set<int>> labels_per_cluster;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    clusters_per_label[*ds.examples[i].label].insert(sub[i]);
    labels_per_cluster[sub[i]].insert(*ds.examples[i].label);
  }
  for (const auto& [_, c] : clusters_per_label) CHECK(c.size() == 2);
  for (const auto& [_, l] : labels_per_cluster) CHECK(l.size() == 1);
  CHECK_THROWS_AS(split_by_label(ds, 3, 0), ContractError);
}

TEST_CASE("make_tasks splits each cluster and partitions the pool") {
  auto ds = labeled_pool(100, 5);
  std::vector<int> assign(100);
  for (int i = 0; i < 100; ++i) assign[i] = i / 10;
  auto set = make_tasks(ds, assign, {.val_fraction = 0.2, .min_size = 8, .seed = 3});
  REQUIRE(set.tasks.size() == 10);
  std::vector<int> seen(100, 0);
  for (const auto& t : set.tasks) {
    CHECK(t.train.size() == 8);
    CHECK(t.valid.size() == 2);
    for (auto i : t.train_indices) ++seen[i];
    for (auto i : t.valid_indices) ++seen[i];
  }
  for (int s : seen) CHECK(s == 1);
  CHECK(set.merge_log.empty());
  CHECK_THROWS_AS(make_tasks(ds, assign, {.val_fraction = 0.6}), ContractError);
  CHECK_THROWS_AS(make_tasks(ds, assign, {.val_fraction = 0.2, .min_size = 50}), DataError);
}

TEST_CASE("a singleton k-means cluster merges into the nearest centroid") {
  auto ds = labeled_pool(21, 2);
  std::vector<int> assign(21);
  for (int i = 0; i < 20; ++i) assign[i] = i < 10 ? 0 : 2;
  assign[20] = 1;
  Matrix centroids(3, 2);
  centroids << 0, 0, 9, 9, 10, 10;
  TaskOptions opt{.val_fraction = 0.2, .min_size = 8, .seed = 0, .origin = "kmeans", .centroids = centroids};
  auto set = make_tasks(ds, assign, opt);
  REQUIRE(set.tasks.size() == 2);
  REQUIRE(set.merge_log.size() == 1);
  CHECK(set.merge_log[0]["cluster"] == 1);
  CHECK(set.merge_log[0]["into"] == 2);
  CHECK(set.merge_log[0]["rule"] == "nearest-centroid");
  const auto& t = set.tasks[1];
  CHECK(t.train.size() + t.valid.size() == 11);

  opt.centroids.reset();
  auto fold = make_tasks(ds, assign, opt);
  CHECK(fold.merge_log[0]["rule"] == "largest");
  CHECK(fold.merge_log[0]["into"] == 0);
}

TEST_CASE("generate_tasks for every strategy, with file round trip") {
  BenchmarkSpec spec;
  spec.backbone_sentences = 10;
  spec.source_size = 10;
  spec.pretrain_size = 400;
  spec.downstream_size = 10;
  auto bm = make_synthetic_benchmark(spec, 2);
  for (auto s : {Strategy::kKMeans, Strategy::kLda, Strategy::kRandom, Strategy::kLabel}) {
    TaskgenConfig cfg;
    cfg.strategy = s;
    cfg.k = 10;
    cfg.embedding = EmbedMethod::kTfIdf;
    cfg.lda_iterations = 30;
    auto g = generate_tasks(bm.pretrain, cfg, nullptr, nullptr);
    std::size_t covered = 0;
    for (const auto& t : g.set.tasks) covered += t.train.size() + t.valid.size();
    CHECK(covered == bm.pretrain.size());
    CHECK(g.manifest["strategy"] == strategy_name(s));
    if (s == Strategy::kKMeans) {
      CHECK(g.manifest["metrics"].contains("silhouette"));
      CHECK(g.manifest["metrics"].contains("inertia"));
    }
    auto dir = std::filesystem::temp_directory_path() / ("metapt_tasks_" + strategy_name(s));
    std::filesystem::remove_all(dir);
    write_tasks(dir, g);
    auto back = read_tasks(dir);
    REQUIRE(back.set.tasks.size() == g.set.tasks.size());
    for (std::size_t i = 0; i < back.set.tasks.size(); ++i) {
      CHECK(back.set.tasks[i].train.examples == g.set.tasks[i].train.examples);
      CHECK(back.set.tasks[i].valid_indices == g.set.tasks[i].valid_indices);
    }
  }
  TaskgenConfig one;
  one.strategy = Strategy::kRandom;
  one.k = 1;
  auto g = generate_tasks(bm.pretrain, one, nullptr, nullptr);
  CHECK(g.set.tasks.size() == 1);
}
