// SPDX-License-Identifier: Apache-2.0
#include "metapt/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"
#include "metapt/parallel.hpp"

namespace metapt {

std::string embed_method_name(EmbedMethod m) {
  return m == EmbedMethod::kTfIdf ? "tf-idf" : "mean-pooled-backbone";
}

EmbedMethod parse_embed_method(const std::string& name) {
  if (name == "tf-idf") return EmbedMethod::kTfIdf;
  if (name == "mean-pooled-backbone") return EmbedMethod::kMeanPooledBackbone;
  throw ConfigError("unknown embedding method '" + name + "'");
}

namespace {

void normalize_rows(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0) m.row(i) /= n;
  }
}

Matrix tfidf(const Dataset& ds) {
  std::vector<std::map<std::string, int>> tf(ds.size());
  std::map<std::string, int> df;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (const auto& w : Tokenizer::split(ds.examples[i].text)) ++tf[i][w];
    for (const auto& [w, _] : tf[i]) ++df[w];
  }
  std::map<std::string, Eigen::Index> col;
  for (const auto& [w, _] : df) col.emplace(w, static_cast<Eigen::Index>(col.size()));
  const double n = static_cast<double>(ds.size());
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(col.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (const auto& [w, c] : tf[i]) {
      const double idf = std::log((1.0 + n) / (1.0 + df[w])) + 1.0;
      m(static_cast<Eigen::Index>(i), col[w]) = (1.0 + std::log(static_cast<double>(c))) * idf;
    }
  }
  return m;
}

double sq_dist(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

}  // namespace

EmbeddingMatrix embed(const Dataset& ds, EmbedMethod method, const BackboneParams* backbone,
                      const Tokenizer* tokenizer, int workers) {
  if (ds.empty()) throw DataError("embed: empty dataset");
  EmbeddingMatrix out;
  out.method = method;
  if (method == EmbedMethod::kTfIdf) {
    out.rows = tfidf(ds);
  } else {
    if (!backbone || !tokenizer) throw ContractError("embed: mean-pooled embeddings need a backbone and tokenizer");
    if (!backbone->frozen) throw ContractError("embed: backbone must be frozen");
    const auto& cfg = backbone->config;
    out.rows = Matrix::Zero(static_cast<Eigen::Index>(ds.size()), cfg.d_model);
    parallel_for(ds.size(), workers, [&](std::size_t i) {
      ad::NoGrad guard;
      auto ids = tokenizer->encode(ds.examples[i].text);
      if (ids.empty()) throw DataError("embed: example " + std::to_string(i) + " has no tokens");
      if (ids.size() > static_cast<std::size_t>(cfg.max_seq_len)) ids.resize(static_cast<std::size_t>(cfg.max_seq_len));
      const Tensor h = encode(Tensor{}, *backbone, ids);
      out.rows.row(static_cast<Eigen::Index>(i)) = h.value().colwise().mean();
    });
  }
  normalize_rows(out.rows);
  return out;
}

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter) {
  const Eigen::Index n = points.rows();
  if (k < 1) throw ContractError("kmeans: K must be >= 1");
  if (k > n) throw DataError("kmeans: K=" + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  KMeansResult r;
  r.centroids.resize(k, points.cols());
  std::vector<double> d2(static_cast<std::size_t>(n));
  const auto first = static_cast<Eigen::Index>(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
  r.centroids.row(0) = points.row(first);
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = sq_dist(points, i, r.centroids, 0);
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index chosen = 0;
    if (total > 0) {
      double target = unit(rng) * total;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2[static_cast<std::size_t>(i)];
        if (target < 0 && d2[static_cast<std::size_t>(i)] > 0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    }
    r.centroids.row(c) = points.row(chosen);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(points, i, r.centroids, c));
  }

  r.assignments.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int it = 0; it < std::max(max_iter, 1); ++it) {
    std::vector<int> next(static_cast<std::size_t>(n));
    std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq_dist(points, i, r.centroids, 0);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(points, i, r.centroids, c);
        if (d < best_d) best_d = d, best = c;
      }
      next[static_cast<std::size_t>(i)] = best;
      dist[static_cast<std::size_t>(i)] = best_d;
      ++count[static_cast<std::size_t>(best)];
    }
    // An empty cluster takes over the point lying farthest from its centroid.
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < next.size(); ++i) {
        if (count[static_cast<std::size_t>(next[i])] > 1 && dist[i] > far_d) far_d = dist[i], far = i;
      }
      --count[static_cast<std::size_t>(next[far])];
      next[far] = c;
      dist[far] = 0.0;
      count[static_cast<std::size_t>(c)] = 1;
      r.centroids.row(c) = points.row(static_cast<Eigen::Index>(far));
    }
    const double inertia = std::accumulate(dist.begin(), dist.end(), 0.0);
    if (!r.inertia_history.empty()) {
      const double prev = r.inertia_history.back();
      if (inertia > prev + 1e-12 * std::max(1.0, prev)) {
        throw NumericError("kmeans: inertia increased from " + std::to_string(prev) + " to " + std::to_string(inertia));
      }
    }
    r.inertia_history.push_back(inertia);
    r.iterations = it + 1;
    const bool settled = next == r.assignments;
    r.assignments = std::move(next);
    if (settled) break;
    r.centroids.setZero();
    for (Eigen::Index i = 0; i < n; ++i) r.centroids.row(r.assignments[static_cast<std::size_t>(i)]) += points.row(i);
    for (int c = 0; c < k; ++c) r.centroids.row(c) /= static_cast<double>(count[static_cast<std::size_t>(c)]);
  }
  return r;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("adjusted_rand_index: label vectors must match");
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (const auto& [_, v] : table) index += c2(v);
  for (const auto& [_, v] : ra) sa += c2(v);
  for (const auto& [_, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(static_cast<double>(a.size()));
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

double silhouette(const Matrix& points, const std::vector<int>& assignments, std::size_t max_points,
                  std::uint64_t seed) {
  std::vector<std::size_t> idx(assignments.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > max_points) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_points);
    std::sort(idx.begin(), idx.end());
  }
  double total = 0;
  for (std::size_t i : idx) {
    std::map<int, std::pair<double, std::size_t>> by_cluster;
    for (std::size_t j : idx) {
      if (i == j) continue;
      auto& slot = by_cluster[assignments[j]];
      slot.first += std::sqrt(sq_dist(points, static_cast<Eigen::Index>(i), points, static_cast<Eigen::Index>(j)));
      ++slot.second;
    }
    auto own = by_cluster.find(assignments[i]);
    if (own == by_cluster.end()) continue;  // singleton contributes 0
    const double a = own->second.first / static_cast<double>(own->second.second);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [c, s] : by_cluster)
      if (c != assignments[i]) b = std::min(b, s.first / static_cast<double>(s.second));
    if (std::isfinite(b) && std::max(a, b) > 0) total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(idx.size());
}

std::vector<int> split_random(std::size_t n, int k, std::uint64_t seed) {
  if (k < 1) throw ContractError("split_random: K must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[order[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  return out;
}

std::vector<int> split_by_label(const Dataset& ds, int k, std::uint64_t seed) {
  if (!ds.labeled()) throw DataError("split_by_label: dataset has unlabeled examples");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.size(); ++i) groups[*ds.examples[i].label].push_back(i);
  const int labels = static_cast<int>(groups.size());
  if (k < labels) {
    throw ContractError("split_by_label: K=" + std::to_string(k) + " is below the " + std::to_string(labels) +
                        " labels present");
  }
  std::mt19937_64 rng(seed);
  std::vector<int> out(ds.size());
  int next_id = 0, g = 0;
  for (auto& [label, members] : groups) {
    const int parts = k / labels + (g < k % labels ? 1 : 0);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); ++i)
      out[members[i]] = next_id + static_cast<int>(i % static_cast<std::size_t>(parts));
    next_id += parts;
    ++g;
  }
  return out;
}

TaskSet make_tasks(const Dataset& ds, const std::vector<int>& assignments, const TaskOptions& opt) {
  if (assignments.size() != ds.size()) throw ContractError("make_tasks: assignments do not cover the dataset");
  if (!(opt.val_fraction > 0.0 && opt.val_fraction <= 0.5)) {
    throw ContractError("make_tasks: val_fraction must lie in (0, 0.5]");
  }
  std::map<int, std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (assignments[i] < 0) throw ContractError("make_tasks: negative cluster id");
    clusters[assignments[i]].push_back(i);
  }
  const std::size_t min_size = std::max<std::size_t>(opt.min_size, 2);
  TaskSet out;
  std::vector<int> small, large;
  for (const auto& [c, m] : clusters) (m.size() < min_size ? small : large).push_back(c);
  if (large.empty()) {
    throw DataError("make_tasks: every cluster is below the minimum size of " + std::to_string(min_size));
  }
  for (int c : small) {
    int into = large.front();
    std::string rule;
    if (opt.centroids && c < opt.centroids->rows()) {
      rule = "nearest-centroid";
      double best = std::numeric_limits<double>::infinity();
      for (int t : large) {
        const double d = sq_dist(*opt.centroids, c, *opt.centroids, t);
        if (d < best) best = d, into = t;
      }
    } else {
      rule = "largest";
      for (int t : large)
        if (clusters[t].size() > clusters[into].size()) into = t;
    }
    out.merge_log.push_back({{"cluster", c}, {"size", clusters[c].size()}, {"into", into}, {"rule", rule}});
    auto& dst = clusters[into];
    dst.insert(dst.end(), clusters[c].begin(), clusters[c].end());
    std::sort(dst.begin(), dst.end());
    clusters.erase(c);
  }

  int task_id = 0;
  for (auto& [c, members] : clusters) {
    MetaTask t;
    t.task_id = task_id;
    t.origin = opt.origin + "/cluster=" + std::to_string(c);
    std::vector<std::size_t> shuffled = members;
    std::mt19937_64 rng(derive_seed(opt.seed, "task/" + std::to_string(c)));
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(opt.val_fraction * static_cast<double>(members.size()))), 1,
        members.size() - 1);
    t.valid_indices.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
    t.train_indices.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_val), shuffled.end());
    std::sort(t.valid_indices.begin(), t.valid_indices.end());
    std::sort(t.train_indices.begin(), t.train_indices.end());
    const std::string base = ds.name + "/task" + std::to_string(task_id);
    t.train = {base + "/train", ds.n_classes, {}};
    t.valid = {base + "/valid", ds.n_classes, {}};
    for (auto i : t.train_indices) t.train.examples.push_back(ds.examples[i]);
    for (auto i : t.valid_indices) t.valid.examples.push_back(ds.examples[i]);
    out.tasks.push_back(std::move(t));
    ++task_id;
  }
  return out;
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kKMeans: return "kmeans";
    case Strategy::kLda: return "lda";
    case Strategy::kRandom: return "random";
    case Strategy::kLabel: return "label";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::kKMeans, Strategy::kLda, Strategy::kRandom, Strategy::kLabel})
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown task strategy '" + name + "' (expected kmeans, lda, random or label)");
}

void to_json(nlohmann::json& j, const TaskgenConfig& c) {
  j = {{"strategy", strategy_name(c.strategy)},
       {"k", c.k},
       {"embedding", embed_method_name(c.embedding)},
       {"kmeans_max_iter", c.kmeans_max_iter},
       {"lda_iterations", c.lda_iterations},
       {"val_fraction", c.val_fraction},
       {"min_size", c.min_size},
       {"seed", c.seed},
       {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, TaskgenConfig& c) {
  c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.k = j.at("k").get<int>();
  c.embedding = parse_embed_method(j.at("embedding").get<std::string>());
  c.kmeans_max_iter = j.at("kmeans_max_iter").get<int>();
  c.lda_iterations = j.at("lda_iterations").get<int>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.min_size = j.at("min_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.workers = j.at("workers").get<int>();
}

GeneratedTasks generate_tasks(const Dataset& pool, const TaskgenConfig& config, const BackboneParams* backbone,
                              const Tokenizer* tokenizer) {
  if (pool.empty()) throw DataError("generate_tasks: empty pool");
  TaskOptions opt{config.val_fraction, config.min_size, config.seed,
                  strategy_name(config.strategy) + ":k=" + std::to_string(config.k), std::nullopt};
  nlohmann::json metrics = nlohmann::json::object();
  std::vector<int> assign;
  switch (config.strategy) {
    case Strategy::kKMeans: {
      const auto e = embed(pool, config.embedding, backbone, tokenizer, config.workers);
      auto km = kmeans(e.rows, config.k, config.seed, config.kmeans_max_iter);
      metrics["inertia"] = km.inertia();
      metrics["inertia_history"] = km.inertia_history;
      metrics["iterations"] = km.iterations;
      metrics["silhouette"] = config.k > 1 ? silhouette(e.rows, km.assignments, 2000, config.seed) : 0.0;
      metrics["embedding"] = embed_method_name(config.embedding);
      opt.centroids = km.centroids;
      assign = std::move(km.assignments);
      break;
    }
    case Strategy::kLda: {
      auto model = lda_fit(pool, {config.k, config.lda_iterations, config.seed});
      metrics["log_likelihood_first"] = model.log_likelihood.front();
      metrics["log_likelihood_last"] = model.log_likelihood.back();
      assign = assign_by_lda(model, pool);
      break;
    }
    case Strategy::kRandom:
      assign = split_random(pool.size(), config.k, config.seed);
      break;
    case Strategy::kLabel:
      assign = split_by_label(pool, config.k, config.seed);
      break;
  }
  if (pool.labeled() && config.k > 1) {
    std::vector<int> labels;
    for (const auto& ex : pool.examples) labels.push_back(*ex.label);
    metrics["ari_vs_label"] = adjusted_rand_index(assign, labels);
  }
  GeneratedTasks g;
  g.set = make_tasks(pool, assign, opt);
  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& t : g.set.tasks) sizes.push_back({t.train.size(), t.valid.size()});
  g.manifest = {{"strategy", strategy_name(config.strategy)},
                {"k", config.k},
                {"seed", config.seed},
                {"config", config},
                {"pool", pool.name},
                {"pool_size", pool.size()},
                {"pool_hash", dataset_hash(pool)},
                {"n_classes", pool.n_classes},
                {"n_tasks", g.set.tasks.size()},
                {"task_sizes", sizes},
                {"merge_log", g.set.merge_log},
                {"metrics", metrics}};
  return g;
}

namespace {
std::string task_file(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "task_%03d.jsonl", id);
  return buf;
}
}  // namespace

void write_tasks(const std::filesystem::path& dir, const GeneratedTasks& generated) {
  std::filesystem::create_directories(dir);
  for (const auto& t : generated.set.tasks) {
    std::ofstream out(dir / task_file(t.task_id), std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write task file in " + dir.string());
    auto emit = [&](const Dataset& d, const std::vector<std::size_t>& idx, const char* split) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        nlohmann::json j{{"text", d.examples[i].text}, {"split", split}, {"index", idx[i]}};
        if (d.examples[i].label) j["label"] = *d.examples[i].label;
        out << j.dump() << '\n';
      }
    };
    emit(t.train, t.train_indices, "train");
    emit(t.valid, t.valid_indices, "valid");
  }
  std::ofstream(dir / "manifest.json", std::ios::binary | std::ios::trunc) << generated.manifest.dump(2) << '\n';
}

GeneratedTasks read_tasks(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream min(mpath);
  if (!min) throw ArtifactError("missing task manifest " + mpath.string());
  GeneratedTasks g;
  try {
    g.manifest = nlohmann::json::parse(min);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("corrupt task manifest " + mpath.string() + ": " + e.what());
  }
  const int n_classes = g.manifest.at("n_classes").get<int>();
  const auto n_tasks = g.manifest.at("n_tasks").get<int>();
  g.set.merge_log = g.manifest.at("merge_log");
  for (int id = 0; id < n_tasks; ++id) {
    const auto path = dir / task_file(id);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("missing task file " + path.string());
    MetaTask t;
    t.task_id = id;
    t.origin = g.manifest.at("strategy").get<std::string>();
    const std::string base = g.manifest.at("pool").get<std::string>() + "/task" + std::to_string(id);
    t.train = {base + "/train", n_classes, {}};
    t.valid = {base + "/valid", n_classes, {}};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        Example ex{j.at("text").get<std::string>(), std::nullopt};
        if (j.contains("label")) ex.label = j["label"].get<int>();
        const bool train = j.at("split").get<std::string>() == "train";
        (train ? t.train : t.valid).examples.push_back(std::move(ex));
        (train ? t.train_indices : t.valid_indices).push_back(j.at("index").get<std::size_t>());
      } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    t.train.validate();
    t.valid.validate();
    g.set.tasks.push_back(std::move(t));
  }
  return g;
}

}  // namespace metapt
