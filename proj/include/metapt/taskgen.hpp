// SPDX-License-Identifier: Apache-2.0
//
// Meta-task construction: embed a pool of sentences, partition it (k-means,
// LDA topics, random, by label) and split each part into train/validation.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/corpus.hpp"
#include "metapt/model.hpp"

namespace metapt {

enum class EmbedMethod { kMeanPooledBackbone, kTfIdf };

std::string embed_method_name(EmbedMethod m);
EmbedMethod parse_embed_method(const std::string& name);

struct EmbeddingMatrix {
  Matrix rows;  // one L2-normalized row per example
  EmbedMethod method = EmbedMethod::kTfIdf;
};

/// `backbone` and `tokenizer` are required for kMeanPooledBackbone.
EmbeddingMatrix embed(const Dataset& ds, EmbedMethod method, const BackboneParams* backbone = nullptr,
                      const Tokenizer* tokenizer = nullptr, int workers = 1);

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centroids;                     // K x d
  std::vector<double> inertia_history;  // after each assignment pass
  int iterations = 0;
  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

/// k-means++ seeding followed by Lloyd iterations until assignments settle.
/// Throws NumericError if inertia ever increases.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 100);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Mean silhouette over at most `max_points` rows (seeded subsample).
double silhouette(const Matrix& points, const std::vector<int>& assignments, std::size_t max_points = 2000,
                  std::uint64_t seed = 0);

struct LdaOptions {
  int k = 10;
  int iterations = 200;
  std::uint64_t seed = 0;
  double alpha = -1.0;  // negative selects 50 / k
  double beta = 0.01;
  double stopword_fraction = 0.01;
};

struct LdaModel {
  int k = 0;
  double alpha = 0.0;
  double beta = 0.0;
  std::vector<std::string> vocab;
  std::vector<std::string> stopwords;
  std::vector<std::vector<int>> docs;         // word ids per document
  std::vector<std::vector<int>> topic_of;     // topic per token
  std::vector<std::vector<int>> topic_word;   // k x V
  std::vector<std::vector<int>> doc_topic;    // D x k
  std::vector<int> topic_total;
  std::vector<double> log_likelihood;  // per sweep
  std::string corpus_hash;

  std::vector<std::string> top_words(int topic, std::size_t n) const;
  /// Throws ContractError if the count tables disagree with the assignments.
  void check_consistency() const;
};

LdaModel lda_fit(const Dataset& ds, const LdaOptions& options);

/// Argmax of the document-topic posterior; ties go to the smallest topic.
std::vector<int> assign_by_lda(const LdaModel& model, const Dataset& ds);

std::vector<int> split_random(std::size_t n, int k, std::uint64_t seed);
std::vector<int> split_by_label(const Dataset& ds, int k, std::uint64_t seed);

struct MetaTask {
  int task_id = 0;
  Dataset train;
  Dataset valid;
  std::vector<std::size_t> train_indices;  // positions in the source pool
  std::vector<std::size_t> valid_indices;
  std::string origin;
};

struct TaskOptions {
  double val_fraction = 0.2;
  std::size_t min_size = 8;
  std::uint64_t seed = 0;
  std::string origin;
  /// Cluster centroids (K x d) enable nearest-centroid merging.
  std::optional<Matrix> centroids;
};

struct TaskSet {
  std::vector<MetaTask> tasks;
  nlohmann::json merge_log = nlohmann::json::array();
};

TaskSet make_tasks(const Dataset& ds, const std::vector<int>& assignments, const TaskOptions& options);

enum class Strategy { kKMeans, kLda, kRandom, kLabel };

std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct TaskgenConfig {
  Strategy strategy = Strategy::kKMeans;
  int k = 10;
  EmbedMethod embedding = EmbedMethod::kMeanPooledBackbone;
  int kmeans_max_iter = 100;
  int lda_iterations = 200;
  double val_fraction = 0.2;
  std::size_t min_size = 8;
  std::uint64_t seed = 0;
  int workers = 1;
};

void to_json(nlohmann::json& j, const TaskgenConfig& c);
void from_json(const nlohmann::json& j, TaskgenConfig& c);

struct GeneratedTasks {
  TaskSet set;
  nlohmann::json manifest;  // strategy, sizes, merge log, cluster metrics
};

/// Full strategy dispatch. The backbone is only consulted for embeddings.
GeneratedTasks generate_tasks(const Dataset& pool, const TaskgenConfig& config, const BackboneParams* backbone,
                              const Tokenizer* tokenizer);

/// One JSONL per task (`task_000.jsonl`, lines carry a "split" field) plus
/// `manifest.json`.
void write_tasks(const std::filesystem::path& dir, const GeneratedTasks& generated);
GeneratedTasks read_tasks(const std::filesystem::path& dir);

}  // namespace metapt
