// SPDX-License-Identifier: Apache-2.0
//
// Pipeline stages over an artifact directory. Every stage reads verified
// upstream artifacts, writes its outputs plus a manifest.json naming the
// upstream hashes and the resolved config, and never modifies its inputs.
//
//   data/        generated benchmark                      (generate)
//   backbone/    tokenizer + frozen backbone              (pretrain-backbone)
//   pseudo/      annotator, retained records, pool        (pseudo-label)
//   tasks/<tag>/ meta tasks                               (cluster)
//   prompts/     metapt-<tag>.ckpt, ppt.ckpt, tuned/      (meta-train, ppt-train, tune)
//   reports/     eval and ablation CSV / JSON / SVG       (eval, ablate)
//   logs/        JSONL event stream
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/config.hpp"
#include "metapt/corpus.hpp"
#include "metapt/downstream.hpp"
#include "metapt/metatrain.hpp"
#include "metapt/model.hpp"
#include "metapt/taskgen.hpp"
#include "metapt/tokenizer.hpp"

namespace metapt {

/// Exclusive hold on an artifact directory for the lifetime of the object.
class ArtifactLock {
 public:
  explicit ArtifactLock(const std::filesystem::path& root);
  ~ArtifactLock();
  ArtifactLock(const ArtifactLock&) = delete;
  ArtifactLock& operator=(const ArtifactLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// JSONL event sink with a one-line human summary on stderr.
class EventLog {
 public:
  EventLog() = default;
  EventLog(const std::filesystem::path& path, bool echo);
  void emit(const std::string& event, nlohmann::json fields = nlohmann::json::object());

 private:
  std::optional<std::ofstream> out_;
  bool echo_ = false;
};

/// SHA-256 of a file's bytes.
std::string file_hash(const std::filesystem::path& path);

/// Loaded and hash-verified outputs of the upstream stages.
struct Workspace {
  std::filesystem::path root;
  Tokenizer tokenizer;
  BackboneParams backbone;
  std::string backbone_hash;
  Verbalizer verbalizer;
  ModelConfig model;

  static Workspace open(const ExperimentConfig& cfg);
  Dataset downstream(const std::string& name) const;
  /// The balanced pseudo-labeled pre-training pool.
  Dataset pool() const;
};

/// Directory tag for a task set, e.g. "kmeans-k10".
std::string task_tag(const TaskgenConfig& c);

void cmd_generate(const ExperimentConfig& cfg, EventLog& log);
void cmd_pretrain_backbone(const ExperimentConfig& cfg, EventLog& log);
void cmd_pseudo_label(const ExperimentConfig& cfg, EventLog& log);
void cmd_cluster(const ExperimentConfig& cfg, EventLog& log);
void cmd_meta_train(const ExperimentConfig& cfg, EventLog& log);
void cmd_ppt_train(const ExperimentConfig& cfg, EventLog& log);
/// Tunes one (method, dataset, seed) cell and saves the adapted prompt.
double cmd_tune(const ExperimentConfig& cfg, EventLog& log, Method method, const std::string& dataset,
                std::uint64_t seed);
std::vector<EvalReport> cmd_eval(const ExperimentConfig& cfg, EventLog& log);

enum class Sweep { kDatasize, kClusters, kMethods };
Sweep parse_sweep(const std::string& name);
std::string sweep_name(Sweep s);

struct AblationRow {
  std::string sweep;
  std::string setting;  // pool size, K or strategy
  EvalReport report;
  nlohmann::json metrics;  // pool size, task count, cluster quality
};

/// Runs the sweep on the shared pool and writes reports/ablate-<sweep>.csv
/// (plus an SVG for the numeric sweeps when enabled).
std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg, EventLog& log, Sweep sweep);
std::string ablation_csv_header();

/// generate through eval.
std::vector<EvalReport> run_pipeline(const ExperimentConfig& cfg, EventLog& log);

/// Building blocks shared by the stages and the ablation drivers.
TrainResult train_metapt(const Workspace& ws, const std::vector<MetaTask>& tasks, const ExperimentConfig& cfg,
                         const LogSink& log = {});
TrainResult train_ppt(const Workspace& ws, const Dataset& pool, const ExperimentConfig& cfg, const LogSink& log = {});
SoftPrompt initial_prompt(const ExperimentConfig& cfg, const ModelConfig& model);
EvalReport evaluate_method(const Workspace& ws, const ExperimentConfig& cfg, Method method, const Dataset& dataset,
                           const std::optional<SoftPrompt>& pretrained, const std::string& fingerprint);

}  // namespace metapt
