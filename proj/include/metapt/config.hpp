// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one JSON document with a section per stage.
// Every key has a default; unknown keys are rejected with their dotted path.
// Per-stage seeds and worker counts are not configurable individually; they
// derive from the global `seed` and `workers`.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/downstream.hpp"
#include "metapt/metatrain.hpp"
#include "metapt/model.hpp"
#include "metapt/synthetic.hpp"
#include "metapt/taskgen.hpp"

namespace metapt {

struct BackboneSection {
  ModelConfig model;  // vocab_size is filled in from the tokenizer
  std::size_t max_vocab = 2000;
  PretrainOptions pretrain;
};

struct PseudoSection {
  TuneConfig annotator;
  double threshold = 0.95;
};

struct DownstreamSection {
  std::vector<std::string> methods{"PT", "PPT", "MetaPT", "FT"};
  std::vector<std::string> datasets;  // empty: every downstream domain
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t shots = 40;
  std::string pt_init = "random-normal";
  TuneConfig tune;
  TuneConfig ft_tune = TuneConfig::full_tuning();
};

struct AblationSection {
  std::vector<std::size_t> sizes{1000, 4000, 16000};
  std::vector<int> ks{3, 10, 30};
  std::vector<std::string> strategies{"kmeans", "lda", "random", "label"};
  std::vector<std::string> datasets;  // empty: every downstream domain
  bool svg = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string artifact_dir = "artifacts";
  int workers = 1;
  BenchmarkSpec benchmark;
  BackboneSection backbone;
  PseudoSection pseudo;
  TaskgenConfig taskgen;
  MamlConfig maml;
  PptConfig ppt;
  DownstreamSection downstream;
  AblationSection ablation;

  /// Fills every derived seed and worker count, then validates each section.
  void resolve();
  /// SHA-256 of the canonical JSON of the named top-level sections (all
  /// sections when empty).
  std::string fingerprint(const std::vector<std::string>& sections = {}) const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Strict parse: `j` is merged over the defaults and may not introduce keys.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Applies `a.b.c=value` (value parsed as JSON, otherwise taken as a string).
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Artifact root: $METAPT_ARTIFACT_ROOT when set, otherwise the config path.
std::filesystem::path artifact_root(const ExperimentConfig& c);

}  // namespace metapt
