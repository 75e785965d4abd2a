// SPDX-License-Identifier: Apache-2.0
#include "metapt/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"

namespace metapt {

namespace {

nlohmann::json benchmark_json(const BenchmarkSpec& b) {
  return {{"n_classes", b.n_classes},
          {"source_domain", b.source_domain},
          {"pretrain_domains", b.pretrain_domains},
          {"downstream_domains", b.downstream_domains},
          {"backbone_sentences", b.backbone_sentences},
          {"source_size", b.source_size},
          {"pretrain_size", b.pretrain_size},
          {"downstream_size", b.downstream_size},
          {"slot_noise", b.slot_noise},
          {"label_word_rate", b.label_word_rate},
          {"label_word_fidelity", b.label_word_fidelity},
          {"custom_domains", b.custom_domains}};
}

BenchmarkSpec benchmark_from(const nlohmann::json& j) {
  BenchmarkSpec b;
  b.n_classes = j.at("n_classes").get<int>();
  b.source_domain = j.at("source_domain").get<std::string>();
  b.pretrain_domains = j.at("pretrain_domains").get<std::vector<std::string>>();
  b.downstream_domains = j.at("downstream_domains").get<std::vector<std::string>>();
  b.backbone_sentences = j.at("backbone_sentences").get<std::size_t>();
  b.source_size = j.at("source_size").get<std::size_t>();
  b.pretrain_size = j.at("pretrain_size").get<std::size_t>();
  b.downstream_size = j.at("downstream_size").get<std::size_t>();
  b.slot_noise = j.at("slot_noise").get<double>();
  b.label_word_rate = j.at("label_word_rate").get<double>();
  b.label_word_fidelity = j.at("label_word_fidelity").get<double>();
  b.custom_domains = j.at("custom_domains").get<std::map<std::string, std::vector<std::string>>>();
  return b;
}

nlohmann::json pretrain_json(const PretrainOptions& p) {
  return {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"lr", p.lr},
          {"weight_decay", p.weight_decay},
          {"mask_prob", p.mask_prob}};
}

PretrainOptions pretrain_from(const nlohmann::json& j) {
  PretrainOptions p;
  p.steps = j.at("steps").get<long>();
  p.batch_size = j.at("batch_size").get<int>();
  p.lr = j.at("lr").get<double>();
  p.weight_decay = j.at("weight_decay").get<double>();
  p.mask_prob = j.at("mask_prob").get<double>();
  return p;
}

// Sections whose seed/workers fields are derived rather than configured.
nlohmann::json without_derived(nlohmann::json j) {
  j.erase("seed");
  j.erase("workers");
  return j;
}

// Objects that are empty by default accept arbitrary keys (user maps).
void strict_merge(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: " + (path.empty() ? "document" : path) + " must be an object");
  const bool open = base.empty();
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) {
      if (open) {
        base[key] = value;
        continue;
      }
      throw ConfigError("config: unknown key '" + here + "'");
    }
    auto& slot = base[key];
    if (slot.is_object()) {
      strict_merge(slot, value, here);
    } else {
      slot = value;
    }
  }
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json model = c.backbone.model;
  model.erase("vocab_size");
  nlohmann::json taskgen = without_derived(c.taskgen);
  nlohmann::json tune = without_derived(c.downstream.tune);
  nlohmann::json ft_tune = without_derived(c.downstream.ft_tune);
  return {
      {"seed", c.seed},
      {"artifact_dir", c.artifact_dir},
      {"workers", c.workers},
      {"benchmark", benchmark_json(c.benchmark)},
      {"backbone", {{"model", model}, {"max_vocab", c.backbone.max_vocab}, {"pretrain", pretrain_json(c.backbone.pretrain)}}},
      {"pseudo", {{"annotator", without_derived(c.pseudo.annotator)}, {"threshold", c.pseudo.threshold}}},
      {"taskgen", taskgen},
      {"maml", without_derived(c.maml)},
      {"ppt", without_derived(c.ppt)},
      {"downstream",
       {{"methods", c.downstream.methods},
        {"datasets", c.downstream.datasets},
        {"seeds", c.downstream.seeds},
        {"shots", c.downstream.shots},
        {"pt_init", c.downstream.pt_init},
        {"tune", tune},
        {"ft_tune", ft_tune}}},
      {"ablation",
       {{"sizes", c.ablation.sizes},
        {"ks", c.ablation.ks},
        {"strategies", c.ablation.strategies},
        {"datasets", c.ablation.datasets},
        {"svg", c.ablation.svg}}},
  };
}

ExperimentConfig config_from_json(const nlohmann::json& user) {
  nlohmann::json j = to_json(ExperimentConfig{});
  strict_merge(j, user, "");
  ExperimentConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.artifact_dir = j.at("artifact_dir").get<std::string>();
    c.workers = j.at("workers").get<int>();
    c.benchmark = benchmark_from(j.at("benchmark"));

    const auto& bb = j.at("backbone");
    nlohmann::json model = bb.at("model");
    model["vocab_size"] = 0;
    c.backbone.model = model.get<ModelConfig>();
    c.backbone.max_vocab = bb.at("max_vocab").get<std::size_t>();
    c.backbone.pretrain = pretrain_from(bb.at("pretrain"));

    auto with_derived = [](nlohmann::json s) {
      s["seed"] = 0;
      s["workers"] = 1;
      return s;
    };
    c.pseudo.annotator = with_derived(j.at("pseudo").at("annotator")).get<TuneConfig>();
    c.pseudo.threshold = j.at("pseudo").at("threshold").get<double>();

    nlohmann::json tg = with_derived(j.at("taskgen"));
    c.taskgen = tg.get<TaskgenConfig>();
    c.maml = with_derived(j.at("maml")).get<MamlConfig>();
    c.ppt = with_derived(j.at("ppt")).get<PptConfig>();

    const auto& ds = j.at("downstream");
    c.downstream.methods = ds.at("methods").get<std::vector<std::string>>();
    c.downstream.datasets = ds.at("datasets").get<std::vector<std::string>>();
    c.downstream.seeds = ds.at("seeds").get<std::vector<std::uint64_t>>();
    c.downstream.shots = ds.at("shots").get<std::size_t>();
    c.downstream.pt_init = ds.at("pt_init").get<std::string>();
    c.downstream.tune = with_derived(ds.at("tune")).get<TuneConfig>();
    c.downstream.ft_tune = with_derived(ds.at("ft_tune")).get<TuneConfig>();

    const auto& ab = j.at("ablation");
    c.ablation.sizes = ab.at("sizes").get<std::vector<std::size_t>>();
    c.ablation.ks = ab.at("ks").get<std::vector<int>>();
    c.ablation.strategies = ab.at("strategies").get<std::vector<std::string>>();
    c.ablation.datasets = ab.at("datasets").get<std::vector<std::string>>();
    c.ablation.svg = ab.at("svg").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.resolve();
  return c;
}

void ExperimentConfig::resolve() {
  backbone.pretrain.seed = derive_seed(seed, "backbone/pretrain");
  pseudo.annotator.seed = derive_seed(seed, "pseudo/annotator");
  taskgen.seed = derive_seed(seed, "taskgen");
  taskgen.workers = workers;
  maml.seed = derive_seed(seed, "maml");
  maml.workers = workers;
  ppt.seed = derive_seed(seed, "ppt");

  if (workers < 1) throw ConfigError("workers must be >= 1");
  ModelConfig probe = backbone.model;
  probe.vocab_size = static_cast<int>(std::max<std::size_t>(backbone.max_vocab, 4));
  probe.validate();
  if (backbone.max_vocab < 16) throw ConfigError("backbone.max_vocab must be >= 16");
  const auto& p = backbone.pretrain;
  if (p.steps < 0 || p.batch_size < 1 || !(p.lr > 0) || !(p.mask_prob > 0 && p.mask_prob < 1)) {
    throw ConfigError("backbone.pretrain: steps >= 0, batch_size >= 1, lr > 0 and mask_prob in (0, 1) required");
  }
  pseudo.annotator.validate();
  if (!(pseudo.threshold > 0 && pseudo.threshold < 1)) throw ConfigError("pseudo.threshold must lie in (0, 1)");
  if (taskgen.k < 1) throw ConfigError("taskgen.k must be >= 1");
  maml.validate();
  ppt.validate();
  downstream.tune.validate();
  downstream.ft_tune.validate();
  for (const auto& m : downstream.methods) parse_method(m);
  parse_prompt_init(downstream.pt_init);
  if (downstream.seeds.empty()) throw ConfigError("downstream.seeds must not be empty");
  if (downstream.shots < 1) throw ConfigError("downstream.shots must be >= 1");
  for (const auto& s : ablation.strategies) parse_strategy(s);
  for (int k : ablation.ks) {
    if (k < 1) throw ConfigError("ablation.ks entries must be >= 1");
  }
  for (const auto& set : {downstream.datasets, ablation.datasets}) {
    for (const auto& d : set) {
      if (std::find(benchmark.downstream_domains.begin(), benchmark.downstream_domains.end(), d) ==
          benchmark.downstream_domains.end()) {
        throw ConfigError("unknown downstream dataset '" + d + "'");
      }
    }
  }
}

std::string ExperimentConfig::fingerprint(const std::vector<std::string>& sections) const {
  const auto j = to_json(*this);
  nlohmann::json picked = nlohmann::json::object();
  picked["seed"] = seed;
  if (sections.empty()) {
    picked = j;
    picked.erase("artifact_dir");
    picked.erase("workers");
  } else {
    for (const auto& s : sections) picked[s] = j.at(s);
  }
  return sha256_hex(picked.dump()).substr(0, 16);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) keys.push_back(k);
  nlohmann::json* node = &doc;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override: '" + path + "' does not name a config key");
    node = &(*node)[keys[i]];
    if (node->is_null()) *node = nlohmann::json::object();
  }
  if (!node->is_object()) throw ConfigError("override: '" + path + "' does not name a config key");
  (*node)[keys.back()] = value;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
  }
  // Overrides land on the user document; strict merging then vets every key.
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

std::filesystem::path artifact_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv("METAPT_ARTIFACT_ROOT"); env && *env) return env;
  return c.artifact_dir;
}

}  // namespace metapt
