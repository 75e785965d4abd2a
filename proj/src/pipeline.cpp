// SPDX-License-Identifier: Apache-2.0
#include "metapt/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "metapt/checkpoint.hpp"
#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"
#include "metapt/synthetic.hpp"

namespace metapt {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- plumbing

ArtifactLock::ArtifactLock(const fs::path& root) : path_(root / ".lock") {
  fs::create_directories(root);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    path_.clear();
    throw ArtifactError("artifact directory " + root.string() + " is locked by another run (remove " +
                        (root / ".lock").string() + " if stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

ArtifactLock::~ArtifactLock() {
  if (!path_.empty()) {
    std::error_code ec;
    fs::remove(path_, ec);
  }
}

EventLog::EventLog(const fs::path& path, bool echo) : echo_(echo) {
  fs::create_directories(path.parent_path());
  out_.emplace(path, std::ios::app);
  if (!*out_) throw ArtifactError("cannot open log " + path.string());
}

void EventLog::emit(const std::string& event, json fields) {
  const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  if (echo_) {
    std::string summary = "[metapt] " + event;
    for (const auto& [k, v] : fields.items()) {
      if (v.is_primitive()) summary += " " + k + "=" + (v.is_string() ? v.get<std::string>() : v.dump());
    }
    std::cerr << summary << '\n';
  }
  if (out_) {
    fields["event"] = event;
    fields["time_ms"] = now;
    *out_ << fields.dump() << '\n';
    out_->flush();
  }
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("missing artifact " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(buf.data()), static_cast<std::size_t>(in.gcount())));
  }
  return to_hex(h.finish());
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("missing artifact " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

std::string rel(const fs::path& root, const fs::path& p) { return fs::relative(p, root).generic_string(); }

json hashes(const fs::path& root, const std::vector<fs::path>& files) {
  json out = json::object();
  for (const auto& f : files) out[rel(root, f)] = file_hash(f);
  return out;
}

/// Re-hashes every output listed in a stage manifest; returns the manifest.
json verify_manifest(const fs::path& root, const fs::path& manifest_path) {
  const json m = read_json(manifest_path);
  if (!m.contains("outputs")) throw ArtifactError(manifest_path.string() + " lists no outputs");
  for (const auto& [file, expected] : m.at("outputs").items()) {
    const std::string actual = file_hash(root / file);
    if (actual != expected.get<std::string>()) {
      throw ArtifactError("hash mismatch for " + (root / file).string() + ": manifest " +
                          expected.get<std::string>().substr(0, 12) + ", file " + actual.substr(0, 12));
    }
  }
  return m;
}

json stage_manifest(const std::string& stage, const ExperimentConfig& cfg, json upstream, json outputs,
                    json extra = json::object()) {
  json m{{"stage", stage},
         {"config", to_json(cfg)},
         {"config_fingerprint", cfg.fingerprint()},
         {"upstream", std::move(upstream)},
         {"outputs", std::move(outputs)}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

struct Layout {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path backbone() const { return root / "backbone"; }
  fs::path pseudo() const { return root / "pseudo"; }
  fs::path tasks(const std::string& tag) const { return root / "tasks" / tag; }
  fs::path prompts() const { return root / "prompts"; }
  fs::path reports() const { return root / "reports"; }
};

std::vector<std::string> reserved_words(int n_classes) {
  auto w = default_label_words(n_classes);
  w.insert(w.end(), {"it", "was", "."});
  return w;
}

std::vector<std::string> eval_datasets(const ExperimentConfig& cfg) {
  return cfg.downstream.datasets.empty() ? cfg.benchmark.downstream_domains : cfg.downstream.datasets;
}

std::vector<std::string> ablation_datasets(const ExperimentConfig& cfg) {
  if (!cfg.ablation.datasets.empty()) return cfg.ablation.datasets;
  return {cfg.benchmark.downstream_domains.at(0)};
}

void check_backbone(const Workspace& ws, const std::string& where) {
  if (ws.backbone.content_hash() != ws.backbone_hash) {
    throw ContractError(where + ": frozen backbone changed during the run");
  }
}

LogSink sink_to(const fs::path& path) {
  fs::create_directories(path.parent_path());
  auto out = std::make_shared<std::ofstream>(path, std::ios::trunc);
  if (!*out) throw ArtifactError("cannot write " + path.string());
  return [out](const json& j) { *out << j.dump() << '\n'; };
}

/// Seeded `val_fraction` split of a labeled pool, both halves non-empty.
std::pair<Dataset, Dataset> split_pool(const Dataset& pool, double val_fraction, std::uint64_t seed) {
  if (pool.size() < 2) throw DataError("pool of " + std::to_string(pool.size()) + " examples cannot be split");
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(pool.size()))), 1, pool.size() - 1);
  Dataset train{pool.name + "/train", pool.n_classes, {}}, valid{pool.name + "/valid", pool.n_classes, {}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? valid : train).examples.push_back(pool.examples[order[i]]);
  }
  return {std::move(train), std::move(valid)};
}

std::string prompt_stem(const std::string& method, const std::string& tag) {
  return tag.empty() ? method : method + "-" + tag;
}

/// Loads a prompt checkpoint after verifying its stage manifest.
SoftPrompt load_prompt(const Layout& L, const std::string& stem, const ModelConfig& model) {
  const fs::path manifest = L.prompts() / (stem + ".manifest.json");
  if (!fs::exists(manifest)) {
    throw ArtifactError("missing prompt checkpoint " + (L.prompts() / (stem + ".ckpt")).string() +
                        " (run the corresponding training stage first)");
  }
  verify_manifest(L.root, manifest);
  return prompt_from_checkpoint(load_checkpoint(L.prompts() / (stem + ".ckpt")), model);
}

json train_summary(const TrainResult& r) {
  return {{"best_step", r.best_step},
          {"best_valid_accuracy", r.best_valid_accuracy},
          {"steps", r.steps},
          {"stop_reason", r.stop_reason},
          {"valid_curve", r.valid_curve}};
}

}  // namespace

// --------------------------------------------------------------- workspace

Workspace Workspace::open(const ExperimentConfig& cfg) {
  Layout L{artifact_root(cfg)};
  Workspace ws;
  ws.root = L.root;
  verify_manifest(L.root, L.backbone() / "manifest.json");
  ws.tokenizer = Tokenizer::from_json(read_json(L.backbone() / "tokenizer.json"));
  ws.backbone = backbone_from_checkpoint(load_checkpoint(L.backbone() / "backbone.ckpt"));
  ws.backbone_hash = ws.backbone.content_hash();
  ws.model = ws.backbone.config;
  ws.verbalizer = Verbalizer(default_label_words(cfg.benchmark.n_classes), ws.tokenizer);
  if (ws.model.prompt_len != cfg.backbone.model.prompt_len) {
    ws.model.prompt_len = cfg.backbone.model.prompt_len;
    ws.model.validate();
    ws.backbone.config = ws.model;
  }
  return ws;
}

Dataset Workspace::downstream(const std::string& name) const {
  Layout L{root};
  const json m = verify_manifest(root, L.data() / "manifest.json");
  const fs::path p = L.data() / "downstream" / (name + ".jsonl");
  if (!m.at("outputs").contains(rel(root, p))) throw ArtifactError("no downstream dataset '" + name + "'");
  return load_jsonl(p, m.at("n_classes").get<int>(), name);
}

Dataset Workspace::pool() const {
  Layout L{root};
  const json m = verify_manifest(root, L.pseudo() / "manifest.json");
  return load_jsonl(L.pseudo() / "pool.jsonl", m.at("n_classes").get<int>(), "pseudo");
}

std::string task_tag(const TaskgenConfig& c) { return strategy_name(c.strategy) + "-k" + std::to_string(c.k); }

// ------------------------------------------------------------------ stages

void cmd_generate(const ExperimentConfig& cfg, EventLog& log) {
  Layout L{artifact_root(cfg)};
  const auto seed = derive_seed(cfg.seed, "benchmark");
  const Benchmark bm = make_synthetic_benchmark(cfg.benchmark, seed);
  Dataset corpus{"backbone_corpus", cfg.benchmark.n_classes, {}};
  for (const auto& t : bm.backbone_corpus) corpus.examples.push_back({t, std::nullopt});
  std::vector<fs::path> files{L.data() / "backbone_corpus.jsonl", L.data() / "source.jsonl",
                              L.data() / "pretrain.jsonl"};
  fs::create_directories(L.data() / "downstream");
  save_jsonl(files[0], corpus);
  save_jsonl(files[1], bm.source);
  save_jsonl(files[2], bm.pretrain);
  json sizes{{"backbone_corpus", corpus.size()}, {"source", bm.source.size()}, {"pretrain", bm.pretrain.size()}};
  for (const auto& d : bm.downstream) {
    files.push_back(L.data() / "downstream" / (d.name + ".jsonl"));
    save_jsonl(files.back(), d);
    sizes[d.name] = d.size();
  }
  write_json(L.data() / "manifest.json",
             stage_manifest("generate", cfg, json::object(), hashes(L.root, files),
                            {{"n_classes", cfg.benchmark.n_classes},
                             {"benchmark_seed", seed},
                             {"label_words", bm.label_words},
                             {"sizes", sizes}}));
  log.emit("generate", {{"root", L.root.string()}, {"pretrain", bm.pretrain.size()}});
}

void cmd_pretrain_backbone(const ExperimentConfig& cfg, EventLog& log) {
  Layout L{artifact_root(cfg)};
  const json data = verify_manifest(L.root, L.data() / "manifest.json");
  const Dataset corpus = load_jsonl(L.data() / "backbone_corpus.jsonl", cfg.benchmark.n_classes);
  const auto texts = corpus.texts();
  const Tokenizer tok = Tokenizer::build(texts, cfg.backbone.max_vocab, reserved_words(cfg.benchmark.n_classes));
  ModelConfig mc = cfg.backbone.model;
  mc.vocab_size = static_cast<int>(tok.size());
  mc.validate();

  // The last 5% of the corpus is held out to report masked-token loss.
  const std::size_t n_eval = std::max<std::size_t>(1, texts.size() / 20);
  std::vector<std::vector<TokenId>> train, held;
  for (std::size_t i = 0; i < texts.size(); ++i) (i + n_eval < texts.size() ? train : held).push_back(tok.encode(texts[i]));
  const auto eval_seed = derive_seed(cfg.seed, "backbone/eval");
  const double before = mlm_loss(BackboneParams::random_init(mc, cfg.backbone.pretrain.seed), held,
                                 cfg.backbone.pretrain.mask_prob, eval_seed);
  const BackboneParams bb = pretrain_backbone(train, mc, cfg.backbone.pretrain);
  const double after = mlm_loss(bb, held, cfg.backbone.pretrain.mask_prob, eval_seed);

  const fs::path tok_path = L.backbone() / "tokenizer.json", ckpt = L.backbone() / "backbone.ckpt";
  write_json(tok_path, tok.to_json());
  fs::create_directories(L.backbone());
  save_checkpoint(ckpt, to_checkpoint(bb, CheckpointKind::kBackbone, cfg.fingerprint({"backbone"})));
  write_json(L.backbone() / "manifest.json",
             stage_manifest("pretrain-backbone", cfg, data.at("outputs"), hashes(L.root, {tok_path, ckpt}),
                            {{"model", mc},
                             {"backbone_hash", bb.content_hash()},
                             {"heldout_mlm_loss_init", before},
                             {"heldout_mlm_loss", after}}));
  log.emit("pretrain-backbone", {{"vocab", tok.size()}, {"mlm_loss_init", before}, {"mlm_loss", after}});
}

void cmd_pseudo_label(const ExperimentConfig& cfg, EventLog& log) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  const json data = verify_manifest(L.root, L.data() / "manifest.json");
  const int k = cfg.benchmark.n_classes;
  const Dataset source = load_jsonl(L.data() / "source.jsonl", k, "source");
  const Dataset raw = load_jsonl(L.data() / "pretrain.jsonl", k, "pretrain");
  const Annotator annotator = train_annotator(source, ws.backbone, ws.tokenizer, ws.verbalizer, cfg.pseudo.annotator);
  // Generation-truth labels are used only to report pseudo-label quality.
  const auto texts = raw.texts();
  const auto result = pseudo_label(texts, annotator, cfg.pseudo.threshold, cfg.workers);
  std::map<std::string, int> truth;
  for (const auto& e : raw.examples) truth.emplace(e.text, e.label.value_or(-1));
  std::size_t agree = 0;
  std::vector<std::size_t> retained_counts(static_cast<std::size_t>(k), 0);
  for (const auto& r : result.records) {
    agree += truth.at(r.text) == r.pseudo_label;
    ++retained_counts[static_cast<std::size_t>(r.pseudo_label)];
  }
  log.emit("pseudo-filter", {{"retained", result.records.size()},
                             {"dropped", result.dropped},
                             {"class_counts", retained_counts}});
  const auto balance_seed = derive_seed(cfg.seed, "pseudo/balance");
  const Dataset pool = balance(result.records, k, balance_seed, "pseudo");

  const fs::path ann = L.pseudo() / "annotator.ckpt", records = L.pseudo() / "records.jsonl",
                 pool_path = L.pseudo() / "pool.jsonl";
  fs::create_directories(L.pseudo());
  save_checkpoint(ann, to_checkpoint(annotator.model(), CheckpointKind::kAnnotator, cfg.fingerprint({"pseudo"})));
  save_pseudo_jsonl(records, result.records);
  save_jsonl(pool_path, pool);
  json upstream = data.at("outputs");
  upstream["backbone/backbone.ckpt"] = file_hash(L.backbone() / "backbone.ckpt");
  const double pseudo_acc =
      result.records.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(result.records.size());
  write_json(L.pseudo() / "manifest.json",
             stage_manifest("pseudo-label", cfg, upstream, hashes(L.root, {ann, records, pool_path}),
                            {{"n_classes", k},
                             {"threshold", cfg.pseudo.threshold},
                             {"seed", balance_seed},
                             {"input_count", result.input_count},
                             {"retained", result.records.size()},
                             {"dropped", result.dropped},
                             {"retained_class_counts", retained_counts},
                             {"pool_size", pool.size()},
                             {"pseudo_label_accuracy", pseudo_acc}}));
  check_backbone(ws, "pseudo-label");
  log.emit("pseudo-label", {{"retained", result.records.size()},
                            {"dropped", result.dropped},
                            {"pool", pool.size()},
                            {"pseudo_accuracy", pseudo_acc}});
}

namespace {

/// Writes a task set and extends its manifest with provenance and hashes.
void write_task_dir(const fs::path& root, const fs::path& dir, GeneratedTasks& gen, const ExperimentConfig& cfg,
                    const json& upstream) {
  if (fs::exists(dir)) fs::remove_all(dir);
  write_tasks(dir, gen);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json m = read_json(dir / "manifest.json");
  m["stage"] = "cluster";
  m["experiment_config"] = to_json(cfg);
  m["upstream"] = upstream;
  m["outputs"] = hashes(root, files);
  write_json(dir / "manifest.json", m);
}

json pool_upstream(const fs::path& root) {
  return {{"pseudo/pool.jsonl", file_hash(root / "pseudo" / "pool.jsonl")},
          {"backbone/backbone.ckpt", file_hash(root / "backbone" / "backbone.ckpt")}};
}

std::vector<MetaTask> load_task_set(const Layout& L, const std::string& tag) {
  const fs::path dir = L.tasks(tag);
  if (!fs::exists(dir / "manifest.json")) {
    throw ArtifactError("missing task set " + dir.string() + " (run cluster first)");
  }
  verify_manifest(L.root, dir / "manifest.json");
  return read_tasks(dir).set.tasks;
}

}  // namespace

void cmd_cluster(const ExperimentConfig& cfg, EventLog& log) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  const Dataset pool = ws.pool();
  GeneratedTasks gen = generate_tasks(pool, cfg.taskgen, &ws.backbone, &ws.tokenizer);
  write_task_dir(L.root, L.tasks(task_tag(cfg.taskgen)), gen, cfg, pool_upstream(L.root));
  check_backbone(ws, "cluster");
  log.emit("cluster", {{"tag", task_tag(cfg.taskgen)},
                       {"tasks", gen.set.tasks.size()},
                       {"merges", gen.set.merge_log.size()}});
}

SoftPrompt initial_prompt(const ExperimentConfig& cfg, const ModelConfig& model) {
  return init_prompt(model, PromptInit::kRandomNormal, derive_seed(cfg.seed, "prompt/init"));
}

TrainResult train_metapt(const Workspace& ws, const std::vector<MetaTask>& tasks, const ExperimentConfig& cfg,
                         const LogSink& log) {
  auto encoded = encode_tasks(tasks, ws.tokenizer, ws.model);
  auto r = meta_train(encoded, ws.backbone, ws.verbalizer, cfg.maml, initial_prompt(cfg, ws.model), log);
  check_backbone(ws, "meta-train");
  return r;
}

TrainResult train_ppt(const Workspace& ws, const Dataset& pool, const ExperimentConfig& cfg, const LogSink& log) {
  auto [train, valid] = split_pool(pool, cfg.taskgen.val_fraction, derive_seed(cfg.ppt.seed, "split"));
  auto tr = encode_dataset(train, ws.tokenizer, ws.model);
  auto va = encode_dataset(valid, ws.tokenizer, ws.model);
  auto r = ppt_train(tr, va, ws.backbone, ws.verbalizer, cfg.ppt, initial_prompt(cfg, ws.model), log);
  check_backbone(ws, "ppt-train");
  return r;
}

void cmd_meta_train(const ExperimentConfig& cfg, EventLog& log) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  const std::string tag = task_tag(cfg.taskgen);
  const auto tasks = load_task_set(L, tag);
  const std::string stem = prompt_stem("metapt", tag);
  const fs::path ckpt = L.prompts() / (stem + ".ckpt");
  const auto r = train_metapt(ws, tasks, cfg, sink_to(L.prompts() / (stem + ".log.jsonl")));
  fs::create_directories(L.prompts());
  save_checkpoint(ckpt, to_checkpoint(r.best, ws.model, cfg.fingerprint({"taskgen", "maml"})));
  json upstream{{"tasks/" + tag + "/manifest.json", file_hash(L.tasks(tag) / "manifest.json")},
                {"backbone/backbone.ckpt", file_hash(L.backbone() / "backbone.ckpt")}};
  json extra = train_summary(r);
  extra["backbone_hash"] = ws.backbone.content_hash();
  write_json(L.prompts() / (stem + ".manifest.json"),
             stage_manifest("meta-train", cfg, upstream, hashes(L.root, {ckpt}), extra));
  log.emit("meta-train", {{"tag", tag},
                          {"steps", r.steps},
                          {"best_step", r.best_step},
                          {"best_valid_accuracy", r.best_valid_accuracy},
                          {"stop", r.stop_reason}});
}

void cmd_ppt_train(const ExperimentConfig& cfg, EventLog& log) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  const Dataset pool = ws.pool();
  const fs::path ckpt = L.prompts() / "ppt.ckpt";
  const auto r = train_ppt(ws, pool, cfg, sink_to(L.prompts() / "ppt.log.jsonl"));
  fs::create_directories(L.prompts());
  save_checkpoint(ckpt, to_checkpoint(r.best, ws.model, cfg.fingerprint({"ppt"})));
  json extra = train_summary(r);
  extra["backbone_hash"] = ws.backbone.content_hash();
  write_json(L.prompts() / "ppt.manifest.json",
             stage_manifest("ppt-train", cfg, pool_upstream(L.root), hashes(L.root, {ckpt}), extra));
  log.emit("ppt-train", {{"steps", r.steps}, {"best_valid_accuracy", r.best_valid_accuracy}});
}

namespace {

std::optional<SoftPrompt> pretrained_for(const Layout& L, const ExperimentConfig& cfg, Method m,
                                         const ModelConfig& model) {
  if (m == Method::kPPT) return load_prompt(L, "ppt", model);
  if (m == Method::kMetaPT) return load_prompt(L, prompt_stem("metapt", task_tag(cfg.taskgen)), model);
  return std::nullopt;
}

}  // namespace

double cmd_tune(const ExperimentConfig& cfg, EventLog& log, Method method, const std::string& dataset,
                std::uint64_t seed) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  const Dataset ds = ws.downstream(dataset);
  auto split = sample_fewshot(ds, cfg.downstream.shots, seed);
  const std::string stem = method_name(method) + "-" + dataset + "-s" + std::to_string(seed);
  const fs::path out = L.prompts() / "tuned" / (stem + ".ckpt");
  fs::create_directories(out.parent_path());
  double acc = 0.0;
  if (method == Method::kFT) {
    ModelConfig ft = ws.model;
    ft.prompt_len = 0;
    auto tc = cfg.downstream.ft_tune;
    tc.seed = seed;
    auto r = full_tune(ws.backbone, encode_dataset(split.train, ws.tokenizer, ft),
                       encode_dataset(split.valid, ws.tokenizer, ft), ws.verbalizer, tc);
    acc = evaluate(Tensor{}, r.model, encode_dataset(split.test.open_for_evaluation(), ws.tokenizer, ft),
                   ws.verbalizer, cfg.workers)
              .value();
    save_checkpoint(out, to_checkpoint(r.model, CheckpointKind::kBackbone, cfg.fingerprint({"downstream"})));
  } else {
    SoftPrompt init = method == Method::kPT
                          ? init_prompt(ws.model, parse_prompt_init(cfg.downstream.pt_init), seed, &ws.backbone)
                          : *pretrained_for(L, cfg, method, ws.model);
    auto tc = cfg.downstream.tune;
    tc.seed = seed;
    auto r = prompt_tune(init, ws.backbone, encode_dataset(split.train, ws.tokenizer, ws.model),
                         encode_dataset(split.valid, ws.tokenizer, ws.model), ws.verbalizer, tc);
    acc = evaluate(r.prompt, ws.backbone, encode_dataset(split.test.open_for_evaluation(), ws.tokenizer, ws.model),
                   ws.verbalizer, cfg.workers)
              .value();
    save_checkpoint(out, to_checkpoint(r.prompt, ws.model, cfg.fingerprint({"downstream"})));
  }
  check_backbone(ws, "tune");
  log.emit("tune", {{"method", method_name(method)}, {"dataset", dataset}, {"seed", seed}, {"accuracy", acc}});
  return acc;
}

EvalReport evaluate_method(const Workspace& ws, const ExperimentConfig& cfg, Method method, const Dataset& dataset,
                           const std::optional<SoftPrompt>& pretrained, const std::string& fingerprint) {
  CellInputs in;
  in.method = method;
  in.dataset = &dataset;
  in.backbone = &ws.backbone;
  in.tokenizer = &ws.tokenizer;
  in.verbalizer = &ws.verbalizer;
  in.pretrained_prompt = pretrained;
  in.pt_init = parse_prompt_init(cfg.downstream.pt_init);
  in.shots = cfg.downstream.shots;
  in.tune = cfg.downstream.tune;
  in.ft_tune = cfg.downstream.ft_tune;
  in.config_fingerprint = fingerprint;
  auto report = run_cell(in, cfg.downstream.seeds, [](const FewShotSplit& s) {
    if (s.test.access_count() != 1) {
      throw ContractError("held-out split was opened " + std::to_string(s.test.access_count()) + " times");
    }
  });
  check_backbone(ws, "eval");
  return report;
}

std::vector<EvalReport> cmd_eval(const ExperimentConfig& cfg, EventLog& log) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  json upstream{{"backbone/backbone.ckpt", file_hash(L.backbone() / "backbone.ckpt")},
                {"data/manifest.json", file_hash(L.data() / "manifest.json")}};
  std::map<Method, std::optional<SoftPrompt>> prompts;
  for (const auto& name : cfg.downstream.methods) {
    const Method m = parse_method(name);
    prompts[m] = pretrained_for(L, cfg, m, ws.model);
    if (m == Method::kPPT) upstream["prompts/ppt.ckpt"] = file_hash(L.prompts() / "ppt.ckpt");
    if (m == Method::kMetaPT) {
      const std::string stem = prompt_stem("metapt", task_tag(cfg.taskgen));
      upstream["prompts/" + stem + ".ckpt"] = file_hash(L.prompts() / (stem + ".ckpt"));
    }
  }
  const std::string fp = cfg.fingerprint();
  std::vector<EvalReport> reports;
  for (const auto& dname : eval_datasets(cfg)) {
    const Dataset ds = ws.downstream(dname);
    for (const auto& name : cfg.downstream.methods) {
      const Method m = parse_method(name);
      reports.push_back(evaluate_method(ws, cfg, m, ds, prompts.at(m), fp));
      const auto& r = reports.back();
      log.emit("eval", {{"method", r.method}, {"dataset", r.dataset}, {"mean", r.mean}, {"std", r.stdev}});
    }
  }
  const fs::path csv = L.reports() / "eval.csv", js = L.reports() / "eval.json";
  fs::create_directories(L.reports());
  write_reports_csv(csv, reports);
  write_json(js, reports);
  write_json(L.reports() / "eval.manifest.json",
             stage_manifest("eval", cfg, upstream, hashes(L.root, {csv, js}),
                            {{"backbone_hash", ws.backbone.content_hash()}}));
  return reports;
}

// --------------------------------------------------------------- ablations

Sweep parse_sweep(const std::string& name) {
  if (name == "datasize") return Sweep::kDatasize;
  if (name == "clusters") return Sweep::kClusters;
  if (name == "methods") return Sweep::kMethods;
  throw ConfigError("unknown sweep '" + name + "' (expected datasize, clusters or methods)");
}

std::string sweep_name(Sweep s) {
  switch (s) {
    case Sweep::kDatasize: return "datasize";
    case Sweep::kClusters: return "clusters";
    case Sweep::kMethods: return "methods";
  }
  return "?";
}

std::string ablation_csv_header() {
  return "sweep,setting," + report_csv_header() + ",pool_size,n_tasks,inertia,silhouette";
}

namespace {

std::string metric_cell(const json& m, const std::string& key) {
  if (!m.contains(key) || m.at(key).is_null()) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", m.at(key).get<double>());
  return buf;
}

std::string ablation_csv_row(const AblationRow& r) {
  std::string s = r.sweep + "," + r.setting + "," + report_csv_row(r.report) + ",";
  s += std::to_string(r.metrics.value("pool_size", 0)) + ",";
  s += (r.metrics.contains("n_tasks") ? std::to_string(r.metrics.at("n_tasks").get<int>()) : "") + ",";
  s += metric_cell(r.metrics, "inertia") + "," + metric_cell(r.metrics, "silhouette");
  return s;
}

/// One MetaPT configuration end to end: cluster, meta-train, evaluate.
std::vector<AblationRow> metapt_rows(const Workspace& ws, const ExperimentConfig& cfg, const Dataset& pool,
                                     const std::string& sweep, const std::string& setting, EventLog& log) {
  Layout L{ws.root};
  const fs::path dir = L.root / "ablations" / sweep / setting;
  GeneratedTasks gen = generate_tasks(pool, cfg.taskgen, &ws.backbone, &ws.tokenizer);
  json upstream = pool_upstream(L.root);
  upstream["pool_subset_hash"] = dataset_hash(pool);
  write_task_dir(L.root, dir / "tasks", gen, cfg, upstream);
  const auto r = train_metapt(ws, gen.set.tasks, cfg, sink_to(dir / "metapt.log.jsonl"));
  save_checkpoint(dir / "metapt.ckpt", to_checkpoint(r.best, ws.model, cfg.fingerprint({"taskgen", "maml"})));

  json metrics{{"pool_size", pool.size()}, {"n_tasks", static_cast<int>(gen.set.tasks.size())}};
  const auto& gm = gen.manifest.at("metrics");
  for (const char* key : {"inertia", "silhouette", "ari_vs_label"}) {
    if (gm.contains(key)) metrics[key] = gm.at(key);
  }
  metrics["meta_train"] = train_summary(r);
  std::vector<AblationRow> rows;
  for (const auto& dname : ablation_datasets(cfg)) {
    auto report = evaluate_method(ws, cfg, Method::kMetaPT, ws.downstream(dname), r.best, cfg.fingerprint());
    log.emit("ablate", {{"sweep", sweep}, {"setting", setting}, {"dataset", dname}, {"mean", report.mean}});
    rows.push_back({sweep, setting, std::move(report), metrics});
  }
  return rows;
}

}  // namespace

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg, EventLog& log, Sweep sweep) {
  const Workspace ws = Workspace::open(cfg);
  Layout L{ws.root};
  const Dataset pool = ws.pool();
  const std::string name = sweep_name(sweep);
  std::vector<AblationRow> rows;
  std::vector<double> xs;

  switch (sweep) {
    case Sweep::kDatasize: {
      std::vector<std::size_t> order(pool.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(cfg.seed, "ablate/datasize"));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t size : cfg.ablation.sizes) {
        const std::size_t n = std::min(size, pool.size());
        if (n < size) {
          log.emit("ablate-cap", {{"requested", size}, {"pool_size", pool.size()}});
        }
        // Nested prefixes of one shuffle, re-sorted into pool order.
        std::vector<std::size_t> keep(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
        std::sort(keep.begin(), keep.end());
        Dataset sub{"pseudo-n" + std::to_string(size), pool.n_classes, {}};
        for (auto i : keep) sub.examples.push_back(pool.examples[i]);
        auto r = metapt_rows(ws, cfg, sub, name, std::to_string(size), log);
        for (auto& row : r) row.metrics["requested_size"] = size;
        rows.insert(rows.end(), r.begin(), r.end());
        xs.push_back(static_cast<double>(size));
      }
      break;
    }
    case Sweep::kClusters: {
      for (int k : cfg.ablation.ks) {
        ExperimentConfig c = cfg;
        c.taskgen.k = k;
        auto r = metapt_rows(ws, c, pool, name, std::to_string(k), log);
        rows.insert(rows.end(), r.begin(), r.end());
        xs.push_back(k);
      }
      break;
    }
    case Sweep::kMethods: {
      for (const auto& s : cfg.ablation.strategies) {
        ExperimentConfig c = cfg;
        c.taskgen.strategy = parse_strategy(s);
        auto r = metapt_rows(ws, c, pool, name, s, log);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      const fs::path dir = L.root / "ablations" / name / "ppt";
      const auto r = train_ppt(ws, pool, cfg, sink_to(dir / "ppt.log.jsonl"));
      save_checkpoint(dir / "ppt.ckpt", to_checkpoint(r.best, ws.model, cfg.fingerprint({"ppt"})));
      for (const auto& dname : ablation_datasets(cfg)) {
        auto report = evaluate_method(ws, cfg, Method::kPPT, ws.downstream(dname), r.best, cfg.fingerprint());
        log.emit("ablate", {{"sweep", name}, {"setting", "ppt"}, {"dataset", dname}, {"mean", report.mean}});
        rows.push_back({name, "ppt", std::move(report), {{"pool_size", pool.size()}}});
      }
      break;
    }
  }

  std::string csv = ablation_csv_header() + "\n";
  for (const auto& r : rows) csv += ablation_csv_row(r) + "\n";
  const fs::path csv_path = L.reports() / ("ablate-" + name + ".csv");
  write_text(csv_path, csv);
  std::vector<fs::path> outputs{csv_path};
  if (cfg.ablation.svg && !xs.empty()) {
    const auto datasets = ablation_datasets(cfg);
    std::vector<double> means, stds;
    // First dataset only; one line per chart.
    for (const auto& r : rows) {
      if (r.report.dataset == datasets.front()) {
        means.push_back(r.report.mean);
        stds.push_back(r.report.stdev);
      }
    }
    const fs::path svg = L.reports() / ("ablate-" + name + ".svg");
    write_text(svg, render_svg("MetaPT accuracy on " + datasets.front(),
                               sweep == Sweep::kDatasize ? "pre-training samples" : "clusters", xs, means, stds));
    outputs.push_back(svg);
  }
  json detail = json::array();
  for (const auto& r : rows) detail.push_back({{"setting", r.setting}, {"report", r.report}, {"metrics", r.metrics}});
  write_json(L.reports() / ("ablate-" + name + ".manifest.json"),
             stage_manifest("ablate", cfg, pool_upstream(L.root), hashes(L.root, outputs),
                            {{"sweep", name}, {"rows", detail}}));
  return rows;
}

std::vector<EvalReport> run_pipeline(const ExperimentConfig& cfg, EventLog& log) {
  cmd_generate(cfg, log);
  cmd_pretrain_backbone(cfg, log);
  cmd_pseudo_label(cfg, log);
  cmd_cluster(cfg, log);
  cmd_meta_train(cfg, log);
  cmd_ppt_train(cfg, log);
  return cmd_eval(cfg, log);
}

}  // namespace metapt
