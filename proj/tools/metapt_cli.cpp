// SPDX-License-Identifier: Apache-2.0
//
// metapt: command-line front end for the pipeline stages.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 configuration error, 3 missing or
// corrupt artifact (including a held lock), 4 numeric failure, 5 shape
// mismatch, 6 violated precondition, 7 bad data.
#include <CLI11.hpp>

#include <iostream>

#include "metapt/config.hpp"
#include "metapt/errors.hpp"
#include "metapt/pipeline.hpp"

namespace {

using namespace metapt;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON); defaults apply when omitted");
  cmd->add_option("-s,--set", c.overrides, "override a config key, e.g. --set maml.alpha=0.05")->take_all();
  cmd->add_flag("-q,--quiet", c.quiet, "no progress lines on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned soft prompt initialization on a synthetic cross-domain benchmark"};
  app.require_subcommand(1);
  Common common;

  struct Stage {
    const char* name;
    const char* help;
  };
  const Stage simple[] = {
      {"generate", "write the synthetic benchmark"},
      {"pretrain-backbone", "build the tokenizer and pre-train the frozen backbone"},
      {"pseudo-label", "train the annotator, pseudo-label and balance the open corpus"},
      {"cluster", "split the pseudo-labeled pool into meta tasks"},
      {"meta-train", "meta-learn the prompt initialization over the tasks"},
      {"ppt-train", "pre-train a prompt on the pooled data"},
      {"eval", "few-shot evaluation of every configured method and dataset"},
      {"pipeline", "generate through eval in one go"},
      {"print-config", "print the fully resolved config"},
  };
  std::map<std::string, CLI::App*> cmds;
  for (const auto& s : simple) {
    cmds[s.name] = app.add_subcommand(s.name, s.help);
    add_common(cmds[s.name], common);
  }

  std::string method = "MetaPT", dataset;
  std::uint64_t seed = 1;
  auto* tune = app.add_subcommand("tune", "tune and save one (method, dataset, seed) cell");
  add_common(tune, common);
  tune->add_option("--method", method, "PT, PPT, MetaPT or FT")->capture_default_str();
  tune->add_option("--dataset", dataset, "downstream dataset")->required();
  tune->add_option("--seed", seed, "few-shot sampling seed")->capture_default_str();

  std::string sweep;
  auto* ablate = app.add_subcommand("ablate", "run a sweep and write its CSV report");
  add_common(ablate, common);
  ablate->add_option("--sweep", sweep, "datasize, clusters or methods")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = load_config(common.config, common.overrides);
    if (cmds["print-config"]->parsed()) {
      std::cout << to_json(cfg).dump(2) << '\n';
      return 0;
    }
    const auto root = artifact_root(cfg);
    ArtifactLock lock(root);
    EventLog log(root / "logs" / "events.jsonl", !common.quiet);
    log.emit("start", {{"command", app.get_subcommands().front()->get_name()},
                       {"config_fingerprint", cfg.fingerprint()}});

    const auto print_reports = [](const std::vector<EvalReport>& reports) {
      std::cout << report_csv_header() << '\n';
      for (const auto& r : reports) std::cout << report_csv_row(r) << '\n';
    };
    if (cmds["generate"]->parsed()) cmd_generate(cfg, log);
    if (cmds["pretrain-backbone"]->parsed()) cmd_pretrain_backbone(cfg, log);
    if (cmds["pseudo-label"]->parsed()) cmd_pseudo_label(cfg, log);
    if (cmds["cluster"]->parsed()) cmd_cluster(cfg, log);
    if (cmds["meta-train"]->parsed()) cmd_meta_train(cfg, log);
    if (cmds["ppt-train"]->parsed()) cmd_ppt_train(cfg, log);
    if (cmds["eval"]->parsed()) print_reports(cmd_eval(cfg, log));
    if (cmds["pipeline"]->parsed()) print_reports(run_pipeline(cfg, log));
    if (tune->parsed()) {
      std::cout << cmd_tune(cfg, log, parse_method(method), dataset, seed) << '\n';
    }
    if (ablate->parsed()) {
      std::cout << ablation_csv_header() << '\n';
      for (const auto& r : cmd_ablate(cfg, log, parse_sweep(sweep))) {
        std::cout << r.sweep << ',' << r.setting << ',' << report_csv_row(r.report) << '\n';
      }
    }
    log.emit("done");
    return 0;
  } catch (const metapt::Error& e) {
    std::cerr << "metapt: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "metapt: unexpected failure: " << e.what() << '\n';
    return 1;
  }
}
