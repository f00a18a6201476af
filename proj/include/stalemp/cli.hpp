#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stalemp/app.hpp"

namespace stalemp::app {

/// Flag values seen on the command line, as a JSON patch over the config file.
struct Overrides {
  json patch = json::object();
  std::string config_path;
};

inline void add_run_options(CLI::App* cmd, Overrides& ov) {
  auto set = [&ov](const char* key) {
    return [&ov, key](const auto& v) { ov.patch[key] = v; };
  };
  auto flag = [&ov](const char* key) {
    return [&ov, key](std::int64_t) { ov.patch[key] = true; };
  };
  cmd->add_option("--config", ov.config_path, "JSON config file; flags given on the command line take precedence");
  cmd->add_option_function<std::string>("--edge-list", set("edge_list"), "edge list file (src<TAB>dst per line)");
  cmd->add_option_function<std::string>("--features", set("features"), "binary float32 feature matrix");
  cmd->add_option_function<std::string>("--labels", set("labels"), "one integer label per line");
  cmd->add_flag_function("--remap-ids", flag("remap_ids"), "map sparse edge-list ids onto 0..n-1");
  cmd->add_option_function<std::vector<std::string>>(
         "--synth-sbm", [&ov](const std::vector<std::string>& kv) { ov.patch["synth_sbm"] = parse_sbm_tokens(kv); },
         "synthetic block model, key=value pairs: n blocks p_in p_out feat_dim noise seed")
      ->expected(0, CLI::detail::expected_max_vector_size)
      ->allow_extra_args();
  cmd->add_option_function<std::size_t>("--clusters", set("clusters"), "number of graph partitions");
  cmd->add_option_function<std::size_t>("--batch-clusters", set("batch_clusters"), "partitions per mini-batch");
  cmd->add_option_function<std::size_t>("--layers", set("layers"), "number of attention layers");
  cmd->add_option_function<std::size_t>("--hidden", set("hidden"), "hidden width");
  cmd->add_option_function<double>("--lr", set("lr"), "learning rate");
  cmd->add_option_function<double>("--weight-decay", set("weight_decay"), "decoupled weight decay");
  cmd->add_option_function<double>("--dropout", set("dropout"), "feature dropout rate");
  cmd->add_option_function<double>("--lambda", set("lambda"), "weight of the staleness loss");
  cmd->add_option_function<std::int64_t>("--g-thres", set("g_thres"), "drop frontier rows older than this many iterations");
  cmd->add_option_function<std::string>("--augment", set("augment"), "staleness channel: none|concat|sum")
      ->check(CLI::IsMember({"none", "concat", "sum"}));
  cmd->add_option_function<std::string>("--mix", set("mix"), "in/out aggregate combination: mass|sum")
      ->check(CLI::IsMember({"mass", "sum"}));
  cmd->add_flag_function("--gamma-off", flag("gamma_off"), "disable the staleness penalty in attention");
  cmd->add_flag_function("--stale-loss-off", flag("stale_loss_off"), "disable the staleness loss");
  cmd->add_flag_function("--augment-off", flag("augment_off"), "disable the staleness channel");
  cmd->add_flag_function("--warm-start", flag("warm_start"), "seed the cache with one exact forward");
  cmd->add_flag_function("--add-self-loops", flag("add_self_loops"), "add a self-loop to every node");
  cmd->add_flag_function("--shuffle", flag("shuffle"), "reshuffle the cluster order every epoch");
  cmd->add_option_function<std::size_t>("--epochs", set("epochs"), "training epochs");
  cmd->add_option_function<std::uint64_t>("--seed", set("seed"), "seed for every random choice");
  cmd->add_option_function<double>("--val-fraction", set("val_fraction"), "validation share per class");
  cmd->add_option_function<std::string>("--out", set("out"), "output directory");
  cmd->add_option_function<std::size_t>("--diagnose-every", set("diagnose_every"), "run diagnostics every N epochs");
  cmd->add_option_function<std::size_t>("--checkpoint-every", set("checkpoint_every"), "checkpoint every N epochs");
}

inline RunConfig resolve(const Overrides& ov) {
  json merged = ov.config_path.empty() ? json::object() : read_json_file(ov.config_path);
  if (!merged.is_object()) throw FormatError(ov.config_path + ": expected a JSON object");
  for (auto it = ov.patch.begin(); it != ov.patch.end(); ++it) merged[it.key()] = it.value();
  return RunConfig::from_json(merged);
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App cli{"Mini-batch graph attention training with a staleness-aware embedding cache"};
  cli.require_subcommand(1);
  Overrides train_ov, sweep_ov, diag_ov, synth_ov;

  auto* train = cli.add_subcommand("train", "train one model and write metrics, checkpoints and a summary");
  add_run_options(train, train_ov);

  auto* sweep = cli.add_subcommand("sweep", "train every cell of an ablation grid");
  add_run_options(sweep, sweep_ov);
  std::vector<std::string> grid_components;
  std::vector<double> grid_lambda;
  std::vector<std::size_t> grid_bc;
  bool grid_empty = false;
  sweep->add_option("--grid-components", grid_components, "component codes att/loss/emb, e.g. 111,000")->delimiter(',');
  sweep->add_option("--grid-lambda", grid_lambda, "lambda values")->delimiter(',');
  sweep->add_option("--grid-batch-clusters", grid_bc, "partitions per batch")->delimiter(',');
  sweep->add_flag("--grid-empty", grid_empty, "start from an empty grid instead of the full one");

  auto* diag = cli.add_subcommand("diagnose", "check the approximation bound for a saved model and cache");
  add_run_options(diag, diag_ov);
  std::string checkpoint, cache;
  diag->add_option("--checkpoint", checkpoint, "parameter checkpoint")->required();
  diag->add_option("--cache", cache, "cache snapshot")->required();

  auto* synth = cli.add_subcommand("synth", "write a synthetic block-model dataset");
  add_run_options(synth, synth_ov);

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(resolve(train_ov), out);
    if (sweep->parsed()) {
      SweepGrid grid = grid_empty ? SweepGrid{} : SweepGrid::full();
      if (!grid_components.empty()) grid.components = grid_components;
      if (!grid_lambda.empty()) grid.lambdas = grid_lambda;
      if (!grid_bc.empty()) grid.batch_clusters = grid_bc;
      return cmd_sweep(resolve(sweep_ov), grid, out);
    }
    if (diag->parsed()) return cmd_diagnose(resolve(diag_ov), checkpoint, cache, out);
    if (synth->parsed()) return cmd_synth(resolve(synth_ov), out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitUsage;
}

}  // namespace stalemp::app
