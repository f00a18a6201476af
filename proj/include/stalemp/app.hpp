#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stalemp/checkpoint.hpp"
#include "stalemp/diagnostics.hpp"
#include "stalemp/graph.hpp"
#include "stalemp/train.hpp"

namespace stalemp::app {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitBoundViolation = 3;

/// Parses "key=value" SBM tokens into a JSON object with typed values.
inline json parse_sbm_tokens(const std::vector<std::string>& tokens) {
  json out = json::object();
  for (const auto& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--synth-sbm: expected key=value, got '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    std::size_t used = 0;
    try {
      if (key == "n" || key == "blocks" || key == "feat_dim" || key == "seed") {
        if (!val.empty() && val[0] == '-') throw std::invalid_argument("negative");
        out[key] = std::stoull(val, &used);
      } else if (key == "p_in" || key == "p_out" || key == "noise") {
        out[key] = std::stod(val, &used);
      } else {
        throw std::invalid_argument("--synth-sbm: unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument& e) {
      if (std::string(e.what()).rfind("--synth-sbm", 0) == 0) throw;
      throw std::invalid_argument("--synth-sbm: bad value for " + key + ": '" + val + "'");
    } catch (const std::out_of_range&) {
      throw std::invalid_argument("--synth-sbm: value out of range for " + key);
    }
    if (used != val.size()) throw std::invalid_argument("--synth-sbm: bad value for " + key + ": '" + val + "'");
  }
  return out;
}

/// Everything a run needs. JSON keys are the flag names with '-' -> '_'.
struct RunConfig {
  TrainConfig train;
  std::string augment = "concat";
  bool gamma_off = false;
  bool stale_loss_off = false;
  bool augment_off = false;

  std::string edge_list, features, labels;
  bool remap_ids = false;
  std::optional<json> synth_sbm;

  std::string out = "run";
  std::size_t diagnose_every = 0;
  std::size_t checkpoint_every = 0;

  /// TrainConfig with the on/off switches applied.
  TrainConfig effective() const {
    TrainConfig t = train;
    t.mode = augment_off ? AugmentMode::none : parse_augment(augment);
    t.gamma_on = !gamma_off;
    if (stale_loss_off) t.lambda = 0.0;
    return t;
  }

  bool uses_synth() const { return synth_sbm.has_value(); }

  SbmParams sbm_params() const {
    SbmParams p;
    p.seed = train.seed;
    if (!synth_sbm) return p;
    const json& j = *synth_sbm;
    p.n = j.value("n", p.n);
    p.blocks = j.value("blocks", p.blocks);
    p.p_in = j.value("p_in", p.p_in);
    p.p_out = j.value("p_out", p.p_out);
    p.feat_dim = j.value("feat_dim", p.feat_dim);
    p.noise = j.value("noise", p.noise);
    p.seed = j.value("seed", p.seed);
    return p;
  }

  void validate() const {
    effective().validate();
    if (uses_synth() && !(edge_list.empty() && features.empty() && labels.empty()))
      throw std::invalid_argument("config: give either --synth-sbm or the three dataset files, not both");
    if (!uses_synth() && (edge_list.empty() || features.empty() || labels.empty()))
      throw std::invalid_argument("config: dataset needs --edge-list, --features and --labels (or --synth-sbm)");
    if (out.empty()) throw std::invalid_argument("config: --out must not be empty");
  }

  json to_json() const {
    json j;
    j["edge_list"] = edge_list;
    j["features"] = features;
    j["labels"] = labels;
    j["remap_ids"] = remap_ids;
    j["synth_sbm"] = synth_sbm ? *synth_sbm : json(nullptr);
    j["clusters"] = train.num_clusters;
    j["batch_clusters"] = train.batch_clusters;
    j["layers"] = train.layers;
    j["hidden"] = train.hidden;
    j["lr"] = train.lr;
    j["weight_decay"] = train.weight_decay;
    j["dropout"] = train.dropout;
    j["lambda"] = train.lambda;
    j["g_thres"] = train.g_thres == kNoThreshold ? json(nullptr) : json(train.g_thres);
    j["augment"] = augment;
    j["gamma_off"] = gamma_off;
    j["stale_loss_off"] = stale_loss_off;
    j["augment_off"] = augment_off;
    j["warm_start"] = train.warm_start;
    j["add_self_loops"] = train.add_self_loops;
    j["epochs"] = train.epochs;
    j["seed"] = train.seed;
    j["shuffle"] = train.shuffle;
    j["mix"] = to_string(train.mix);
    j["val_fraction"] = train.val_fraction;
    j["beta_init"] = train.beta_init;
    j["out"] = out;
    j["diagnose_every"] = diagnose_every;
    j["checkpoint_every"] = checkpoint_every;
    return j;
  }

  static RunConfig from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      try {
        if (k == "edge_list") c.edge_list = v.get<std::string>();
        else if (k == "features") c.features = v.get<std::string>();
        else if (k == "labels") c.labels = v.get<std::string>();
        else if (k == "remap_ids") c.remap_ids = v.get<bool>();
        else if (k == "synth_sbm") {
          if (v.is_null()) c.synth_sbm.reset();
          else if (v.is_object()) c.synth_sbm = v;
          else throw std::invalid_argument("expected an object or null");
        }
        else if (k == "clusters") c.train.num_clusters = v.get<std::size_t>();
        else if (k == "batch_clusters") c.train.batch_clusters = v.get<std::size_t>();
        else if (k == "layers") c.train.layers = v.get<std::size_t>();
        else if (k == "hidden") c.train.hidden = v.get<std::size_t>();
        else if (k == "lr") c.train.lr = v.get<double>();
        else if (k == "weight_decay") c.train.weight_decay = v.get<double>();
        else if (k == "dropout") c.train.dropout = v.get<double>();
        else if (k == "lambda") c.train.lambda = v.get<double>();
        else if (k == "g_thres") c.train.g_thres = v.is_null() ? kNoThreshold : v.get<std::int64_t>();
        else if (k == "augment") c.augment = v.get<std::string>();
        else if (k == "gamma_off") c.gamma_off = v.get<bool>();
        else if (k == "stale_loss_off") c.stale_loss_off = v.get<bool>();
        else if (k == "augment_off") c.augment_off = v.get<bool>();
        else if (k == "warm_start") c.train.warm_start = v.get<bool>();
        else if (k == "add_self_loops") c.train.add_self_loops = v.get<bool>();
        else if (k == "epochs") c.train.epochs = v.get<std::size_t>();
        else if (k == "seed") c.train.seed = v.get<std::uint64_t>();
        else if (k == "shuffle") c.train.shuffle = v.get<bool>();
        else if (k == "mix") c.train.mix = parse_mix(v.get<std::string>());
        else if (k == "val_fraction") c.train.val_fraction = v.get<double>();
        else if (k == "beta_init") c.train.beta_init = v.get<double>();
        else if (k == "out") c.out = v.get<std::string>();
        else if (k == "diagnose_every") c.diagnose_every = v.get<std::size_t>();
        else if (k == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
        else throw std::invalid_argument("unknown key");
      } catch (const json::exception& e) {
        throw std::invalid_argument("config key '" + k + "': " + e.what());
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config key '" + k + "': " + e.what());
      }
    }
    parse_augment(c.augment);
    if (c.synth_sbm)
      for (auto it = c.synth_sbm->begin(); it != c.synth_sbm->end(); ++it) {
        static const std::vector<std::string> keys{"n", "blocks", "p_in", "p_out", "feat_dim", "noise", "seed"};
        if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
          throw std::invalid_argument("config key 'synth_sbm': unknown field '" + it.key() + "'");
        if (!it.value().is_number()) throw std::invalid_argument("config key 'synth_sbm': '" + it.key() + "' must be a number");
      }
    return c;
  }
};

inline json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Dataset load_dataset(const RunConfig& rc) {
  if (rc.uses_synth()) return synth_sbm(rc.sbm_params());
  return load_edge_list(rc.edge_list, rc.features, rc.labels, LoadOptions{rc.remap_ids});
}

inline json to_json(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["task_loss"] = m.task_loss;
  j["stale_loss"] = m.stale_loss;
  j["total_loss"] = m.total_loss;
  j["train_acc"] = m.train_acc;
  j["val_acc"] = m.val_acc;
  j["mean_persistence"] = m.mean_persistence;
  j["max_persistence"] = m.max_persistence;
  j["mean_grad_staleness"] = m.mean_grad_staleness;
  j["wall_ms"] = m.wall_ms;
  return j;
}

inline json to_json(const LipschitzReport& r) {
  json j;
  j["L_phi"] = r.L_phi;
  j["L_task"] = r.L_task;
  j["sigma_max"] = r.sigma_max;
  j["gamma_max"] = r.gamma_max;
  j["lambda"] = r.lambda;
  j["w_norm"] = r.w_norm;
  j["a_norm"] = r.a_norm;
  j["H_max"] = r.H_max;
  j["L_alpha"] = r.L_alpha;
  j["beta"] = r.beta;
  j["L"] = r.L;
  return j;
}

inline json to_json(const ConvergenceReport& r) {
  json j;
  j["steps"] = r.steps;
  j["mean_grad_sq"] = r.mean_grad_sq;
  j["rhs"] = std::isfinite(r.rhs) ? json(r.rhs) : json(nullptr);
  j["eta"] = r.eta;
  j["L"] = r.L;
  j["sigma2"] = r.sigma2;
  j["loss0"] = r.loss0;
  j["loss_min"] = r.loss_min;
  j["eta_below_2_over_L"] = r.eta_ok;
  j["holds"] = r.holds;
  return j;
}

inline json summarize(const DiagnosticsReport& rep) {
  json j;
  double max_err = 0.0, max_bound = 0.0, max_ratio = 0.0;
  for (std::size_t i = 0; i < rep.bound.size(); ++i) {
    if (!std::isfinite(rep.final_error[i])) continue;
    max_err = std::max(max_err, rep.final_error[i]);
    max_bound = std::max(max_bound, rep.bound[i]);
    if (rep.bound[i] > 0.0) max_ratio = std::max(max_ratio, rep.final_error[i] / rep.bound[i]);
  }
  j["nodes"] = rep.bound.size();
  j["violations"] = rep.violations;
  j["slack"] = rep.slack;
  j["max_final_error"] = max_err;
  j["max_bound"] = max_bound;
  j["max_error_to_bound"] = max_ratio;
  j["mean_s_true"] = rep.mean_s_true;
  j["lipschitz"] = to_json(rep.lipschitz);
  return j;
}

/// node,layer,s_true,final_error,bound with one row per node and cached layer.
inline void write_diagnostics_csv(const fs::path& path, const DiagnosticsReport& rep) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "node,layer,s_true,final_error,bound\n" << std::setprecision(17);
  for (std::size_t i = 0; i < rep.bound.size(); ++i)
    for (std::size_t l = 0; l < rep.s_true.size(); ++l)
      os << i << ',' << l << ',' << rep.s_true[l][i] << ',' << rep.final_error[i] << ',' << rep.bound[i] << '\n';
}

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  double best_val_acc = 0.0;
  std::int64_t best_epoch = 0;
  std::size_t bound_violations = 0;
};

inline std::string epoch_tag(std::int64_t e) {
  std::ostringstream s;
  s << "epoch_" << std::setw(4) << std::setfill('0') << e;
  return s.str();
}

/// Runs one training job and writes its artifacts into rc.out.
inline TrainResult run_training(const RunConfig& rc, std::ostream& log) {
  rc.validate();
  const fs::path out(rc.out);
  fs::create_directories(out);
  write_text(out / "config.json", rc.to_json().dump(2) + "\n");

  const Dataset ds = load_dataset(rc);
  Trainer tr(ds, rc.effective());
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot open " + (out / "metrics.jsonl").string());
  std::ofstream diag_log;
  if (rc.diagnose_every > 0) diag_log.open(out / "diagnostics.jsonl");

  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();
  tr.run([&](const EpochMetrics& m) {
    metrics << to_json(m).dump() << '\n';
    if (m.val_acc > res.best_val_acc || res.best_epoch == 0) {
      res.best_val_acc = m.val_acc;
      res.best_epoch = m.epoch;
    }
    log << "epoch " << m.epoch << "  loss " << m.total_loss << "  train " << m.train_acc << "  val " << m.val_acc
        << '\n';
    if (rc.checkpoint_every > 0 && m.epoch % static_cast<std::int64_t>(rc.checkpoint_every) == 0) {
      fs::create_directories(out / "checkpoints");
      io::save_parameters((out / "checkpoints" / (epoch_tag(m.epoch) + ".ckpt")).string(),
                          std::as_const(tr.model()).parameters());
      tr.store().save((out / "checkpoints" / (epoch_tag(m.epoch) + ".hist")).string());
    }
    if (rc.diagnose_every > 0 && m.epoch % static_cast<std::int64_t>(rc.diagnose_every) == 0) {
      const auto rep = diagnose(tr.graph(), tr.features(), tr.model(), tr.store(), tr.centrality(),
                                tr.schedule_batches(), static_cast<int>(m.epoch), tr.config().lambda);
      res.bound_violations += rep.violations;
      diag_log << json{{"epoch", m.epoch}, {"summary", summarize(rep)}}.dump() << '\n';
    }
  });
  res.metrics = tr.history();

  io::save_parameters((out / "params.ckpt").string(), std::as_const(tr.model()).parameters());
  tr.store().save((out / "cache.hist").string());

  const auto exact = full_batch_forward(tr.graph(), tr.features(), tr.model(), static_cast<int>(tr.epoch()));
  const auto lip = lipschitz_estimates(tr.model(), exact, tr.centrality(), tr.config().lambda);
  double loss_min = std::numeric_limits<double>::infinity();
  for (const auto& m : res.metrics) loss_min = std::min(loss_min, m.total_loss);
  const auto conv = convergence_stats(tr.grad_norm_sq(), lip.L, tr.config().lr,
                                      res.metrics.empty() ? 0.0 : res.metrics.front().total_loss,
                                      res.metrics.empty() ? 0.0 : loss_min,
                                      tr.grad_variance().empty() ? 0.0 : tr.grad_variance().back());
  json summary;
  summary["epochs"] = res.metrics.size();
  summary["best_val_acc"] = res.best_val_acc;
  summary["best_epoch"] = res.best_epoch;
  summary["final_train_acc"] = res.metrics.empty() ? 0.0 : res.metrics.back().train_acc;
  summary["final_val_acc"] = res.metrics.empty() ? 0.0 : res.metrics.back().val_acc;
  summary["final_total_loss"] = res.metrics.empty() ? 0.0 : res.metrics.back().total_loss;
  summary["lipschitz"] = to_json(lip);
  summary["convergence"] = to_json(conv);
  if (rc.diagnose_every > 0) summary["bound_violations"] = res.bound_violations;
  summary["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  write_text(out / "summary.json", summary.dump(2) + "\n");
  return res;
}

inline int cmd_train(const RunConfig& rc, std::ostream& log = std::cout) {
  run_training(rc, log);
  return kExitOk;
}

/// Sweep axes. A component code is three 0/1 digits: attention penalty,
/// staleness loss, embedding augmentation.
struct SweepGrid {
  std::vector<std::string> components;
  std::vector<double> lambdas;
  std::vector<std::size_t> batch_clusters;

  static SweepGrid full() {
    return {{"111", "110", "101", "100", "011", "010", "001", "000"}, {0.1, 0.3, 0.5, 0.8}, {5, 10, 20}};
  }
  std::size_t cells() const { return components.size() * lambdas.size() * batch_clusters.size(); }

  json to_json() const { return json{{"components", components}, {"lambda", lambdas}, {"batch_clusters", batch_clusters}}; }
  static SweepGrid from_json(const json& j) {
    SweepGrid g = full();
    if (j.contains("components")) g.components = j.at("components").get<std::vector<std::string>>();
    if (j.contains("lambda")) g.lambdas = j.at("lambda").get<std::vector<double>>();
    if (j.contains("batch_clusters")) g.batch_clusters = j.at("batch_clusters").get<std::vector<std::size_t>>();
    return g;
  }
};

struct SweepCell {
  std::string name;
  bool att = true, loss = true, emb = true;
  double lambda = 0.0;
  std::size_t batch_clusters = 0;
  std::string status = "ok";
  double final_train_acc = 0.0, final_val_acc = 0.0, best_val_acc = 0.0;
};

inline std::string format_real(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

/// One training run per grid cell under rc.out/<cell>/ plus rc.out/sweep.csv.
/// Returns the cells; failed cells carry an "error: ..." status.
inline std::vector<SweepCell> run_sweep(const RunConfig& base, const SweepGrid& grid, std::ostream& log) {
  if (grid.cells() == 0) throw std::invalid_argument("empty sweep");
  for (const auto& c : grid.components)
    if (c.size() != 3 || c.find_first_not_of("01") != std::string::npos)
      throw std::invalid_argument("sweep: component code must be three 0/1 digits, got '" + c + "'");
  const fs::path root(base.out);
  fs::create_directories(root);
  write_text(root / "sweep.json", json{{"base", base.to_json()}, {"grid", grid.to_json()}}.dump(2) + "\n");

  std::vector<SweepCell> cells;
  std::ostringstream quiet;
  for (const auto& comp : grid.components)
    for (double lam : grid.lambdas)
      for (std::size_t bc : grid.batch_clusters) {
        SweepCell cell;
        cell.att = comp[0] == '1';
        cell.loss = comp[1] == '1';
        cell.emb = comp[2] == '1';
        cell.lambda = lam;
        cell.batch_clusters = bc;
        cell.name = "att" + std::string(1, comp[0]) + "_loss" + comp[1] + "_emb" + comp[2] + "_lambda" +
                    format_real(lam) + "_bc" + std::to_string(bc);
        RunConfig rc = base;
        rc.gamma_off = !cell.att;
        rc.stale_loss_off = !cell.loss;
        rc.augment_off = !cell.emb;
        if (cell.emb && rc.augment == "none") rc.augment = "concat";
        rc.train.lambda = lam;
        rc.train.batch_clusters = bc;
        rc.out = (root / cell.name).string();
        try {
          const auto r = run_training(rc, quiet);
          cell.final_train_acc = r.metrics.empty() ? 0.0 : r.metrics.back().train_acc;
          cell.final_val_acc = r.metrics.empty() ? 0.0 : r.metrics.back().val_acc;
          cell.best_val_acc = r.best_val_acc;
        } catch (const std::exception& e) {
          cell.status = std::string("error: ") + e.what();
        }
        log << cell.name << "  " << cell.status << "  val " << cell.final_val_acc << '\n';
        cells.push_back(cell);
      }

  std::ofstream csv(root / "sweep.csv");
  if (!csv) throw std::runtime_error("cannot open " + (root / "sweep.csv").string());
  csv << "cell,att,loss,emb,lambda,batch_clusters,final_train_acc,final_val_acc,best_val_acc,status\n"
      << std::setprecision(17);
  for (const auto& c : cells) {
    std::string status = c.status;
    for (auto& ch : status)
      if (ch == ',' || ch == '\n') ch = ';';
    csv << c.name << ',' << c.att << ',' << c.loss << ',' << c.emb << ',' << format_real(c.lambda) << ',' << c.batch_clusters << ','
        << c.final_train_acc << ',' << c.final_val_acc << ',' << c.best_val_acc << ',' << status << '\n';
  }
  return cells;
}

inline int cmd_sweep(const RunConfig& base, const SweepGrid& grid, std::ostream& log = std::cout) {
  const auto cells = run_sweep(base, grid, log);
  std::size_t failed = 0;
  for (const auto& c : cells) failed += c.status != "ok";
  if (failed > 0) {
    log << failed << " of " << cells.size() << " cells failed\n";
    return kExitError;
  }
  return kExitOk;
}

/// Recomputes diagnostics for a saved parameter checkpoint and cache snapshot.
/// Writes diagnostics.csv and diagnostics.json into rc.out.
inline int cmd_diagnose(const RunConfig& rc, const std::string& checkpoint, const std::string& cache,
                        std::ostream& log = std::cout) {
  rc.validate();
  if (!fs::exists(checkpoint)) throw std::runtime_error("missing checkpoint " + checkpoint);
  if (!fs::exists(cache)) throw std::runtime_error("missing cache snapshot " + cache);
  const Dataset ds = load_dataset(rc);
  TrainConfig cfg = rc.effective();
  cfg.warm_start = false;
  Trainer tr(ds, cfg);
  io::assign_parameters(io::load_parameters(checkpoint), tr.model().parameters());
  HistoryStore store = HistoryStore::load(cache);
  if (store.num_nodes() != tr.graph().num_nodes())
    throw FormatError(cache + ": snapshot has " + std::to_string(store.num_nodes()) + " nodes, dataset has " +
                      std::to_string(tr.graph().num_nodes()));
  try {
    check_model_against_store(tr.model(), store);
  } catch (const ShapeError& e) {
    throw FormatError(cache + ": " + e.what());
  }
  tr.store() = std::move(store);
  const int epoch = static_cast<int>(std::max<std::int64_t>(1, tr.store().epoch()));
  const auto rep = diagnose(tr.graph(), tr.features(), tr.model(), tr.store(), tr.centrality(), tr.schedule_batches(),
                            epoch, cfg.lambda);

  const fs::path out(rc.out);
  fs::create_directories(out);
  write_diagnostics_csv(out / "diagnostics.csv", rep);
  json j = summarize(rep);
  j["epoch"] = epoch;
  j["lr"] = cfg.lr;
  j["eta_below_2_over_L"] = cfg.lr * rep.lipschitz.L < 2.0;
  write_text(out / "diagnostics.json", j.dump(2) + "\n");
  log << "nodes " << rep.bound.size() << "  violations " << rep.violations << '\n';
  return rep.violations == 0 ? kExitOk : kExitBoundViolation;
}

/// Writes edges.tsv, features.bin and labels.txt for an SBM draw into rc.out.
inline int cmd_synth(const RunConfig& rc, std::ostream& log = std::cout) {
  const Dataset ds = synth_sbm(rc.sbm_params());
  const fs::path out(rc.out);
  fs::create_directories(out);
  write_edge_list((out / "edges.tsv").string(), ds.graph);
  write_features((out / "features.bin").string(), ds.features);
  write_labels((out / "labels.txt").string(), ds.labels);
  log << "wrote " << ds.graph.num_nodes() << " nodes, " << ds.graph.undirected_edges().size() << " edges to "
      << out.string() << '\n';
  return kExitOk;
}

}  // namespace stalemp::app
