#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stalemp/autodiff.hpp"
#include "stalemp/graph.hpp"
#include "stalemp/history.hpp"
#include "stalemp/layer.hpp"
#include "stalemp/loss.hpp"

namespace stalemp {

struct TrainConfig {
  double lambda = 0.5;
  double lr = 0.001;
  double weight_decay = 0.0;
  double dropout = 0.1;
  std::size_t layers = 2;
  std::size_t hidden = 16;
  std::size_t epochs = 50;
  std::size_t num_clusters = 16;
  std::size_t batch_clusters = 2;
  std::int64_t g_thres = kNoThreshold;
  AugmentMode mode = AugmentMode::concat;
  bool gamma_on = true;
  MixMode mix = MixMode::mass;
  bool shuffle = false;
  bool warm_start = false;
  bool add_self_loops = false;
  double val_fraction = 0.2;
  double beta_init = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("config: lambda must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("config: dropout must lie in [0,1)");
    if (layers < 1) throw std::invalid_argument("config: layers must be >= 1");
    if (hidden < 1) throw std::invalid_argument("config: hidden must be >= 1");
    if (num_clusters < 1) throw std::invalid_argument("config: clusters must be >= 1");
    if (batch_clusters < 1 || batch_clusters > num_clusters)
      throw std::invalid_argument("config: batch_clusters must lie in [1, clusters]");
    if (g_thres < 0) throw std::invalid_argument("config: g_thres must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("config: val_fraction must lie in [0,1)");
  }
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double task_loss = 0.0;
  double stale_loss = 0.0;
  double total_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double mean_persistence = 0.0;
  std::int64_t max_persistence = 0;
  double mean_grad_staleness = 0.0;
  double wall_ms = 0.0;
};

struct Split {
  std::vector<NodeId> train;
  std::vector<NodeId> val;
  std::vector<char> is_train;
};

/// Holds out val_fraction of each class (rounded) for validation, keeping at
/// least one training node per class.
inline Split split_per_class(const LabelVector& labels, double val_fraction, std::uint64_t seed) {
  int num_classes = 0;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("split: labels must be >= 0");
    num_classes = std::max(num_classes, y + 1);
  }
  std::vector<std::vector<NodeId>> by_class(static_cast<std::size_t>(num_classes));
  for (NodeId i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::mt19937_64 rng(seed);
  Split s;
  s.is_train.assign(labels.size(), 0);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    auto nv = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(members.size())));
    if (nv >= members.size() && !members.empty()) nv = members.size() - 1;
    for (std::size_t r = 0; r < members.size(); ++r) {
      if (r < nv) {
        s.val.push_back(members[r]);
      } else {
        s.train.push_back(members[r]);
        s.is_train[members[r]] = 1;
      }
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline double accuracy(const std::vector<int>& pred, const LabelVector& labels, std::span<const NodeId> nodes) {
  if (nodes.empty()) return 0.0;
  std::size_t hit = 0;
  for (NodeId i : nodes) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(nodes.size());
}

/// What one optimizer step saw, passed to the step hook before parameters move.
struct StepInfo {
  std::int64_t epoch = 0;
  std::int64_t iteration = 0;
  std::size_t step_in_epoch = 0;
  const BatchContext* batch = nullptr;
  const BatchForward* forward = nullptr;
  double task_loss = 0.0;
  double stale_loss = 0.0;
  double grad_norm_sq = 0.0;
};

class Trainer;
using StepHook = std::function<void(const Trainer&, const StepInfo&)>;

/// Cluster-batched training loop with a historical-embedding cache.
///
/// Per step: forward_batch -> task loss on labeled batch nodes -> staleness
/// loss -> total -> backward -> record grad norms -> push batch hiddens ->
/// snapshot final rows -> hook -> Adam.
class Trainer {
 public:
  Trainer(const Dataset& data, TrainConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    if (data.features.rows() != data.graph.num_nodes() || data.labels.size() != data.graph.num_nodes())
      throw ShapeError("trainer: features, labels and graph disagree on node count");
    graph_ = cfg_.add_self_loops ? data.graph.with_self_loops() : data.graph;
    features_ = data.features;
    labels_ = data.labels;
    if (cfg_.num_clusters > graph_.num_nodes()) throw std::invalid_argument("config: more clusters than nodes");

    ModelSpec spec;
    spec.in_dim = features_.cols();
    spec.hidden = cfg_.hidden;
    spec.num_classes = std::max<std::size_t>(data.num_classes(), 1);
    spec.layers = cfg_.layers;
    spec.mode = cfg_.mode;
    spec.gamma_on = cfg_.gamma_on;
    spec.mix = cfg_.mix;
    spec.beta_init = cfg_.beta_init;

    // One stream per consumer.
    std::seed_seq seq{cfg_.seed};
    std::vector<std::uint64_t> seeds(5);
    {
      std::vector<std::uint32_t> raw(10);
      seq.generate(raw.begin(), raw.end());
      for (std::size_t k = 0; k < 5; ++k) seeds[k] = (std::uint64_t{raw[2 * k]} << 32) | raw[2 * k + 1];
    }
    model_ = Model::create(spec, seeds[0]);
    partition_ = partition_greedy(graph_, cfg_.num_clusters, seeds[1]);
    split_ = split_per_class(labels_, cfg_.val_fraction, seeds[2]);
    dropout_rng_.seed(seeds[3]);
    schedule_rng_.seed(seeds[4]);

    centrality_ = degree_centrality(graph_);
    store_ = HistoryStore::init(features_, model_.cache_dims(), cfg_.g_thres);
    snaps_ = SnapshotStore(graph_.num_nodes(), spec.num_classes);
    opt_ = Adam(model_.parameters(), AdamConfig{cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay});

    cluster_order_.resize(cfg_.num_clusters);
    std::iota(cluster_order_.begin(), cluster_order_.end(), 0u);
    std::shuffle(cluster_order_.begin(), cluster_order_.end(), schedule_rng_);
    if (cfg_.warm_start) warm_start();
  }

  // The optimizer holds pointers into model_.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  const Graph& graph() const { return graph_; }
  const Tensor& features() const { return features_; }
  const LabelVector& labels() const { return labels_; }
  const Split& split() const { return split_; }
  const Partition& partition() const { return partition_; }
  const Centrality& centrality() const { return centrality_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  HistoryStore& store() { return store_; }
  const HistoryStore& store() const { return store_; }
  const SnapshotStore& snapshots() const { return snaps_; }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t iteration() const { return iteration_; }
  const std::vector<EpochMetrics>& history() const { return metrics_; }
  /// ||grad||^2 of the total loss at every step so far.
  const std::vector<double>& grad_norm_sq() const { return grad_norm_sq_; }
  /// Per-epoch mean of ||g - mean g||^2 across that epoch's steps.
  const std::vector<double>& grad_variance() const { return grad_variance_; }

  void set_step_hook(StepHook hook) { hook_ = std::move(hook); }

  /// Batches (as cluster-id lists) of the current cluster order.
  std::vector<std::vector<std::uint32_t>> schedule() const {
    std::vector<std::vector<std::uint32_t>> out;
    for (std::size_t b = 0; b < cluster_order_.size(); b += cfg_.batch_clusters) {
      const std::size_t e = std::min(cluster_order_.size(), b + cfg_.batch_clusters);
      out.emplace_back(cluster_order_.begin() + static_cast<std::ptrdiff_t>(b),
                       cluster_order_.begin() + static_cast<std::ptrdiff_t>(e));
    }
    return out;
  }

  std::vector<BatchContext> schedule_batches() const {
    std::vector<BatchContext> out;
    for (const auto& ids : schedule()) out.push_back(make_batch(partition_, ids, graph_));
    return out;
  }

  /// Seeds cache layers 1..L-1 with one exact full-graph forward.
  void warm_start() {
    const auto h = full_batch_forward(graph_, features_, model_, 1);
    std::vector<NodeId> all(graph_.num_nodes());
    std::iota(all.begin(), all.end(), 0u);
    for (std::size_t k = 1; k < store_.num_layers(); ++k) store_.push(k, all, h[k], iteration_);
  }

  EpochMetrics train_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    ++epoch_;
    store_.set_epoch(epoch_);
    EpochMetrics m;
    m.epoch = epoch_;
    const std::size_t probe = std::min<std::size_t>(1, store_.num_layers() - 1);
    double persist_sum = 0.0;
    std::size_t persist_count = 0, steps = 0;
    std::vector<std::vector<double>> grads;

    if (cfg_.shuffle && epoch_ > 1) std::shuffle(cluster_order_.begin(), cluster_order_.end(), schedule_rng_);
    const auto schedule = this->schedule();
    for (std::size_t b = 0; b < schedule.size(); ++b) {
      const BatchContext ctx = make_batch(partition_, schedule[b], graph_);
      ++iteration_;
      store_.set_iteration(iteration_);
      for (NodeId j : ctx.frontier) {
        const auto p = store_.persistence(probe, j);
        persist_sum += static_cast<double>(p);
        m.max_persistence = std::max(m.max_persistence, p);
        ++persist_count;
      }

      ad::Tape tape;
      ForwardOptions fo;
      fo.epoch = static_cast<int>(epoch_);
      fo.training = true;
      fo.dropout = cfg_.dropout;
      fo.rng = &dropout_rng_;
      const BatchForward fwd = forward_batch(tape, model_, graph_, ctx, store_, centrality_, fo);

      std::vector<std::uint32_t> mask;
      LabelVector batch_labels(ctx.size());
      for (std::size_t r = 0; r < ctx.size(); ++r) {
        batch_labels[r] = labels_[ctx.in_batch[r]];
        if (split_.is_train[ctx.in_batch[r]]) mask.push_back(static_cast<std::uint32_t>(r));
      }
      const ad::Var task =
          mask.empty() ? tape.constant(Tensor::scalar(0.0)) : ad::cross_entropy(fwd.output, batch_labels, mask);
      const ad::Var stale = staleness_loss(fwd.output, ctx.in_batch, snaps_, epoch_);
      const ad::Var total = total_loss(task, stale, cfg_.lambda);
      tape.backward(total);

      for (std::size_t k = 1; k < store_.num_layers(); ++k)
        store_.record_grad_norms(k, ctx.in_batch, fwd.hidden[k].grad());
      for (std::size_t k = 1; k < store_.num_layers(); ++k)
        store_.push(k, ctx.in_batch, fwd.hidden[k].value(), iteration_);
      snaps_.update(ctx.in_batch, fwd.output.value(), epoch_);

      std::vector<double> g;
      for (const auto* p : model_.parameters())
        g.insert(g.end(), p->grad.values().begin(), p->grad.values().end());
      double gsq = 0.0;
      for (double v : g) gsq += v * v;
      grad_norm_sq_.push_back(gsq);
      grads.push_back(std::move(g));

      const double task_v = task.value()[0], stale_v = stale.value()[0];
      m.task_loss += task_v;
      m.stale_loss += stale_v;
      m.total_loss += total.value()[0];
      ++steps;

      if (hook_) {
        StepInfo info{epoch_, iteration_, b, &ctx, &fwd, task_v, stale_v, gsq};
        hook_(*this, info);
      }
      const auto params = model_.parameters();
      if (std::any_of(params.begin(), params.end(), [](const ad::Parameter* p) { return p->has_grad; })) opt_.step();
    }

    const double ns = static_cast<double>(std::max<std::size_t>(steps, 1));
    m.task_loss /= ns;
    m.stale_loss /= ns;
    m.total_loss /= ns;
    m.mean_persistence = persist_count ? persist_sum / static_cast<double>(persist_count) : 0.0;
    if (probe > 0) {
      const auto& s = store_.grad_norms(probe);
      m.mean_grad_staleness = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    }
    grad_variance_.push_back(variance_of(grads));

    const auto pred = argmax_rows(full_batch_forward(graph_, features_, model_, static_cast<int>(epoch_)).back());
    m.train_acc = accuracy(pred, labels_, split_.train);
    m.val_acc = accuracy(pred, labels_, split_.val);
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics_.push_back(m);
    return m;
  }

  std::vector<EpochMetrics> run(const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    for (std::size_t e = 0; e < cfg_.epochs; ++e) {
      const auto m = train_epoch();
      if (on_epoch) on_epoch(m);
    }
    return metrics_;
  }

 private:
  static double variance_of(const std::vector<std::vector<double>>& grads) {
    if (grads.size() < 2) return 0.0;
    std::vector<double> mean(grads[0].size(), 0.0);
    for (const auto& g : grads)
      for (std::size_t k = 0; k < g.size(); ++k) mean[k] += g[k];
    for (auto& v : mean) v /= static_cast<double>(grads.size());
    double acc = 0.0;
    for (const auto& g : grads)
      for (std::size_t k = 0; k < g.size(); ++k) acc += (g[k] - mean[k]) * (g[k] - mean[k]);
    return acc / static_cast<double>(grads.size());
  }

  TrainConfig cfg_;
  Graph graph_;
  Tensor features_;
  LabelVector labels_;
  Model model_;
  Partition partition_;
  Split split_;
  Centrality centrality_;
  HistoryStore store_;
  SnapshotStore snaps_;
  Adam opt_;
  std::mt19937_64 dropout_rng_;
  std::mt19937_64 schedule_rng_;
  std::vector<std::uint32_t> cluster_order_;
  std::int64_t epoch_ = 0;
  std::int64_t iteration_ = 0;
  std::vector<EpochMetrics> metrics_;
  std::vector<double> grad_norm_sq_;
  std::vector<double> grad_variance_;
  StepHook hook_;
};

}  // namespace stalemp
