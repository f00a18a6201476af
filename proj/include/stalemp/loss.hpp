#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stalemp/autodiff.hpp"
#include "stalemp/tensor.hpp"

namespace stalemp {

/// Detached final-layer rows from the last time each node was in a batch.
class SnapshotStore {
 public:
  static constexpr std::int64_t kNever = 0;

  SnapshotStore() = default;
  SnapshotStore(std::size_t num_nodes, std::size_t dim) : rows_(num_nodes, dim), epoch_(num_nodes, kNever) {}

  std::size_t num_nodes() const { return rows_.rows(); }
  std::size_t dim() const { return rows_.cols(); }
  bool has(NodeId i) const { return epoch_.at(i) != kNever; }
  std::int64_t epoch_of(NodeId i) const { return epoch_.at(i); }
  std::span<const double> row(NodeId i) const {
    if (i >= num_nodes()) throw std::out_of_range("snapshot: node id out of range");
    return rows_.row(i);
  }

  void update(std::span<const NodeId> nodes, const Tensor& final_rows, std::int64_t epoch) {
    if (final_rows.rows() != nodes.size() || final_rows.cols() != dim())
      throw ShapeError("snapshot_update: expected " + std::to_string(nodes.size()) + "x" + std::to_string(dim()) +
                       " rows, got " + shape_str(final_rows));
    if (epoch < 1) throw std::invalid_argument("snapshot_update: epochs are 1-indexed");
    if (!final_rows.all_finite()) throw std::invalid_argument("snapshot_update: non-finite embedding");
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      const NodeId i = nodes[r];
      if (i >= num_nodes()) throw std::out_of_range("snapshot: node id out of range");
      auto src = final_rows.row(r);
      std::copy(src.begin(), src.end(), rows_.row(i).begin());
      epoch_[i] = epoch;
    }
  }

 private:
  Tensor rows_;
  std::vector<std::int64_t> epoch_;
};

/// sum_i ||current_i - snapshot_i||^2 over batch nodes whose snapshot is from
/// an earlier epoch. Nodes without one contribute 0.
inline ad::Var staleness_loss(const ad::Var& current, std::span<const NodeId> batch, const SnapshotStore& snaps,
                              std::int64_t epoch) {
  const Tensor& cv = current.value();
  if (cv.rows() != batch.size()) throw ShapeError("staleness_loss: one row per batch node required");
  if (cv.cols() != snaps.dim())
    throw ShapeError("staleness_loss: snapshot dim " + std::to_string(snaps.dim()) + " vs current " +
                     std::to_string(cv.cols()));
  Tensor target(cv.rows(), cv.cols());
  std::vector<std::uint32_t> rows;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const NodeId i = batch[r];
    if (!snaps.has(i) || snaps.epoch_of(i) >= epoch) continue;
    auto s = snaps.row(i);
    std::copy(s.begin(), s.end(), target.row(r).begin());
    rows.push_back(static_cast<std::uint32_t>(r));
  }
  return ad::squared_distance_rows(current, std::move(target), std::move(rows));
}

/// task + lambda * stale. With lambda = 0 the task node is returned as is.
inline ad::Var total_loss(const ad::Var& task, const ad::Var& stale, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be >= 0");
  if (lambda == 0.0) return task;
  return ad::add(task, ad::scale(stale, lambda));
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Parameters that received no gradient
/// this step are left untouched.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw std::invalid_argument("adam: lr must be > 0");
    if (cfg_.weight_decay < 0.0) throw std::invalid_argument("adam: weight decay must be >= 0");
    for (auto* p : params_) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      v_.emplace_back(p->value.rows(), p->value.cols());
      steps_.push_back(0);
    }
  }

  const AdamConfig& config() const { return cfg_; }

  void step() {
    bool any = false;
    for (auto* p : params_) any = any || p->has_grad;
    if (!any) throw std::logic_error("adam_step: no parameter has a populated gradient");
    for (std::size_t k = 0; k < params_.size(); ++k) {
      ad::Parameter& p = *params_[k];
      if (!p.has_grad) continue;
      const auto t = ++steps_[k];
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
      auto& w = p.value.values();
      const auto& g = p.grad.values();
      auto& m = m_[k].values();
      auto& v = v_[k].values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        if (cfg_.weight_decay > 0.0) w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
        w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<ad::Parameter*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::vector<std::int64_t> steps_;
};

}  // namespace stalemp
