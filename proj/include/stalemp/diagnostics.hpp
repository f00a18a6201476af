#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "stalemp/graph.hpp"
#include "stalemp/history.hpp"
#include "stalemp/layer.hpp"
#include "stalemp/tensor.hpp"

namespace stalemp {

/// s_true[l][i] = ||cache row - exact row|| for cached layers l = 0..L-1.
/// Layer 0 is the raw features and is reported as 0.
inline std::vector<std::vector<double>> measure_staleness(const HistoryStore& store, const std::vector<Tensor>& exact) {
  if (exact.size() < store.num_layers()) throw ShapeError("measure_staleness: missing exact layers");
  std::vector<std::vector<double>> out(store.num_layers(), std::vector<double>(store.num_nodes(), 0.0));
  for (std::size_t l = 1; l < store.num_layers(); ++l) {
    const Tensor& cached = store.embeddings(l);
    require_shape(cached.same_shape(exact[l]), "measure_staleness", cached, exact[l]);
    for (std::size_t i = 0; i < store.num_nodes(); ++i) out[l][i] = row_distance(cached.row(i), exact[l].row(i));
  }
  return out;
}

/// Largest singular value by power iteration on W^T W from a seeded start.
inline double spectral_norm(const Tensor& w, std::uint64_t seed = 0x5eed, double tol = 1e-8,
                            std::size_t max_iter = 10000) {
  if (w.empty()) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> v(w.cols()), u(w.rows()), next(w.cols());
  for (auto& x : v) x = nd(rng);
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (auto& e : x) e /= s;
    return s;
  };
  normalize(v);
  double sigma = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c) * v[c];
      u[r] = s;
    }
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) next[c] += w(r, c) * u[r];
    const double lambda = normalize(next);  // ||W^T W v|| -> sigma^2
    if (lambda == 0.0) return 0.0;
    const double s_new = std::sqrt(lambda);
    v.swap(next);
    if (std::abs(s_new - sigma) <= tol * s_new) return s_new;
    sigma = s_new;
  }
  throw std::runtime_error("spectral_norm: power iteration did not converge in " + std::to_string(max_iter) +
                           " iterations");
}

struct LipschitzReport {
  double L_phi = 1.0;
  double L_task = 1.0;
  double sigma_max = 0.0;
  double gamma_max = 0.0;
  double lambda = 0.0;
  std::vector<double> w_norm;   // ||W^(l)||
  std::vector<double> a_norm;   // ||a^(l)||
  std::vector<double> H_max;    // max input row norm of layer l
  std::vector<double> L_alpha;  // 2 ||a|| ||W|| (1 + gamma_max sigma_max)
  std::vector<double> beta;     // L_phi ||W|| (1 + L_alpha H_max)
  double L = 0.0;               // (L_task + 2 lambda) prod beta
};

/// Per-layer Lipschitz constants of the message-passing update. exact holds
/// the exact embeddings h^(0..L); layer l reads h^(l).
inline LipschitzReport lipschitz_estimates(const Model& model, const std::vector<Tensor>& exact, const Centrality& cent,
                                           double lambda) {
  if (exact.size() < model.num_layers()) throw ShapeError("lipschitz_estimates: missing exact layers");
  LipschitzReport r;
  r.lambda = lambda;
  r.sigma_max = 0.0;
  for (double c : cent.c) r.sigma_max = std::max(r.sigma_max, kernels::sigmoid(c - cent.c_avg));
  r.L = r.L_task + 2.0 * lambda;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto& p = model.layer(l);
    const double gmax = model.spec().gamma_on ? gamma(1, p.beta()) : 0.0;
    r.gamma_max = std::max(r.gamma_max, gmax);
    const double wn = spectral_norm(p.W.value);
    const double an = frobenius_norm(p.a.value);
    double h = 0.0;
    for (std::size_t i = 0; i < exact[l].rows(); ++i) h = std::max(h, row_norm(exact[l].row(i)));
    const double la = 2.0 * an * wn * (1.0 + gmax * r.sigma_max);
    const double b = r.L_phi * wn * (1.0 + la * h);
    r.w_norm.push_back(wn);
    r.a_norm.push_back(an);
    r.H_max.push_back(h);
    r.L_alpha.push_back(la);
    r.beta.push_back(b);
    r.L *= b;
  }
  return r;
}

/// Per-node bound on the final-layer error:
///   sum_{k=1..L} (prod_{l=k+1..L} beta^(l)) |N(i)| ||Ahat_i|| max_{j in N(i)} s_true^(k-1)_j
inline std::vector<double> approximation_bound(const Graph& g, const std::vector<std::vector<double>>& s_true,
                                          const std::vector<double>& beta, const NormalizedAdjacency& adj) {
  const std::size_t L = beta.size();
  if (s_true.size() < L) throw ShapeError("approximation_bound: need staleness for layers 0..L-1");
  std::vector<double> tail(L + 1, 1.0);  // tail[k] = prod_{l>k} beta^(l), 1-indexed layers
  for (std::size_t k = L; k-- > 1;) tail[k] = tail[k + 1] * beta[k];
  std::vector<double> out(g.num_nodes(), 0.0);
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    const auto nb = g.neighbors_of(i);
    if (nb.empty()) continue;
    const double scale = static_cast<double>(nb.size()) * adj.row_norm(g, i);
    double acc = 0.0;
    for (std::size_t k = 1; k <= L; ++k) {
      double mx = 0.0;
      for (NodeId j : nb) mx = std::max(mx, s_true[k - 1][j]);
      acc += tail[k] * scale * mx;
    }
    out[i] = acc;
  }
  return out;
}

/// ||h~^(L)_i - h^(L)_i|| with h~ from forward_batch over the given batches
/// (frozen parameters, no dropout). Nodes outside every batch get NaN.
inline std::vector<double> final_layer_error(const Graph& g, Model& model, const HistoryStore& store,
                                             const Centrality& cent, const std::vector<BatchContext>& batches,
                                             const Tensor& exact_final, int epoch) {
  std::vector<double> err(g.num_nodes(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& ctx : batches) {
    ad::Tape tape;
    ForwardOptions fo;
    fo.epoch = epoch;
    const auto fwd = forward_batch(tape, model, g, ctx, store, cent, fo);
    const Tensor& out = fwd.output.value();
    for (std::size_t r = 0; r < ctx.size(); ++r)
      err[ctx.in_batch[r]] = row_distance(out.row(r), exact_final.row(ctx.in_batch[r]));
  }
  return err;
}

struct ConvergenceReport {
  std::size_t steps = 0;
  double mean_grad_sq = 0.0;
  double rhs = std::numeric_limits<double>::infinity();
  double eta = 0.0;
  double L = 0.0;
  double sigma2 = 0.0;
  double loss0 = 0.0;
  double loss_min = 0.0;
  bool eta_ok = false;  // eta < 2/L
  bool holds = false;   // mean_grad_sq <= rhs (only meaningful when eta_ok)
};

/// Compares the mean squared gradient norm over a run with
///   2 (loss0 - loss_min) / (eta T (2 - eta L)) + eta L sigma2 / (2 - eta L).
/// loss_min stands in for the optimum and sigma2 is a plug-in gradient variance.
inline ConvergenceReport convergence_stats(const std::vector<double>& grad_norm_sq, double L, double eta, double loss0,
                                           double loss_min, double sigma2) {
  ConvergenceReport r;
  r.steps = grad_norm_sq.size();
  r.eta = eta;
  r.L = L;
  r.sigma2 = sigma2;
  r.loss0 = loss0;
  r.loss_min = loss_min;
  for (double g : grad_norm_sq) r.mean_grad_sq += g;
  if (r.steps > 0) r.mean_grad_sq /= static_cast<double>(r.steps);
  r.eta_ok = eta > 0.0 && eta * L < 2.0;
  if (r.eta_ok && r.steps > 0) {
    const double d = 2.0 - eta * L;
    r.rhs = 2.0 * std::max(0.0, loss0 - loss_min) / (eta * static_cast<double>(r.steps) * d) + eta * L * sigma2 / d;
    r.holds = r.mean_grad_sq <= r.rhs;
  }
  return r;
}

struct DiagnosticsReport {
  std::vector<std::vector<double>> s_true;  // [layer][node], layers 0..L-1
  std::vector<double> final_error;
  std::vector<double> bound;
  LipschitzReport lipschitz;
  std::size_t violations = 0;
  /// Absolute slack allowed for floating-point round-off when comparing error to bound.
  double slack = 0.0;
  std::vector<double> mean_s_true;  // per layer
};

inline constexpr double kBoundSlack = 1e-9;

/// Full check of one parameter/cache snapshot.
inline DiagnosticsReport diagnose(const Graph& g, const Tensor& features, Model& model, const HistoryStore& store,
                                  const Centrality& cent, const std::vector<BatchContext>& batches, int epoch,
                                  double lambda, double slack = kBoundSlack) {
  check_model_against_store(model, store);
  DiagnosticsReport rep;
  rep.slack = slack;
  const auto exact = full_batch_forward(g, features, model, epoch);
  rep.s_true = measure_staleness(store, exact);
  for (const auto& layer : rep.s_true) {
    double s = 0.0;
    for (double v : layer) s += v;
    rep.mean_s_true.push_back(layer.empty() ? 0.0 : s / static_cast<double>(layer.size()));
  }
  rep.lipschitz = lipschitz_estimates(model, exact, cent, lambda);
  rep.bound = approximation_bound(g, rep.s_true, rep.lipschitz.beta, symmetric_normalize(g));
  rep.final_error = final_layer_error(g, model, store, cent, batches, exact.back(), epoch);
  for (std::size_t i = 0; i < g.num_nodes(); ++i)
    if (std::isfinite(rep.final_error[i]) && rep.final_error[i] > rep.bound[i] + slack) ++rep.violations;
  return rep;
}

}  // namespace stalemp
