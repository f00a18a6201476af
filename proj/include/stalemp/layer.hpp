#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stalemp/autodiff.hpp"
#include "stalemp/graph.hpp"
#include "stalemp/history.hpp"
#include "stalemp/tensor.hpp"

namespace stalemp {

/// How a staleness channel is attached to historical rows.
enum class AugmentMode { none, concat, summation };

/// How the in-batch and out-of-batch aggregates are combined.
///   mass: each side is weighted by its share of the total exp-score mass, so
///         the two softmaxes compose into one softmax over N(i).
///   sum:  plain sum of the two aggregates.
enum class MixMode { mass, sum };

inline std::string to_string(AugmentMode m) {
  switch (m) {
    case AugmentMode::none: return "none";
    case AugmentMode::concat: return "concat";
    case AugmentMode::summation: return "sum";
  }
  return "none";
}

inline AugmentMode parse_augment(const std::string& s) {
  if (s == "none") return AugmentMode::none;
  if (s == "concat" || s == "cat") return AugmentMode::concat;
  if (s == "sum" || s == "summation") return AugmentMode::summation;
  throw std::invalid_argument("unknown augment mode '" + s + "' (expected none|concat|sum)");
}

inline std::string to_string(MixMode m) { return m == MixMode::mass ? "mass" : "sum"; }

inline MixMode parse_mix(const std::string& s) {
  if (s == "mass") return MixMode::mass;
  if (s == "sum") return MixMode::sum;
  throw std::invalid_argument("unknown mix mode '" + s + "' (expected mass|sum)");
}

/// gamma(t) = beta / t with 1-indexed epochs.
inline double gamma(int t, double beta) {
  if (t < 1) throw std::invalid_argument("gamma: epoch must be >= 1");
  return beta / static_cast<double>(t);
}

/// gamma_t * s_j * sigmoid(c_j - c_avg)
inline double staleness_penalty(double s_j, double c_j, double c_avg, double gamma_t) {
  if (!(s_j >= 0.0)) throw std::invalid_argument("staleness_penalty: s_j must be nonnegative");
  return gamma_t * s_j * kernels::sigmoid(c_j - c_avg);
}

/// Learnables of one layer. beta is stored pre-softplus so it stays >= 0.
struct LayerParams {
  ad::Parameter W;         // dim_in x dim_out
  ad::Parameter a;         // 2*dim_out x 1
  ad::Parameter beta_raw;  // 1 x 1
  std::optional<ad::Parameter> W_s;  // 1 x base_dim_in, summation mode only

  std::size_t dim_in() const { return W.value.rows(); }
  std::size_t dim_out() const { return W.value.cols(); }
  double beta() const { return kernels::softplus(beta_raw.value[0]); }

  /// Raw value whose softplus equals beta.
  static double raw_for_beta(double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
    return beta > 30.0 ? beta : std::log(std::expm1(beta));
  }
};

struct ModelSpec {
  std::size_t in_dim = 0;
  std::size_t hidden = 16;
  std::size_t num_classes = 2;
  std::size_t layers = 2;
  AugmentMode mode = AugmentMode::none;
  bool gamma_on = true;
  MixMode mix = MixMode::mass;
  double beta_init = 1.0;
};

/// Stack of staleness-aware attention layers. Layer k maps h^(k) to h^(k+1);
/// the last layer emits class logits.
class Model {
 public:
  Model() = default;

  static Model create(const ModelSpec& spec, std::uint64_t seed) {
    if (spec.layers < 1) throw std::invalid_argument("model: need at least one layer");
    if (spec.in_dim < 1 || spec.num_classes < 1 || (spec.layers > 1 && spec.hidden < 1))
      throw std::invalid_argument("model: dimensions must be positive");
    Model m;
    m.spec_ = spec;
    std::mt19937_64 rng(seed);
    auto glorot = [&rng](std::size_t r, std::size_t c) {
      const double lim = std::sqrt(6.0 / static_cast<double>(r + c));
      std::uniform_real_distribution<double> u(-lim, lim);
      Tensor t(r, c);
      for (auto& v : t.values()) v = u(rng);
      return t;
    };
    const auto dims = m.layer_dims();
    for (std::size_t k = 0; k < spec.layers; ++k) {
      const std::string pre = "layer" + std::to_string(k) + ".";
      const std::size_t din = m.input_dim(k), dout = dims[k + 1];
      LayerParams p{ad::Parameter(pre + "W", glorot(din, dout)), ad::Parameter(pre + "a", glorot(2 * dout, 1)),
                    ad::Parameter(pre + "beta", Tensor::scalar(LayerParams::raw_for_beta(spec.beta_init))),
                    std::nullopt};
      if (spec.mode == AugmentMode::summation) p.W_s = ad::Parameter(pre + "W_s", glorot(1, dims[k]));
      m.layers_.push_back(std::move(p));
    }
    return m;
  }

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return layers_.size(); }
  LayerParams& layer(std::size_t k) { return layers_.at(k); }
  const LayerParams& layer(std::size_t k) const { return layers_.at(k); }

  /// Un-augmented embedding dims h^(0..L).
  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> d{spec_.in_dim};
    for (std::size_t k = 1; k < spec_.layers; ++k) d.push_back(spec_.hidden);
    d.push_back(spec_.num_classes);
    return d;
  }
  /// Dims of the cached layers 0..L-1.
  std::vector<std::size_t> cache_dims() const {
    auto d = layer_dims();
    d.pop_back();
    return d;
  }
  /// Input width of layer k after augmentation.
  std::size_t input_dim(std::size_t k) const {
    return layer_dims()[k] + (spec_.mode == AugmentMode::concat ? 1 : 0);
  }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& p : layers_) {
      out.push_back(&p.W);
      out.push_back(&p.a);
      out.push_back(&p.beta_raw);
      if (p.W_s) out.push_back(&*p.W_s);
    }
    return out;
  }
  std::vector<const ad::Parameter*> parameters() const {
    std::vector<const ad::Parameter*> out;
    for (auto* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
    return out;
  }

 private:
  ModelSpec spec_;
  std::vector<LayerParams> layers_;
};

// ---------------------------------------------------------------------------
// Taped building blocks shared by the batch forward and the single-node helpers
// ---------------------------------------------------------------------------

namespace detail {

struct LayerVars {
  ad::Var W, a_src, a_dst;
};

inline LayerVars layer_vars(ad::Tape& tape, LayerParams& p) {
  const std::size_t f = p.dim_out();
  if (p.a.value.rows() != 2 * f || p.a.value.cols() != 1) throw ShapeError("layer: attention vector must be 2*dim_out x 1");
  ad::Var a = tape.param(p.a);
  return {tape.param(p.W), ad::slice_rows(a, 0, f), ad::slice_rows(a, f, 2 * f)};
}

/// Taped gamma(t) = softplus(beta_raw) / t.
inline ad::Var gamma_var(ad::Tape& tape, LayerParams& p, int t) {
  if (t < 1) throw std::invalid_argument("gamma: epoch must be >= 1");
  return ad::scale(ad::softplus(tape.param(p.beta_raw)), 1.0 / static_cast<double>(t));
}

/// LeakyReLU(src[tgt[e]] + dst[nbr[e]]) per edge e.
inline ad::Var raw_scores(const ad::Var& src, const ad::Var& dst, std::vector<std::uint32_t> tgt,
                          std::vector<std::uint32_t> nbr) {
  return ad::leaky_relu(ad::add(ad::gather_rows(src, std::move(tgt)), ad::gather_rows(dst, std::move(nbr))));
}

inline std::vector<std::uint32_t> expand_targets(const std::vector<std::size_t>& offsets) {
  std::vector<std::uint32_t> t;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    for (std::size_t e = offsets[s]; e < offsets[s + 1]; ++e) t.push_back(static_cast<std::uint32_t>(s));
  return t;
}

/// Applies the augmentation to historical rows (taped). In-batch rows use
/// augment_live, which in concat mode appends a zero column.
inline ad::Var augment_history(ad::Tape& tape, const ad::Var& rows, std::span<const double> s, AugmentMode mode,
                               LayerParams& p) {
  switch (mode) {
    case AugmentMode::none: return rows;
    case AugmentMode::concat: {
      Tensor ch(rows.rows(), 1);
      for (std::size_t r = 0; r < ch.rows(); ++r) ch[r] = log_staleness(s[r]);
      return ad::concat_cols(rows, tape.constant(std::move(ch)));
    }
    case AugmentMode::summation: {
      if (!p.W_s) throw std::invalid_argument("augment: summation mode requires W_s");
      if (p.W_s->value.cols() != rows.cols()) throw ShapeError("augment: W_s width must equal the row dim");
      Tensor sc(rows.rows(), 1);
      for (std::size_t r = 0; r < sc.rows(); ++r) sc[r] = s[r];
      return ad::add(rows, ad::elu(ad::matmul(tape.constant(std::move(sc)), tape.param(*p.W_s))));
    }
  }
  return rows;
}

inline ad::Var augment_live(ad::Tape& tape, const ad::Var& rows, AugmentMode mode) {
  if (mode != AugmentMode::concat) return rows;
  return ad::concat_cols(rows, tape.constant(Tensor(rows.rows(), 1)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single-target helpers (value level)
// ---------------------------------------------------------------------------

/// Out-of-batch attention of one target over its retained frontier rows:
/// softmax_j( LeakyReLU(a^T [W h_i || W hbar_j]) - gamma(t) s_j sigmoid(c_j - c_avg) ).
/// Rows are used as given (already augmented, if augmentation applies).
inline std::vector<double> attention_out(std::span<const double> h_i, const Tensor& frontier_rows,
                                         std::span<const double> s, std::span<const double> c, double c_avg, int t,
                                         LayerParams& p, bool gamma_on = true) {
  if (h_i.size() != p.dim_in() || (frontier_rows.rows() > 0 && frontier_rows.cols() != p.dim_in()))
    throw ShapeError("attention_out: row width does not match W");
  if (s.size() != frontier_rows.rows() || c.size() != frontier_rows.rows())
    throw ShapeError("attention_out: staleness/centrality must align with rows");
  const std::size_t k = frontier_rows.rows();
  if (k == 0) return {};
  ad::Tape tape;
  auto lv = detail::layer_vars(tape, p);
  auto zi = ad::matmul(tape.constant(Tensor(1, h_i.size(), std::vector<double>(h_i.begin(), h_i.end()))), lv.W);
  auto zf = ad::matmul(tape.constant(frontier_rows), lv.W);
  std::vector<std::uint32_t> nbr(k);
  for (std::size_t j = 0; j < k; ++j) nbr[j] = static_cast<std::uint32_t>(j);
  auto scores =
      detail::raw_scores(ad::matmul(zi, lv.a_src), ad::matmul(zf, lv.a_dst), std::vector<std::uint32_t>(k, 0), nbr);
  if (gamma_on) {
    Tensor pen(k, 1);
    for (std::size_t j = 0; j < k; ++j) pen[j] = staleness_penalty(s[j], c[j], c_avg, 1.0);
    scores = ad::sub(scores, ad::scale_by(tape.constant(std::move(pen)), detail::gamma_var(tape, p, t)));
  }
  return ad::segmented_softmax(scores, {0, k}).value().values();
}

/// In-batch attention: the out-of-batch form with zero staleness.
inline std::vector<double> attention_in(std::span<const double> h_i, const Tensor& in_rows, LayerParams& p) {
  const std::vector<double> zeros(in_rows.rows(), 0.0);
  return attention_out(h_i, in_rows, zeros, zeros, 0.0, 1, p, true);
}

/// phi(sum_j alpha_in[j] W h_j + sum_j alpha_out[j] W hbar_j), phi = ELU. With
/// in_mass set, the two sums are weighted by in_mass and 1 - in_mass.
inline std::vector<double> aggregate(std::span<const double> alpha_in, std::span<const double> alpha_out,
                                     const Tensor& in_rows, const Tensor& frontier_rows, const LayerParams& p,
                                     std::optional<double> in_mass = std::nullopt) {
  if (alpha_in.size() != in_rows.rows() || alpha_out.size() != frontier_rows.rows())
    throw ShapeError("aggregate: coefficients must align with rows");
  const std::size_t f = p.dim_out();
  std::vector<double> acc_in(f, 0.0), acc_out(f, 0.0);
  auto accumulate = [&](std::span<const double> alpha, const Tensor& rows, std::vector<double>& acc) {
    if (rows.rows() == 0) return;
    const Tensor z = kernels::matmul(rows, p.W.value);
    for (std::size_t j = 0; j < rows.rows(); ++j)
      for (std::size_t c = 0; c < f; ++c) acc[c] += alpha[j] * z(j, c);
  };
  accumulate(alpha_in, in_rows, acc_in);
  accumulate(alpha_out, frontier_rows, acc_out);
  std::vector<double> out(f);
  const double wi = in_mass.value_or(1.0), wo = in_mass ? 1.0 - *in_mass : 1.0;
  for (std::size_t c = 0; c < f; ++c) out[c] = kernels::elu(wi * acc_in[c] + wo * acc_out[c]);
  return out;
}

/// Value-level augmentation of historical rows.
inline Tensor augment(const Tensor& rows, std::span<const double> s, AugmentMode mode, LayerParams& p) {
  if (s.size() != rows.rows()) throw ShapeError("augment: staleness must align with rows");
  ad::Tape tape;
  return detail::augment_history(tape, tape.constant(rows), s, mode, p).value();
}

// ---------------------------------------------------------------------------
// Batched forward
// ---------------------------------------------------------------------------

namespace detail {

/// Out-of-batch edges of one layer, already filtered by eviction.
struct OutEdges {
  ad::Var rows;  // augmented historical rows
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> targets;
  std::vector<std::uint32_t> sources;
  Tensor penalty;  // per edge s_j * sigmoid(c_j - c_avg), before gamma
};

struct LayerResult {
  ad::Var h;
  ad::Var alpha_in;
  ad::Var alpha_out;
};

/// One attention layer over live rows x. Edges of target t: in-batch sources
/// in_src[in_offsets[t]..in_offsets[t+1]) index rows of x; out-of-batch
/// sources index out->rows.
inline LayerResult layer_step(ad::Tape& tape, LayerParams& p, const ModelSpec& spec, int epoch, const ad::Var& x,
                              const std::vector<std::size_t>& in_offsets, const std::vector<std::uint32_t>& in_src,
                              const std::vector<std::uint32_t>& in_targets, const OutEdges* out) {
  LayerResult r;
  auto lv = layer_vars(tape, p);
  ad::Var zb = ad::matmul(augment_live(tape, x, spec.mode), lv.W);
  ad::Var src = ad::matmul(zb, lv.a_src);
  ad::Var scores_in = raw_scores(src, ad::matmul(zb, lv.a_dst), in_targets, in_src);
  r.alpha_in = ad::segmented_softmax(scores_in, in_offsets);
  ad::Var agg = ad::segment_weighted_sum(r.alpha_in, in_src, zb, in_offsets);

  if (out != nullptr && !out->sources.empty()) {
    ad::Var zf = ad::matmul(out->rows, lv.W);
    ad::Var scores_out = raw_scores(src, ad::matmul(zf, lv.a_dst), out->targets, out->sources);
    if (spec.gamma_on) scores_out = ad::sub(scores_out, ad::scale_by(tape.constant(out->penalty), gamma_var(tape, p, epoch)));
    r.alpha_out = ad::segmented_softmax(scores_out, out->offsets);
    ad::Var agg_out = ad::segment_weighted_sum(r.alpha_out, out->sources, zf, out->offsets);
    if (spec.mix == MixMode::sum) {
      agg = ad::add(agg, agg_out);
    } else {
      const std::size_t n = in_offsets.size() - 1;
      std::vector<char> in_empty(n), out_empty(n);
      for (std::size_t t = 0; t < n; ++t) {
        in_empty[t] = in_offsets[t] == in_offsets[t + 1];
        out_empty[t] = out->offsets[t] == out->offsets[t + 1];
      }
      ad::Var w_in = ad::mass_split(ad::segment_logsumexp(scores_in, in_offsets),
                                    ad::segment_logsumexp(scores_out, out->offsets), std::move(in_empty),
                                    std::move(out_empty));
      agg = ad::add(ad::scale_rows(agg, w_in), ad::scale_rows(agg_out, ad::one_minus(w_in)));
    }
  }
  r.h = ad::elu(agg);
  return r;
}

}  // namespace detail

struct ForwardOptions {
  int epoch = 1;
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  /// Apply G_thres eviction to frontier rows.
  bool evict = true;
};

/// Per-layer record of what the forward consumed.
struct LayerTrace {
  std::size_t frontier = 0;
  std::size_t retained = 0;
  std::vector<NodeId> retained_nodes;
  ad::Var alpha_in;
  ad::Var alpha_out;  // invalid when no out-of-batch edge survives
  std::vector<std::size_t> in_offsets;
  std::vector<std::size_t> out_offsets;
};

struct BatchForward {
  ad::Var output;               // |B| x num_classes
  std::vector<ad::Var> hidden;  // hidden[k] = h^(k) of the batch for k = 1..L-1; hidden[0] invalid
  std::vector<LayerTrace> layers;
};

inline void check_model_against_store(const Model& model, const HistoryStore& store) {
  if (store.num_layers() != model.num_layers())
    throw ShapeError("forward: history has " + std::to_string(store.num_layers()) + " layers, model needs " +
                     std::to_string(model.num_layers()));
  const auto dims = model.layer_dims();
  for (std::size_t k = 0; k < model.num_layers(); ++k)
    if (store.dim(k) != dims[k] || model.layer(k).dim_in() != model.input_dim(k))
      throw ShapeError("forward: dimension chain mismatch at layer " + std::to_string(k));
}

/// One mini-batch forward. Layer k computes the batch rows of h^(k+1) from the
/// live batch rows of h^(k) and the cached h^(k) rows of the retained frontier.
inline BatchForward forward_batch(ad::Tape& tape, Model& model, const Graph& g, const BatchContext& ctx,
                                  const HistoryStore& store, const Centrality& cent, const ForwardOptions& opt) {
  const auto& spec = model.spec();
  check_model_against_store(model, store);
  if (ctx.in_offsets.size() != ctx.size() + 1 || ctx.out_offsets.size() != ctx.size() + 1)
    throw ShapeError("forward_batch: malformed batch context");
  if (store.num_nodes() != g.num_nodes() || cent.c.size() != g.num_nodes())
    throw ShapeError("forward_batch: graph, history and centrality disagree on node count");
  if (opt.training && opt.dropout > 0.0 && opt.rng == nullptr)
    throw std::invalid_argument("forward_batch: dropout needs an rng");

  BatchForward res;
  res.hidden.resize(model.num_layers());
  const auto tgt_in = detail::expand_targets(ctx.in_offsets);
  ad::Var x = tape.constant(store.pull_rows(0, ctx.in_batch));

  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    LayerParams& p = model.layer(k);
    LayerTrace trace;
    trace.frontier = ctx.frontier.size();
    trace.in_offsets = ctx.in_offsets;

    if (opt.training && opt.dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - opt.dropout);
      const double scale = 1.0 / (1.0 - opt.dropout);
      Tensor mask(x.rows(), x.cols());
      for (auto& v : mask.values()) v = keep(*opt.rng) ? scale : 0.0;
      x = ad::mask_mul(x, std::move(mask));
    }

    std::vector<NodeId> retained = opt.evict ? store.evict_overdue(ctx.frontier, k) : ctx.frontier;
    std::vector<std::int64_t> remap(ctx.frontier.size(), -1);
    for (std::size_t f = 0, r = 0; f < ctx.frontier.size() && r < retained.size(); ++f)
      if (ctx.frontier[f] == retained[r]) remap[f] = static_cast<std::int64_t>(r++);

    detail::OutEdges out;
    out.offsets.push_back(0);
    for (std::size_t t = 0; t < ctx.size(); ++t) {
      for (std::size_t e = ctx.out_offsets[t]; e < ctx.out_offsets[t + 1]; ++e) {
        if (remap[ctx.out_src[e]] < 0) continue;
        out.sources.push_back(static_cast<std::uint32_t>(remap[ctx.out_src[e]]));
        out.targets.push_back(static_cast<std::uint32_t>(t));
      }
      out.offsets.push_back(out.sources.size());
    }
    if (!out.sources.empty()) {
      std::vector<double> s(retained.size(), 0.0);
      if (k > 0)
        for (std::size_t r = 0; r < retained.size(); ++r) s[r] = store.grad_norms(k)[retained[r]];
      out.rows = detail::augment_history(tape, tape.constant(store.pull_rows(k, retained)), s, spec.mode, p);
      out.penalty = Tensor(out.sources.size(), 1);
      for (std::size_t e = 0; e < out.sources.size(); ++e)
        out.penalty[e] = staleness_penalty(s[out.sources[e]], cent.c[retained[out.sources[e]]], cent.c_avg, 1.0);
    }

    auto step = detail::layer_step(tape, p, spec, opt.epoch, x, ctx.in_offsets, ctx.in_src, tgt_in, &out);
    trace.retained = retained.size();
    trace.retained_nodes = std::move(retained);
    trace.alpha_in = step.alpha_in;
    trace.alpha_out = step.alpha_out;
    trace.out_offsets = std::move(out.offsets);
    x = step.h;
    if (k + 1 < model.num_layers()) res.hidden[k + 1] = x;
    res.layers.push_back(std::move(trace));
  }
  res.output = x;
  return res;
}

/// Exact no-cache forward over the whole graph: h[0] = features, h[k+1] =
/// layer k applied with every neighbor live. Uses the same per-layer routine as
/// forward_batch, so forward_batch over all nodes reproduces it bit for bit.
inline std::vector<Tensor> full_batch_forward(const Graph& g, const Tensor& features, const Model& model,
                                              int epoch = 1) {
  if (features.rows() != g.num_nodes()) throw ShapeError("full_batch_forward: one feature row per node required");
  if (features.cols() != model.spec().in_dim) throw ShapeError("full_batch_forward: feature dim does not match the model");
  Model local = model;
  ad::Tape tape;
  std::vector<std::uint32_t> src(g.neighbors().begin(), g.neighbors().end());
  const auto tgt = detail::expand_targets(g.offsets());
  std::vector<Tensor> h{features};
  ad::Var x = tape.constant(features);
  for (std::size_t k = 0; k < local.num_layers(); ++k) {
    x = detail::layer_step(tape, local.layer(k), local.spec(), epoch, x, g.offsets(), src, tgt, nullptr).h;
    h.push_back(x.value());
  }
  return h;
}

}  // namespace stalemp
