#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "stalemp/tensor.hpp"

/// Define-by-run reverse-mode differentiation over dense matrices.
///
/// A Tape records every op of one training step in execution order. backward()
/// walks the record once, newest first, pushing adjoints into inputs. The tape
/// is discarded after the step; nothing is cached across steps.
namespace stalemp::ad {

/// Learnable tensor with a gradient accumulator of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool has_grad = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() {
    grad.fill(0.0);
    has_grad = false;
  }
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  /// Adjoint after backward(); an all-zero tensor if nothing flowed here.
  Tensor grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, nullptr, {}); }

  /// Differentiable input that is not a Parameter (its adjoint is read via Var::grad).
  Var leaf(Tensor v) { return push(std::move(v), true, nullptr, {}); }

  Var param(Parameter& p) { return push(p.value, true, &p, {}); }

  /// Records an op result. back(tape, self) reads the adjoint of self and
  /// accumulates into the adjoints of its inputs.
  Var record(Tensor value, const std::vector<Var>& inputs, Backward back) {
    const bool rg = std::any_of(inputs.begin(), inputs.end(),
                                [this](const Var& v) { return nodes_[v.id()].requires_grad; });
    return push(std::move(value), rg, nullptr, rg ? std::move(back) : Backward{});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Adjoint buffer of node id, or nullptr if it does not need one.
  Tensor* adjoint(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  Tensor grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited() const { return visited_; }

  /// Propagates d(root)/d(node) to every node recorded before root and adds
  /// the result into each Parameter's gradient.
  void backward(Var root) {
    const Tensor& rv = value(root.id());
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward: root must be a scalar, got " + shape_str(rv));
    }
    if (!nodes_[root.id()].requires_grad) return;
    adjoint(root.id())->fill(1.0);
    visited_ = 0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      ++visited_;
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.back) n.back(*this, i);
      if (n.param != nullptr) {
        auto& pg = n.param->grad.values();
        const auto& g = n.grad.values();
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += g[k];
        n.param->has_grad = true;
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward back;
  };

  Var push(Tensor v, bool rg, Parameter* p, Backward back) {
    nodes_.push_back(Node{std::move(v), Tensor{}, rg, p, std::move(back)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::size_t visited_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline Tensor Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void add_into(Tape& t, const Var& v, const Tensor& g) {
  if (Tensor* a = t.adjoint(v.id())) {
    auto& av = a->values();
    const auto& gv = g.values();
    for (std::size_t k = 0; k < av.size(); ++k) av[k] += gv[k];
  }
}

template <typename F>
Var unary(const Var& x, F&& fwd_and_deriv) {
  const Tensor& xv = x.value();
  Tensor y(xv.rows(), xv.cols());
  Tensor d(xv.rows(), xv.cols());
  for (std::size_t k = 0; k < xv.size(); ++k) {
    auto [yk, dk] = fwd_and_deriv(xv[k]);
    y[k] = yk;
    d[k] = dk;
  }
  return x.tape()->record(std::move(y), {x}, [x, d = std::move(d)](Tape& t, std::size_t self) {
    if (Tensor* a = t.adjoint(x.id())) {
      const Tensor& g = *t.adjoint(self);
      for (std::size_t k = 0; k < g.size(); ++k) (*a)[k] += g[k] * d[k];
    }
  });
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    if (Tensor* ga = t.adjoint(a.id())) {
      // dA += dC * B^T
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t k = 0; k < av.cols(); ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < bv.cols(); ++j) s += g(i, j) * bv(k, j);
          (*ga)(i, k) += s;
        }
    }
    if (Tensor* gb = t.adjoint(b.id())) {
      // dB += A^T * dC
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t k = 0; k < av.cols(); ++k) {
          const double aik = av(i, k);
          for (std::size_t j = 0; j < bv.cols(); ++j) (*gb)(k, j) += aik * g(i, j);
        }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  require_shape(a.value().same_shape(b.value()), "add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += b.value()[k];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    detail::add_into(t, a, g);
    detail::add_into(t, b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_shape(a.value().same_shape(b.value()), "sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= b.value()[k];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    Tensor g = *t.adjoint(self);
    detail::add_into(t, a, g);
    for (auto& v : g.values()) v = -v;
    detail::add_into(t, b, g);
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  return a.tape()->record(std::move(out), {a}, [a, c](Tape& t, std::size_t self) {
    Tensor g = *t.adjoint(self);
    for (auto& v : g.values()) v *= c;
    detail::add_into(t, a, g);
  });
}

/// x * s for a 1x1 s.
inline Var scale_by(const Var& x, const Var& s) {
  if (s.value().size() != 1) throw ShapeError("scale_by: factor must be 1x1, got " + shape_str(s.value()));
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (auto& v : out.values()) v *= sv;
  return x.tape()->record(std::move(out), {x, s}, [x, s](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    const Tensor& xv = t.value(x.id());
    const double sv = t.value(s.id())[0];
    if (Tensor* gx = t.adjoint(x.id()))
      for (std::size_t k = 0; k < g.size(); ++k) (*gx)[k] += g[k] * sv;
    if (Tensor* gs = t.adjoint(s.id())) {
      double acc = 0.0;
      for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * xv[k];
      (*gs)[0] += acc;
    }
  });
}

inline Var elementwise_mul(const Var& a, const Var& b) {
  require_shape(a.value().same_shape(b.value()), "elementwise_mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= b.value()[k];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    if (Tensor* ga = t.adjoint(a.id()))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] * bv[k];
    if (Tensor* gb = t.adjoint(b.id()))
      for (std::size_t k = 0; k < g.size(); ++k) (*gb)[k] += g[k] * av[k];
  });
}

/// Multiplies by a fixed mask (dropout).
inline Var mask_mul(const Var& a, Tensor mask) {
  require_shape(a.value().same_shape(mask), "mask_mul", a.value(), mask);
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= mask[k];
  return a.tape()->record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& t, std::size_t self) {
    Tensor g = *t.adjoint(self);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] *= mask[k];
    detail::add_into(t, a, g);
  });
}

inline Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_shape(av.rows() == bv.rows(), "concat_cols", av, bv);
  const std::size_t ca = av.cols(), cb = bv.cols();
  Tensor out(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return a.tape()->record(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    if (Tensor* ga = t.adjoint(a.id()))
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < ca; ++c) (*ga)(r, c) += g(r, c);
    if (Tensor* gb = t.adjoint(b.id()))
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < cb; ++c) (*gb)(r, c) += g(r, ca + c);
  });
}

/// Rows [begin, end) of a.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.rows()) throw ShapeError("slice_rows: range out of bounds for " + shape_str(av));
  Tensor out(end - begin, av.cols());
  std::copy(av.values().begin() + static_cast<std::ptrdiff_t>(begin * av.cols()),
            av.values().begin() + static_cast<std::ptrdiff_t>(end * av.cols()), out.values().begin());
  return a.tape()->record(std::move(out), {a}, [a, begin](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    if (Tensor* ga = t.adjoint(a.id()))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[begin * g.cols() + k] += g[k];
  });
}

inline Var gather_rows(const Var& a, std::vector<std::uint32_t> idx) {
  for (auto i : idx)
    if (i >= a.value().rows()) throw ShapeError("gather_rows: index out of range for " + shape_str(a.value()));
  Tensor out = kernels::gather_rows(a.value(), idx);
  return a.tape()->record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    if (Tensor* ga = t.adjoint(a.id()))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(idx[r], c) += g(r, c);
  });
}

/// x (n x f) with row r scaled by w[r] (w is n x 1).
inline Var scale_rows(const Var& x, const Var& w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_shape(wv.rows() == xv.rows() && wv.cols() == 1, "scale_rows", xv, wv);
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (auto& v : out.row(r)) v *= wv[r];
  return x.tape()->record(std::move(out), {x, w}, [x, w](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    const Tensor& xv = t.value(x.id());
    const Tensor& wv = t.value(w.id());
    if (Tensor* gx = t.adjoint(x.id()))
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) (*gx)(r, c) += g(r, c) * wv[r];
    if (Tensor* gw = t.adjoint(w.id()))
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) s += g(r, c) * xv(r, c);
        (*gw)[r] += s;
      }
  });
}

inline Var leaky_relu(const Var& x, double slope = kernels::kLeakySlope) {
  return detail::unary(x, [slope](double v) {
    return std::pair{kernels::leaky_relu(v, slope), v > 0.0 ? 1.0 : slope};
  });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, [](double v) {
    const double y = kernels::sigmoid(v);
    return std::pair{y, y * (1.0 - y)};
  });
}

inline Var elu(const Var& x) {
  return detail::unary(x, [](double v) {
    return v > 0.0 ? std::pair{v, 1.0} : std::pair{std::expm1(v), std::exp(v)};
  });
}

inline Var softplus(const Var& x) {
  return detail::unary(x, [](double v) { return std::pair{kernels::softplus(v), kernels::sigmoid(v)}; });
}

/// Softmax of a column of scores within each segment [offsets[s], offsets[s+1]).
inline Var segmented_softmax(const Var& scores, std::vector<std::size_t> offsets) {
  const Tensor& sv = scores.value();
  if (sv.cols() != 1 || (!offsets.empty() && offsets.back() != sv.rows()))
    throw ShapeError("segmented_softmax: segments do not cover " + shape_str(sv));
  Tensor out = kernels::segmented_softmax(sv, offsets);
  return scores.tape()->record(std::move(out), {scores},
                               [scores, offsets = std::move(offsets)](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    const Tensor& y = t.value(self);
    Tensor* gx = t.adjoint(scores.id());
    if (gx == nullptr) return;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      double dot = 0.0;
      for (std::size_t k = offsets[s]; k < offsets[s + 1]; ++k) dot += y[k] * g[k];
      for (std::size_t k = offsets[s]; k < offsets[s + 1]; ++k) (*gx)[k] += y[k] * (g[k] - dot);
    }
  });
}

/// Per-segment log-sum-exp (nseg x 1). Empty segments report 0; callers that
/// care must track emptiness themselves.
inline Var segment_logsumexp(const Var& scores, std::vector<std::size_t> offsets) {
  const Tensor& sv = scores.value();
  if (sv.cols() != 1 || (!offsets.empty() && offsets.back() != sv.rows()))
    throw ShapeError("segment_logsumexp: segments do not cover " + shape_str(sv));
  Tensor out = kernels::segment_logsumexp(sv, offsets);
  for (auto& v : out.values())
    if (!std::isfinite(v)) v = 0.0;
  Tensor soft = kernels::segmented_softmax(sv, offsets);
  return scores.tape()->record(
      std::move(out), {scores},
      [scores, offsets = std::move(offsets), soft = std::move(soft)](Tape& t, std::size_t self) {
        const Tensor& g = *t.adjoint(self);
        if (Tensor* gx = t.adjoint(scores.id()))
          for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
            for (std::size_t k = offsets[s]; k < offsets[s + 1]; ++k) (*gx)[k] += soft[k] * g[s];
      });
}

/// Share of softmax mass held by the first of two disjoint segment groups:
/// w = exp(lse_a) / (exp(lse_a) + exp(lse_b)). Rows where group b is empty get
/// w = 1; rows where only group a is empty get w = 0.
inline Var mass_split(const Var& lse_a, const Var& lse_b, std::vector<char> a_empty, std::vector<char> b_empty) {
  const Tensor& av = lse_a.value();
  const Tensor& bv = lse_b.value();
  require_shape(av.same_shape(bv) && av.cols() == 1 && a_empty.size() == av.rows() && b_empty.size() == av.rows(),
                "mass_split", av, bv);
  Tensor w(av.rows(), 1);
  Tensor d(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    if (b_empty[r]) {
      w[r] = 1.0;
    } else if (a_empty[r]) {
      w[r] = 0.0;
    } else {
      w[r] = kernels::sigmoid(av[r] - bv[r]);
      d[r] = w[r] * (1.0 - w[r]);
    }
  }
  return lse_a.tape()->record(std::move(w), {lse_a, lse_b}, [lse_a, lse_b, d = std::move(d)](Tape& t, std::size_t self) {
    const Tensor& g = *t.adjoint(self);
    if (Tensor* ga = t.adjoint(lse_a.id()))
      for (std::size_t r = 0; r < g.size(); ++r) (*ga)[r] += g[r] * d[r];
    if (Tensor* gb = t.adjoint(lse_b.id()))
      for (std::size_t r = 0; r < g.size(); ++r) (*gb)[r] -= g[r] * d[r];
  });
}

inline Var one_minus(const Var& x) {
  return detail::unary(x, [](double v) { return std::pair{1.0 - v, -1.0}; });
}

/// out[s] = sum_{k in segment s} weight[k] * src[idx[k]]: attention-weighted
/// neighbor aggregation, O(entries * cols).
inline Var segment_weighted_sum(const Var& weight, std::vector<std::uint32_t> idx, const Var& src,
                                std::vector<std::size_t> offsets) {
  const Tensor& wv = weight.value();
  const Tensor& sv = src.value();
  if (wv.cols() != 1 || wv.rows() != idx.size() || (!offsets.empty() && offsets.back() != idx.size()))
    throw ShapeError("segment_weighted_sum: weights/index/segments disagree");
  for (auto i : idx)
    if (i >= sv.rows()) throw ShapeError("segment_weighted_sum: index out of range for " + shape_str(sv));
  Tensor out = kernels::segment_weighted_sum(wv, idx, sv, offsets);
  return weight.tape()->record(
      std::move(out), {weight, src},
      [weight, src, idx = std::move(idx), offsets = std::move(offsets)](Tape& t, std::size_t self) {
        const Tensor& g = *t.adjoint(self);
        const Tensor& wv = t.value(weight.id());
        const Tensor& sv = t.value(src.id());
        Tensor* gw = t.adjoint(weight.id());
        Tensor* gs = t.adjoint(src.id());
        const std::size_t f = sv.cols();
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const double* gr = &g(s, 0);
          for (std::size_t k = offsets[s]; k < offsets[s + 1]; ++k) {
            const double* sr = &sv(idx[k], 0);
            if (gw) {
              double dot = 0.0;
              for (std::size_t j = 0; j < f; ++j) dot += gr[j] * sr[j];
              (*gw)[k] += dot;
            }
            if (gs) {
              double* o = &(*gs)(idx[k], 0);
              for (std::size_t j = 0; j < f; ++j) o[j] += wv[k] * gr[j];
            }
          }
        }
      });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape()->record(Tensor::scalar(s), {x}, [x](Tape& t, std::size_t self) {
    const double g = (*t.adjoint(self))[0];
    if (Tensor* gx = t.adjoint(x.id()))
      for (auto& v : gx->values()) v += g;
  });
}

inline Var squared_norm(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v * v;
  return x.tape()->record(Tensor::scalar(s), {x}, [x](Tape& t, std::size_t self) {
    const double g = (*t.adjoint(self))[0];
    const Tensor& xv = t.value(x.id());
    if (Tensor* gx = t.adjoint(x.id()))
      for (std::size_t k = 0; k < xv.size(); ++k) (*gx)[k] += 2.0 * xv[k] * g;
  });
}

/// sum over r in rows of ||x[r] - target[r]||^2, target held fixed.
inline Var squared_distance_rows(const Var& x, Tensor target, std::vector<std::uint32_t> rows) {
  const Tensor& xv = x.value();
  require_shape(xv.same_shape(target), "squared_distance_rows", xv, target);
  double s = 0.0;
  for (auto r : rows) {
    if (r >= xv.rows()) throw ShapeError("squared_distance_rows: row out of range");
    for (std::size_t c = 0; c < xv.cols(); ++c) {
      const double d = xv(r, c) - target(r, c);
      s += d * d;
    }
  }
  return x.tape()->record(Tensor::scalar(s), {x},
                          [x, target = std::move(target), rows = std::move(rows)](Tape& t, std::size_t self) {
    const double g = (*t.adjoint(self))[0];
    const Tensor& xv = t.value(x.id());
    if (Tensor* gx = t.adjoint(x.id()))
      for (auto r : rows)
        for (std::size_t c = 0; c < xv.cols(); ++c) (*gx)(r, c) += 2.0 * (xv(r, c) - target(r, c)) * g;
  });
}

/// Mean negative log-softmax of the labeled class over the masked rows.
inline Var cross_entropy(const Var& logits, const LabelVector& labels, std::vector<std::uint32_t> mask) {
  const Tensor& lv = logits.value();
  if (mask.empty()) throw std::invalid_argument("cross_entropy: empty mask");
  if (labels.size() != lv.rows()) throw ShapeError("cross_entropy: one label per logit row required");
  const std::size_t c = lv.cols();
  Tensor prob(lv.rows(), c);
  double loss = 0.0;
  for (auto r : mask) {
    if (r >= lv.rows()) throw ShapeError("cross_entropy: mask row out of range");
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw std::invalid_argument("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : lv.row(r)) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : lv.row(r)) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    loss += lse - lv(r, static_cast<std::size_t>(labels[r]));
    for (std::size_t k = 0; k < c; ++k) prob(r, k) = std::exp(lv(r, k) - lse);
  }
  const double inv = 1.0 / static_cast<double>(mask.size());
  std::vector<int> y(labels);
  return logits.tape()->record(
      Tensor::scalar(loss * inv), {logits},
      [logits, prob = std::move(prob), mask = std::move(mask), y = std::move(y), inv](Tape& t, std::size_t self) {
        const double g = (*t.adjoint(self))[0];
        Tensor* gl = t.adjoint(logits.id());
        if (gl == nullptr) return;
        for (auto r : mask)
          for (std::size_t k = 0; k < prob.cols(); ++k) {
            const double onehot = static_cast<std::size_t>(y[r]) == k ? 1.0 : 0.0;
            (*gl)(r, k) += (prob(r, k) - onehot) * inv * g;
          }
      });
}

/// Per-coordinate comparison of analytic and central-difference gradients.
struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps coordinates
/// whose true gradient is ~0 from dividing central-difference round-off
/// (about eps * |f| / h) by nothing.
inline double relative_error(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// f builds a scalar on the given tape, reading parameters through tape.param().
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                                  double h = 1e-6, double tol = 1e-5, double floor = 1e-3) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(f(tape));
  }
  auto eval = [&f] {
    Tape tape;
    return f(tape).value().item();
  };
  GradCheckReport rep;
  for (auto* p : params) {
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double orig = p->value[k];
      p->value[k] = orig + h;
      const double fp = eval();
      p->value[k] = orig - h;
      const double fm = eval();
      p->value[k] = orig;
      GradCheckEntry e{p->name, k, p->grad[k], (fp - fm) / (2.0 * h), 0.0};
      e.rel_error = relative_error(e.analytic, e.numeric, floor);
      rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
      if (!(e.rel_error <= tol)) rep.passed = false;
      rep.entries.push_back(std::move(e));
    }
  }
  return rep;
}

}  // namespace stalemp::ad
