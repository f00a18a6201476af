#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stalemp/checkpoint.hpp"
#include "stalemp/tensor.hpp"

namespace stalemp {

inline constexpr std::int64_t kNoThreshold = std::numeric_limits<std::int64_t>::max();

/// ln(1 + s), the log-normalized staleness channel.
inline double log_staleness(double s) {
  if (!(s >= 0.0)) throw std::invalid_argument("log_staleness: staleness must be nonnegative");
  return std::log1p(s);
}

struct StalenessRecord {
  NodeId node = 0;
  std::size_t layer = 0;
  double grad_norm = 0.0;
  /// Iterations since the row was last pushed.
  std::int64_t persistence = 0;
};

struct PullResult {
  Tensor rows;
  std::vector<StalenessRecord> records;
};

/// Cache of historical embeddings for layers 0..L-1 with per-row staleness
/// metadata. Layer 0 holds the raw input features and is never written after
/// construction, so its rows always report zero staleness.
class HistoryStore {
 public:
  HistoryStore() = default;

  /// Layer 0 = features, deeper layers zero-filled, s = 0, stamps = 0.
  static HistoryStore init(const Tensor& features, const std::vector<std::size_t>& layer_dims,
                           std::int64_t g_thres = kNoThreshold) {
    if (layer_dims.empty() || layer_dims[0] != features.cols())
      throw ShapeError("history init: layer_dims[0] must equal the feature dim " + std::to_string(features.cols()));
    if (g_thres < 0) throw std::invalid_argument("history init: G_thres must be nonnegative");
    HistoryStore h;
    const std::size_t n = features.rows();
    h.g_thres_ = g_thres;
    for (std::size_t l = 0; l < layer_dims.size(); ++l) {
      h.layers_.push_back(Layer{l == 0 ? features : Tensor(n, layer_dims[l]), std::vector<double>(n, 0.0),
                                std::vector<std::int64_t>(n, 0)});
    }
    return h;
  }

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t num_nodes() const { return layers_.empty() ? 0 : layers_[0].emb.rows(); }
  std::size_t dim(std::size_t layer) const { return at(layer).emb.cols(); }
  std::int64_t iteration() const { return iteration_; }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t g_thres() const { return g_thres_; }
  void set_g_thres(std::int64_t g) { g_thres_ = g; }

  void set_iteration(std::int64_t it) {
    if (it < iteration_) throw std::invalid_argument("history: iteration counter cannot move backwards");
    iteration_ = it;
  }
  void set_epoch(std::int64_t e) { epoch_ = e; }

  const Tensor& embeddings(std::size_t layer) const { return at(layer).emb; }
  const std::vector<double>& grad_norms(std::size_t layer) const { return at(layer).s; }
  const std::vector<std::int64_t>& last_update(std::size_t layer) const { return at(layer).last; }

  std::int64_t persistence(std::size_t layer, NodeId node) const {
    if (layer == 0) return 0;
    return iteration_ - at(layer).last[node];
  }

  Tensor pull_rows(std::size_t layer, std::span<const NodeId> nodes) const {
    const auto& L = at(layer);
    Tensor out(nodes.size(), L.emb.cols());
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      check_node(nodes[r]);
      auto src = L.emb.row(nodes[r]);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  }

  PullResult pull(std::size_t layer, std::span<const NodeId> nodes) const {
    PullResult res{pull_rows(layer, nodes), {}};
    res.records.reserve(nodes.size());
    for (NodeId i : nodes)
      res.records.push_back(StalenessRecord{i, layer, layer == 0 ? 0.0 : at(layer).s[i], persistence(layer, i)});
    return res;
  }

  void push(std::size_t layer, std::span<const NodeId> nodes, const Tensor& embeddings, std::int64_t iter) {
    if (layer == 0) throw std::invalid_argument("history push: layer 0 holds raw features and is read-only");
    auto& L = at(layer);
    if (embeddings.rows() != nodes.size() || embeddings.cols() != L.emb.cols())
      throw ShapeError("history push: expected " + std::to_string(nodes.size()) + "x" + std::to_string(L.emb.cols()) +
                       " rows, got " + shape_str(embeddings));
    for (NodeId i : nodes) {
      check_node(i);
      if (iter < L.last[i]) throw std::invalid_argument("history push: iteration older than the stored stamp");
    }
    if (!embeddings.all_finite()) throw std::invalid_argument("history push: non-finite embedding");
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      auto src = embeddings.row(r);
      std::copy(src.begin(), src.end(), L.emb.row(nodes[r]).begin());
      L.last[nodes[r]] = iter;
    }
    iteration_ = std::max(iteration_, iter);
  }

  /// s[node] := ||adjoint row||, overwriting the previous value.
  void record_grad_norms(std::size_t layer, std::span<const NodeId> nodes, const Tensor& adjoints) {
    if (layer == 0) throw std::invalid_argument("history: layer 0 carries no gradient staleness");
    auto& L = at(layer);
    if (adjoints.rows() != nodes.size() || adjoints.cols() != L.emb.cols())
      throw ShapeError("record_grad_norms: adjoint rows do not align with nodes");
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      check_node(nodes[r]);
      const double s = row_norm(adjoints.row(r));
      if (!std::isfinite(s)) throw std::invalid_argument("record_grad_norms: non-finite adjoint");
      L.s[nodes[r]] = s;
    }
  }

  /// Frontier nodes whose layer rows have persistence <= G_thres. Dropped
  /// nodes keep their cache rows; they only send no message this iteration.
  std::vector<NodeId> evict_overdue(std::span<const NodeId> frontier, std::size_t layer) const {
    std::vector<NodeId> kept;
    kept.reserve(frontier.size());
    for (NodeId j : frontier)
      if (persistence(layer, j) <= g_thres_) kept.push_back(j);
    return kept;
  }

  /// Snapshot file: the checkpoint layout with magic "STMPHIST" and one entry
  /// per layer, followed by per layer {u64 n | f64 s[n] | i64 last[n]} and the
  /// trailer {i64 iteration | i64 epoch | i64 g_thres}.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    io::BinaryWriter w(os);
    w.bytes(std::string_view(kMagic.data(), kMagic.size()));
    w.put<std::uint32_t>(io::kFormatVersion);
    w.put<std::uint64_t>(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) io::write_named_tensor(w, "history." + std::to_string(l), layers_[l].emb);
    for (const auto& L : layers_) {
      w.put<std::uint64_t>(L.s.size());
      w.reals(L.s);
      for (auto v : L.last) w.put<std::int64_t>(v);
    }
    w.put<std::int64_t>(iteration_);
    w.put<std::int64_t>(epoch_);
    w.put<std::int64_t>(g_thres_);
    if (!os) throw std::runtime_error("write failed: " + path);
  }

  static HistoryStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    io::BinaryReader r(is, path);
    r.expect_magic(kMagic);
    if (const auto v = r.get<std::uint32_t>(); v != io::kFormatVersion) r.fail("unsupported version " + std::to_string(v));
    const auto nl = r.get<std::uint64_t>();
    if (nl == 0 || nl > 64) r.fail("implausible layer count");
    HistoryStore h;
    for (std::uint64_t l = 0; l < nl; ++l) {
      auto [name, t] = io::read_named_tensor(r);
      if (name != "history." + std::to_string(l)) r.fail("unexpected entry " + name);
      if (l > 0 && t.rows() != h.layers_[0].emb.rows()) r.fail("layer row count mismatch");
      h.layers_.push_back(Layer{std::move(t), {}, {}});
    }
    const std::size_t n = h.layers_[0].emb.rows();
    for (auto& L : h.layers_) {
      if (r.get<std::uint64_t>() != n) r.fail("metadata length mismatch");
      L.s = r.reals(n);
      for (double s : L.s)
        if (!(s >= 0.0) || !std::isfinite(s)) r.fail("invalid staleness value");
      L.last.resize(n);
      for (auto& v : L.last) v = r.get<std::int64_t>();
    }
    h.iteration_ = r.get<std::int64_t>();
    h.epoch_ = r.get<std::int64_t>();
    h.g_thres_ = r.get<std::int64_t>();
    r.expect_end();
    for (const auto& L : h.layers_)
      for (auto v : L.last)
        if (v > h.iteration_ || v < 0) r.fail("stamp exceeds iteration counter");
    return h;
  }

 private:
  static constexpr std::array<char, 8> kMagic = {'S', 'T', 'M', 'P', 'H', 'I', 'S', 'T'};

  struct Layer {
    Tensor emb;
    std::vector<double> s;
    std::vector<std::int64_t> last;
  };

  const Layer& at(std::size_t l) const {
    if (l >= layers_.size()) throw std::out_of_range("history: invalid layer " + std::to_string(l));
    return layers_[l];
  }
  Layer& at(std::size_t l) {
    if (l >= layers_.size()) throw std::out_of_range("history: invalid layer " + std::to_string(l));
    return layers_[l];
  }
  void check_node(NodeId i) const {
    if (i >= num_nodes()) throw std::out_of_range("history: node id out of range");
  }

  std::vector<Layer> layers_;
  std::int64_t iteration_ = 0;
  std::int64_t epoch_ = 0;
  std::int64_t g_thres_ = kNoThreshold;
};

}  // namespace stalemp
