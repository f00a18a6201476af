#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stalemp/tensor.hpp"

namespace stalemp {

using Edge = std::pair<NodeId, NodeId>;

/// Immutable CSR adjacency. Undirected graphs hold both directions of each edge.
class Graph {
 public:
  Graph() : offsets_{0} {}

  /// Builds CSR from an edge list. With symmetrize, (u,v) also inserts (v,u).
  /// Duplicate edges collapse; neighbor lists come out sorted.
  static Graph from_edges(std::size_t num_nodes, std::span<const Edge> edges, bool symmetrize = true) {
    std::vector<Edge> all;
    all.reserve(edges.size() * (symmetrize ? 2 : 1));
    for (auto [u, v] : edges) {
      if (u >= num_nodes || v >= num_nodes)
        throw std::invalid_argument("graph: edge (" + std::to_string(u) + "," + std::to_string(v) +
                                    ") references a node >= " + std::to_string(num_nodes));
      all.emplace_back(u, v);
      if (symmetrize && u != v) all.emplace_back(v, u);
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    Graph g;
    g.offsets_.assign(num_nodes + 1, 0);
    g.neighbors_.reserve(all.size());
    for (auto [u, v] : all) {
      ++g.offsets_[u + 1];
      g.neighbors_.push_back(v);
    }
    std::partial_sum(g.offsets_.begin(), g.offsets_.end(), g.offsets_.begin());
    g.degrees_.resize(num_nodes);
    for (std::size_t i = 0; i < num_nodes; ++i) g.degrees_[i] = static_cast<std::uint32_t>(g.offsets_[i + 1] - g.offsets_[i]);
    return g;
  }

  std::size_t num_nodes() const { return degrees_.size(); }
  std::size_t num_edges() const { return neighbors_.size(); }
  const std::vector<std::size_t>& offsets() const { return offsets_; }
  const std::vector<NodeId>& neighbors() const { return neighbors_; }
  const std::vector<std::uint32_t>& degrees() const { return degrees_; }
  std::uint32_t degree(NodeId i) const { return degrees_[i]; }
  std::span<const NodeId> neighbors_of(NodeId i) const {
    return {neighbors_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }

  /// Undirected edge list with each pair once (u <= v).
  std::vector<Edge> undirected_edges() const {
    std::vector<Edge> out;
    for (NodeId u = 0; u < num_nodes(); ++u)
      for (NodeId v : neighbors_of(u))
        if (u <= v) out.emplace_back(u, v);
    return out;
  }

  /// Copy with a self-loop on every node that lacks one.
  Graph with_self_loops() const {
    auto edges = undirected_edges();
    for (NodeId i = 0; i < num_nodes(); ++i) edges.emplace_back(i, i);
    return from_edges(num_nodes(), edges, true);
  }

  bool valid() const {
    if (offsets_.size() != num_nodes() + 1 || offsets_.front() != 0 || offsets_.back() != neighbors_.size()) return false;
    for (std::size_t i = 0; i < num_nodes(); ++i) {
      if (offsets_[i + 1] < offsets_[i]) return false;
      if (degrees_[i] != offsets_[i + 1] - offsets_[i]) return false;
    }
    return std::all_of(neighbors_.begin(), neighbors_.end(), [&](NodeId v) { return v < num_nodes(); });
  }

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  std::vector<std::size_t> offsets_;
  std::vector<NodeId> neighbors_;
  std::vector<std::uint32_t> degrees_;
};

/// Graph with node features and integer class labels.
struct Dataset {
  Graph graph;
  Tensor features;
  LabelVector labels;
  /// Original id of each node when the edge list was remapped; empty otherwise.
  std::vector<std::uint64_t> original_ids;

  std::size_t num_classes() const {
    int mx = -1;
    for (int y : labels) mx = std::max(mx, y);
    return static_cast<std::size_t>(mx + 1);
  }
};

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Features: u64 num_nodes | u64 feat_dim | f32 values, row-major, little-endian.
inline Tensor read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::uint64_t n = 0, d = 0;
  is.read(reinterpret_cast<char*>(&n), 8);
  is.read(reinterpret_cast<char*>(&d), 8);
  if (!is) throw FormatError(path + ": truncated header");
  if (d != 0 && n > (std::uint64_t{1} << 32) / d) throw FormatError(path + ": implausible shape");
  std::vector<float> raw(n * d);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!is) throw FormatError(path + ": expected " + std::to_string(n * d) + " float32 values");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after feature matrix");
  Tensor t(n, d);
  for (std::size_t k = 0; k < raw.size(); ++k) t[k] = static_cast<double>(raw[k]);
  return t;
}

inline void write_features(const std::string& path, const Tensor& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  const std::uint64_t n = f.rows(), d = f.cols();
  os.write(reinterpret_cast<const char*>(&n), 8);
  os.write(reinterpret_cast<const char*>(&d), 8);
  for (double v : f.values()) {
    const float x = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&x), sizeof(float));
  }
}

inline LabelVector read_labels(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  LabelVector out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    long v = 0;
    std::string rest;
    if (!(ls >> v) || (ls >> rest) || v < 0 || v > std::numeric_limits<int>::max())
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected one nonnegative integer label");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

inline void write_labels(const std::string& path, const LabelVector& labels) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  for (int y : labels) os << y << '\n';
}

inline void write_edge_list(const std::string& path, const Graph& g) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "# " << g.num_nodes() << " nodes\n";
  for (auto [u, v] : g.undirected_edges()) os << u << '\t' << v << '\n';
}

/// Parses "src<TAB>dst" lines, skipping blanks and '#' comments.
inline std::vector<std::pair<std::uint64_t, std::uint64_t>> read_edge_pairs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    long long u = -1, v = -1;
    std::string rest;
    if (!(ls >> u >> v) || (ls >> rest) || u < 0 || v < 0)
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed edge line '" + line + "'");
    out.emplace_back(static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(v));
  }
  return out;
}

struct LoadOptions {
  /// Map the distinct ids that appear in the edge list onto 0..k-1 (sorted).
  bool remap_ids = false;
};

/// Loads the three dataset files. The node count comes from the feature header.
inline Dataset load_edge_list(const std::string& edges_path, const std::string& features_path,
                              const std::string& labels_path, const LoadOptions& opt = {}) {
  Dataset ds;
  ds.features = read_features(features_path);
  ds.labels = read_labels(labels_path);
  const std::size_t n = ds.features.rows();
  if (ds.labels.size() != n)
    throw FormatError("label count " + std::to_string(ds.labels.size()) + " does not match feature rows " +
                      std::to_string(n));
  auto pairs = read_edge_pairs(edges_path);
  std::vector<Edge> edges;
  edges.reserve(pairs.size());
  if (opt.remap_ids) {
    std::vector<std::uint64_t> ids;
    for (auto [u, v] : pairs) {
      ids.push_back(u);
      ids.push_back(v);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() > n)
      throw FormatError(edges_path + ": " + std::to_string(ids.size()) + " distinct ids but only " +
                        std::to_string(n) + " feature rows");
    auto local = [&](std::uint64_t id) {
      return static_cast<NodeId>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
    };
    for (auto [u, v] : pairs) edges.emplace_back(local(u), local(v));
    ds.original_ids = ids;
    for (std::uint64_t k = ids.size(); k < n; ++k) ds.original_ids.push_back(std::numeric_limits<std::uint64_t>::max());
  } else {
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      auto [u, v] = pairs[k];
      if (u >= n || v >= n)
        throw FormatError(edges_path + ": node id gap: id " + std::to_string(std::max(u, v)) + " >= " +
                          std::to_string(n) + " nodes (edge " + std::to_string(k + 1) + ")");
      edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    }
  }
  ds.graph = Graph::from_edges(n, edges, true);
  return ds;
}

// ---------------------------------------------------------------------------
// Structural quantities
// ---------------------------------------------------------------------------

/// D^{-1/2} A D^{-1/2} weights aligned with Graph::neighbors().
struct NormalizedAdjacency {
  std::vector<double> weights;

  /// Euclidean norm of node i's row.
  double row_norm(const Graph& g, NodeId i) const {
    double s = 0.0;
    for (std::size_t e = g.offsets()[i]; e < g.offsets()[i + 1]; ++e) s += weights[e] * weights[e];
    return std::sqrt(s);
  }
};

inline NormalizedAdjacency symmetric_normalize(const Graph& g) {
  NormalizedAdjacency a;
  a.weights.resize(g.num_edges());
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    for (std::size_t e = g.offsets()[i]; e < g.offsets()[i + 1]; ++e) {
      const NodeId j = g.neighbors()[e];
      a.weights[e] = 1.0 / std::sqrt(static_cast<double>(g.degree(i)) * static_cast<double>(g.degree(j)));
    }
  }
  return a;
}

/// Degree centrality c and its mean.
struct Centrality {
  std::vector<double> c;
  double c_avg = 0.0;
};

inline Centrality degree_centrality(const Graph& g) {
  Centrality out;
  out.c.reserve(g.num_nodes());
  double total = 0.0;
  for (auto d : g.degrees()) {
    out.c.push_back(static_cast<double>(d));
    total += static_cast<double>(d);
  }
  out.c_avg = g.num_nodes() == 0 ? 0.0 : total / static_cast<double>(g.num_nodes());
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning and batches
// ---------------------------------------------------------------------------

struct Partition {
  std::size_t num_clusters = 0;
  std::vector<std::uint32_t> assignment;

  std::vector<NodeId> members(std::uint32_t c) const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < assignment.size(); ++i)
      if (assignment[i] == c) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(num_clusters, 0);
    for (auto c : assignment) ++s[c];
    return s;
  }
};

/// Seeded BFS region growing into k clusters. Cluster c targets
/// ceil(n/k) nodes for c < n mod k and floor(n/k) otherwise; when a region runs
/// out of reachable unassigned nodes it restarts from the next seeded pick.
inline Partition partition_greedy(const Graph& g, std::size_t k, std::uint64_t seed) {
  const std::size_t n = g.num_nodes();
  if (k < 1 || k > n)
    throw std::invalid_argument("partition_greedy: need 1 <= k <= num_nodes (k=" + std::to_string(k) +
                                ", n=" + std::to_string(n) + ")");
  constexpr auto kUnassigned = std::numeric_limits<std::uint32_t>::max();
  Partition p{k, std::vector<std::uint32_t>(n, kUnassigned)};
  std::vector<NodeId> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  auto next_seed = [&]() -> NodeId {
    while (p.assignment[order[cursor]] != kUnassigned) ++cursor;
    return order[cursor];
  };
  for (std::uint32_t c = 0; c < k; ++c) {
    const std::size_t target = n / k + (c < n % k ? 1 : 0);
    std::size_t size = 0;
    std::queue<NodeId> frontier;
    while (size < target) {
      if (frontier.empty()) {
        const NodeId s = next_seed();
        p.assignment[s] = c;
        ++size;
        frontier.push(s);
        continue;
      }
      const NodeId u = frontier.front();
      frontier.pop();
      for (NodeId v : g.neighbors_of(u)) {
        if (size == target) break;
        if (p.assignment[v] != kUnassigned) continue;
        p.assignment[v] = c;
        ++size;
        frontier.push(v);
      }
    }
  }
  return p;
}

/// One training step's node sets and the in/out split of each target's neighbors.
///
/// Target t = in_batch[t]. Its in-batch neighbors are in_batch[in_src[e]] for
/// e in [in_offsets[t], in_offsets[t+1]); its out-of-batch neighbors are
/// frontier[out_src[e]] for e in [out_offsets[t], out_offsets[t+1]). Both lists
/// follow CSR neighbor order.
struct BatchContext {
  std::vector<NodeId> in_batch;
  std::vector<NodeId> frontier;
  std::vector<std::size_t> in_offsets;
  std::vector<std::uint32_t> in_src;
  std::vector<std::size_t> out_offsets;
  std::vector<std::uint32_t> out_src;

  std::size_t size() const { return in_batch.size(); }
  bool full_batch() const { return frontier.empty(); }
};

inline BatchContext make_batch_from_nodes(const Graph& g, std::vector<NodeId> nodes) {
  if (nodes.empty()) throw std::invalid_argument("make_batch: empty batch");
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  if (nodes.back() >= g.num_nodes()) throw std::invalid_argument("make_batch: node id out of range");
  BatchContext ctx;
  ctx.in_batch = std::move(nodes);
  constexpr std::int64_t kNone = -1;
  std::vector<std::int64_t> in_pos(g.num_nodes(), kNone);
  for (std::size_t t = 0; t < ctx.in_batch.size(); ++t) in_pos[ctx.in_batch[t]] = static_cast<std::int64_t>(t);
  std::vector<char> seen(g.num_nodes(), 0);
  for (NodeId i : ctx.in_batch)
    for (NodeId j : g.neighbors_of(i))
      if (in_pos[j] == kNone && !seen[j]) {
        seen[j] = 1;
        ctx.frontier.push_back(j);
      }
  std::sort(ctx.frontier.begin(), ctx.frontier.end());
  std::vector<std::uint32_t> out_pos(g.num_nodes(), 0);
  for (std::size_t f = 0; f < ctx.frontier.size(); ++f) out_pos[ctx.frontier[f]] = static_cast<std::uint32_t>(f);
  ctx.in_offsets.push_back(0);
  ctx.out_offsets.push_back(0);
  for (NodeId i : ctx.in_batch) {
    for (NodeId j : g.neighbors_of(i)) {
      if (in_pos[j] != kNone)
        ctx.in_src.push_back(static_cast<std::uint32_t>(in_pos[j]));
      else
        ctx.out_src.push_back(out_pos[j]);
    }
    ctx.in_offsets.push_back(ctx.in_src.size());
    ctx.out_offsets.push_back(ctx.out_src.size());
  }
  return ctx;
}

/// Batch made of the union of the given clusters.
inline BatchContext make_batch(const Partition& p, std::span<const std::uint32_t> cluster_ids, const Graph& g) {
  if (cluster_ids.empty()) throw std::invalid_argument("make_batch: empty cluster set");
  std::vector<char> chosen(p.num_clusters, 0);
  for (auto c : cluster_ids) {
    if (c >= p.num_clusters) throw std::invalid_argument("make_batch: cluster id " + std::to_string(c) + " out of range");
    chosen[c] = 1;
  }
  std::vector<NodeId> nodes;
  for (NodeId i = 0; i < p.assignment.size(); ++i)
    if (chosen[p.assignment[i]]) nodes.push_back(i);
  return make_batch_from_nodes(g, std::move(nodes));
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SbmParams {
  std::size_t n = 200;
  std::size_t blocks = 2;
  double p_in = 0.1;
  double p_out = 0.01;
  std::size_t feat_dim = 16;
  /// Per-coordinate standard deviation of the feature noise.
  double noise = 0.2;
  std::uint64_t seed = 0;
};

inline std::size_t sbm_block_of(std::size_t i, std::size_t n, std::size_t blocks) { return i * blocks / n; }

/// Stochastic block model with contiguous balanced blocks. Edges are sampled
/// with geometric skips per (row, block) so cost is O(n * blocks + m).
/// Features are a unit-norm random block mean plus Gaussian noise.
inline Dataset synth_sbm(const SbmParams& prm) {
  auto valid_p = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!valid_p(prm.p_in) || !valid_p(prm.p_out)) throw std::invalid_argument("synth_sbm: probabilities must lie in [0,1]");
  if (prm.blocks < 1) throw std::invalid_argument("synth_sbm: blocks must be >= 1");
  if (prm.n < prm.blocks) throw std::invalid_argument("synth_sbm: need n >= blocks");
  if (prm.feat_dim < 1) throw std::invalid_argument("synth_sbm: feat_dim must be >= 1");
  if (!(prm.noise >= 0.0)) throw std::invalid_argument("synth_sbm: noise must be >= 0");
  const std::size_t n = prm.n, nb = prm.blocks;
  std::mt19937_64 rng(prm.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::size_t> block_begin(nb + 1);
  for (std::size_t b = 0; b <= nb; ++b) block_begin[b] = (b * n + nb - 1) / nb;

  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bi = sbm_block_of(i, n, nb);
    for (std::size_t b = bi; b < nb; ++b) {
      const double p = b == bi ? prm.p_in : prm.p_out;
      std::size_t j = b == bi ? i + 1 : block_begin[b];
      const std::size_t end = block_begin[b + 1];
      if (p <= 0.0 || j >= end) continue;
      const double log_q = p < 1.0 ? std::log1p(-p) : 0.0;
      while (true) {
        if (p < 1.0) {
          const double skip = std::floor(std::log1p(-unif(rng)) / log_q);
          if (skip >= static_cast<double>(end - j)) break;
          j += static_cast<std::size_t>(skip);
        }
        if (j >= end) break;
        edges.emplace_back(static_cast<NodeId>(i), static_cast<NodeId>(j));
        ++j;
      }
    }
  }

  Dataset ds;
  ds.graph = Graph::from_edges(n, edges, true);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor means(nb, prm.feat_dim);
  for (std::size_t b = 0; b < nb; ++b) {
    auto r = means.row(b);
    for (auto& v : r) v = normal(rng);
    const double nr = row_norm(r);
    for (auto& v : r) v /= nr;
  }
  ds.features = Tensor(n, prm.feat_dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = sbm_block_of(i, n, nb);
    ds.labels[i] = static_cast<int>(b);
    for (std::size_t k = 0; k < prm.feat_dim; ++k) ds.features(i, k) = means(b, k) + prm.noise * normal(rng);
  }
  return ds;
}

}  // namespace stalemp
