#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "stalemp/layer.hpp"

using namespace stalemp;

namespace {

LayerParams make_params(std::size_t din, std::size_t dout, std::uint64_t seed, double beta = 1.0) {
  std::mt19937_64 rng(seed);
  LayerParams p{ad::Parameter("W", oracle::random_tensor(din, dout, rng, 0.5)),
                ad::Parameter("a", oracle::random_tensor(2 * dout, 1, rng, 0.5)),
                ad::Parameter("beta", Tensor::scalar(LayerParams::raw_for_beta(beta))), std::nullopt};
  return p;
}

// Plain GAT coefficients of target h_i over rows, computed without the library kernels.
std::vector<double> gat_coefficients(std::span<const double> h_i, const Tensor& rows, const LayerParams& p) {
  const std::size_t f = p.dim_out();
  const Tensor zi = oracle::naive_matmul(Tensor(1, h_i.size(), std::vector<double>(h_i.begin(), h_i.end())), p.W.value);
  const Tensor z = oracle::naive_matmul(rows, p.W.value);
  double si = 0.0;
  for (std::size_t c = 0; c < f; ++c) si += p.a.value[c] * zi[c];
  std::vector<double> e(rows.rows());
  double mx = -1e300;
  for (std::size_t j = 0; j < rows.rows(); ++j) {
    double sj = si;
    for (std::size_t c = 0; c < f; ++c) sj += p.a.value[f + c] * z(j, c);
    e[j] = sj > 0 ? sj : 0.2 * sj;
    mx = std::max(mx, e[j]);
  }
  double zs = 0.0;
  for (auto& v : e) zs += (v = std::exp(v - mx));
  for (auto& v : e) v /= zs;
  return e;
}

struct Fixture {
  Dataset ds;
  Centrality cent;
  Model model;
  HistoryStore store;
};

Fixture make_fixture(std::size_t n, AugmentMode mode, MixMode mix, std::uint64_t seed, std::size_t layers = 2) {
  Fixture fx;
  std::mt19937_64 rng(seed);
  fx.ds.graph = oracle::random_graph(n, n, rng);
  fx.ds.features = oracle::random_tensor(n, 3, rng);
  fx.ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) fx.ds.labels[i] = static_cast<int>(i % 2);
  fx.cent = degree_centrality(fx.ds.graph);
  fx.model = Model::create({.in_dim = 3, .hidden = 4, .num_classes = 2, .layers = layers, .mode = mode,
                            .gamma_on = true, .mix = mix},
                           seed + 1);
  fx.store = HistoryStore::init(fx.ds.features, fx.model.cache_dims());
  std::vector<NodeId> all(n);
  std::iota(all.begin(), all.end(), 0u);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (std::size_t l = 1; l < fx.store.num_layers(); ++l) {
    fx.store.push(l, all, oracle::random_tensor(n, fx.store.dim(l), rng), 1);
    fx.store.record_grad_norms(l, all, oracle::random_tensor(n, fx.store.dim(l), rng));
  }
  return fx;
}

}  // namespace

TEST(Gamma, Examples) {
  EXPECT_EQ(gamma(1, 2.0), 2.0);
  EXPECT_EQ(gamma(2, 2.0), 1.0);
  EXPECT_LT(gamma(1000000, 3.0), 1e-5);
  EXPECT_THROW(gamma(0, 1.0), std::invalid_argument);
}

TEST(Penalty, Examples) {
  EXPECT_EQ(staleness_penalty(0.0, 5.0, 1.0, 3.0), 0.0);
  EXPECT_EQ(staleness_penalty(4.0, 2.0, 2.0, 1.5), 1.5 * 4.0 * 0.5);
  EXPECT_NEAR(staleness_penalty(2.0, 3.0, 1.0, 1.0), 1.761594, 1e-6);
  EXPECT_EQ(staleness_penalty(2.0, 3.0, 1.0, 0.0), 0.0);
  EXPECT_THROW(staleness_penalty(-1.0, 0, 0, 1), std::invalid_argument);
}

TEST(Beta, SoftplusParameterization) {
  for (double b : {1e-3, 0.5, 1.0, 7.0, 50.0}) EXPECT_NEAR(kernels::softplus(LayerParams::raw_for_beta(b)), b, 1e-12 * b);
  EXPECT_THROW(LayerParams::raw_for_beta(0.0), std::invalid_argument);
}

TEST(AttentionOut, ZeroStalenessIsGat) {
  std::mt19937_64 rng(4);
  auto p = make_params(3, 4, 1);
  const Tensor rows = oracle::random_tensor(5, 3, rng), hi = oracle::random_tensor(1, 3, rng);
  const std::vector<double> s(5, 0.0), c{1, 2, 3, 4, 5};
  const auto got = attention_out(hi.row(0), rows, s, c, 2.0, 1, p);
  const auto want = gat_coefficients(hi.row(0), rows, p);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(got[j], want[j], 1e-14);
}

TEST(AttentionOut, SingleNeighborIsOne) {
  auto p = make_params(2, 3, 2);
  const std::vector<double> hi{0.3, -0.2}, s{50.0}, c{9.0};
  EXPECT_EQ(attention_out(hi, Tensor(1, 2, {1.0, 2.0}), s, c, 1.0, 1, p), (std::vector<double>{1.0}));
}

TEST(AttentionOut, PenaltyLogThree) {
  // identical rows give identical raw scores; c_j = c_avg halves s, gamma(1) = beta = 1
  auto p = make_params(2, 3, 3, 1.0);
  const Tensor rows(2, 2, {0.4, -0.1, 0.4, -0.1});
  const std::vector<double> hi{1.0, 0.5}, s{0.0, 2.0 * std::log(3.0)}, c{1.0, 1.0};
  const auto a = attention_out(hi, rows, s, c, 1.0, 1, p);
  EXPECT_NEAR(a[0], 0.75, 1e-12);
  EXPECT_NEAR(a[1], 0.25, 1e-12);
}

TEST(AttentionOut, EmptyAndShapeErrors) {
  auto p = make_params(2, 3, 3);
  const std::vector<double> hi{1.0, 0.5}, none;
  EXPECT_TRUE(attention_out(hi, Tensor(0, 2), none, none, 1.0, 1, p).empty());
  const std::vector<double> one{0.0};
  EXPECT_THROW(attention_out(hi, Tensor(1, 3), one, one, 1.0, 1, p), ShapeError);
  EXPECT_THROW(attention_out(hi, Tensor(2, 2), one, one, 1.0, 1, p), ShapeError);
  EXPECT_THROW(attention_out(hi, Tensor(1, 2), one, one, 1.0, 0, p), std::invalid_argument);
}

TEST(AttentionIn, Examples) {
  auto p = make_params(2, 3, 5);
  const std::vector<double> hi{1.0, -1.0};
  const auto eq = attention_in(hi, Tensor(4, 2, 0.7), p);
  for (double v : eq) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_TRUE(attention_in(hi, Tensor(0, 2), p).empty());
}

TEST(AttentionIn, BitEqualToAttentionOutWithZeroStaleness) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = make_params(3, 4, 100 + trial, 0.1 + trial);
    const Tensor rows = oracle::random_tensor(1 + trial % 6, 3, rng), hi = oracle::random_tensor(1, 3, rng);
    const std::vector<double> s(rows.rows(), 0.0);
    std::vector<double> c(rows.rows());
    for (auto& v : c) v = static_cast<double>(rng() % 10);
    EXPECT_EQ(attention_in(hi.row(0), rows, p), attention_out(hi.row(0), rows, s, c, 3.3, 1 + trial, p));
  }
}

TEST(Aggregate, IsolatedNodeIsZero) {
  auto p = make_params(2, 3, 6);
  const std::vector<double> none;
  EXPECT_EQ(aggregate(none, none, Tensor(0, 2), Tensor(0, 2), p), (std::vector<double>{0, 0, 0}));
}

TEST(Aggregate, HandComposedTwoDimensional) {
  auto p = make_params(2, 2, 7);
  p.W.value = Tensor(2, 2, {1, 2, 0, 1});
  const std::vector<double> one{1.0};
  const Tensor hj(1, 2, {1.0, 0.0}), hk(1, 2, {0.0, -3.0});
  // hj W = (1, 2), hk W = (0, -3), sum (1, -1)
  const auto out = aggregate(one, one, hj, hk, p);
  EXPECT_DOUBLE_EQ(out[0], 1.0);
  EXPECT_DOUBLE_EQ(out[1], std::expm1(-1.0));
  const auto mass = aggregate(one, one, hj, hk, p, 0.25);
  EXPECT_DOUBLE_EQ(mass[0], 0.25);
  EXPECT_DOUBLE_EQ(mass[1], std::expm1(0.25 * 2.0 - 0.75 * 3.0));
}

TEST(Aggregate, FullBatchMatchesGat) {
  std::mt19937_64 rng(12);
  const Graph g = oracle::random_graph(9, 8, rng);
  const Tensor x = oracle::random_tensor(9, 3, rng);
  auto p = make_params(3, 4, 13);
  const Tensor want = oracle::gat_layer(g, x, p.W.value, p.a.value);
  for (NodeId i = 0; i < 9; ++i) {
    const auto nb = g.neighbors_of(i);
    Tensor rows(nb.size(), 3);
    for (std::size_t k = 0; k < nb.size(); ++k) std::copy(x.row(nb[k]).begin(), x.row(nb[k]).end(), rows.row(k).begin());
    const auto alpha = attention_in(x.row(i), rows, p);
    const std::vector<double> none;
    const auto h = aggregate(alpha, none, rows, Tensor(0, 3), p);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(h[c], want(i, c), 1e-13);
  }
}

TEST(Augment, Modes) {
  auto p = make_params(2, 2, 9);
  const Tensor rows(2, 2, {1, 2, 3, 4});
  const std::vector<double> zero{0, 0}, s{0.0, std::exp(1.0) - 1.0};
  EXPECT_EQ(augment(rows, s, AugmentMode::none, p), rows);
  EXPECT_EQ(augment(rows, zero, AugmentMode::concat, p), Tensor(2, 3, {1, 2, 0, 3, 4, 0}));
  const Tensor cat = augment(rows, s, AugmentMode::concat, p);
  EXPECT_NEAR(cat(1, 2), 1.0, 1e-15);
  EXPECT_THROW(augment(rows, s, AugmentMode::summation, p), std::invalid_argument);
  p.W_s = ad::Parameter("W_s", Tensor(1, 2));
  EXPECT_EQ(augment(rows, s, AugmentMode::summation, p), rows);
  p.W_s->value = Tensor(1, 2, {1.0, -2.0});
  const Tensor sum = augment(rows, s, AugmentMode::summation, p);
  EXPECT_DOUBLE_EQ(sum(1, 0), 3.0 + s[1]);
  EXPECT_DOUBLE_EQ(sum(1, 1), 4.0 + std::expm1(-2.0 * s[1]));
  EXPECT_THROW(augment(rows, std::span<const double>(zero).subspan(0, 1), AugmentMode::none, p), ShapeError);
}

TEST(Augment, ParseAndNames) {
  EXPECT_EQ(parse_augment("cat"), AugmentMode::concat);
  EXPECT_EQ(parse_augment("sum"), AugmentMode::summation);
  EXPECT_EQ(to_string(AugmentMode::none), "none");
  EXPECT_THROW(parse_augment("bogus"), std::invalid_argument);
  EXPECT_EQ(parse_mix("sum"), MixMode::sum);
  EXPECT_THROW(parse_mix("avg"), std::invalid_argument);
}

TEST(Model, DimensionsFollowMode) {
  const auto m = Model::create({.in_dim = 5, .hidden = 7, .num_classes = 3, .layers = 3, .mode = AugmentMode::concat}, 0);
  EXPECT_EQ(m.layer_dims(), (std::vector<std::size_t>{5, 7, 7, 3}));
  EXPECT_EQ(m.cache_dims(), (std::vector<std::size_t>{5, 7, 7}));
  EXPECT_EQ(m.layer(0).dim_in(), 6u);
  EXPECT_EQ(m.layer(2).dim_out(), 3u);
  EXPECT_NEAR(m.layer(1).beta(), 1.0, 1e-15);
  const auto s = Model::create({.in_dim = 5, .hidden = 7, .num_classes = 3, .layers = 2, .mode = AugmentMode::summation}, 0);
  EXPECT_EQ(s.layer(1).W_s->value.cols(), 7u);
  EXPECT_EQ(s.parameters().size(), 8u);
  EXPECT_THROW(Model::create({.in_dim = 5, .layers = 0}, 0), std::invalid_argument);
}

TEST(ForwardBatch, WholeGraphEqualsFullBatchForward) {
  for (auto mode : {AugmentMode::none, AugmentMode::concat, AugmentMode::summation})
    for (auto mix : {MixMode::mass, MixMode::sum}) {
      auto fx = make_fixture(12, mode, mix, 31);
      std::vector<NodeId> all(12);
      std::iota(all.begin(), all.end(), 0u);
      const auto ctx = make_batch_from_nodes(fx.ds.graph, all);
      ad::Tape tape;
      const auto fw = forward_batch(tape, fx.model, fx.ds.graph, ctx, fx.store, fx.cent, {.epoch = 3});
      const auto h = full_batch_forward(fx.ds.graph, fx.ds.features, fx.model, 3);
      EXPECT_EQ(fw.output.value(), h.back()) << to_string(mode) << "/" << to_string(mix);
      EXPECT_EQ(fw.hidden[1].value(), h[1]);
    }
}

TEST(ForwardBatch, FullBatchEqualsPlainGatStack) {
  auto fx = make_fixture(15, AugmentMode::none, MixMode::mass, 41, 3);
  const auto h = full_batch_forward(fx.ds.graph, fx.ds.features, fx.model);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor want = oracle::gat_layer(fx.ds.graph, h[k], fx.model.layer(k).W.value, fx.model.layer(k).a.value);
    for (std::size_t q = 0; q < want.size(); ++q) EXPECT_NEAR(h[k + 1][q], want[q], 1e-13);
  }
}

TEST(ForwardBatch, SingleLayerPathMiddleNode) {
  Dataset ds;
  ds.graph = Graph::from_edges(3, std::vector<Edge>{{0, 1}, {1, 2}});
  ds.features = Tensor(3, 2, {1.0, 0.0, 0.5, -0.5, -1.0, 2.0});
  const Centrality cent = degree_centrality(ds.graph);
  auto model = Model::create({.in_dim = 2, .num_classes = 3, .layers = 1}, 5);
  const auto ctx = make_batch_from_nodes(ds.graph, {1});
  auto run = [&](const Tensor& feats) {
    const auto store = HistoryStore::init(feats, model.cache_dims());
    ad::Tape tape;
    return forward_batch(tape, model, ds.graph, ctx, store, cent, {}).output.value();
  };
  const Tensor out = run(ds.features);
  // hand trace: no in-batch neighbor, two frontier rows at zero staleness
  Tensor ends(2, 2, {1.0, 0.0, -1.0, 2.0});
  const std::vector<double> zeros{0.0, 0.0};
  const auto alpha = attention_out(ds.features.row(1), ends, zeros, zeros, cent.c_avg, 1, model.layer(0));
  const auto want = aggregate({}, alpha, Tensor(0, 2), ends, model.layer(0), 0.0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out[c], want[c], 1e-15);
  Tensor moved = ds.features;
  moved(0, 1) += 1.0;
  EXPECT_NE(run(moved), out);
}

TEST(ForwardBatch, ZeroCacheContributesNothingInSumMode) {
  auto fx = make_fixture(14, AugmentMode::none, MixMode::sum, 51);
  fx.store = HistoryStore::init(fx.ds.features, fx.model.cache_dims());
  const auto p = partition_greedy(fx.ds.graph, 3, 0);
  const std::vector<std::uint32_t> ids{0};
  const auto ctx = make_batch(p, ids, fx.ds.graph);
  ASSERT_FALSE(ctx.frontier.empty());
  ad::Tape tape;
  const auto fw = forward_batch(tape, fx.model, fx.ds.graph, ctx, fx.store, fx.cent, {});
  const auto live = detail::layer_step(tape, fx.model.layer(1), fx.model.spec(), 1, fw.hidden[1], ctx.in_offsets,
                                       ctx.in_src, detail::expand_targets(ctx.in_offsets), nullptr);
  EXPECT_EQ(fw.output.value(), live.h.value());
}

TEST(ForwardBatch, DimensionChainMismatch) {
  auto fx = make_fixture(8, AugmentMode::none, MixMode::mass, 61);
  const auto bad = HistoryStore::init(fx.ds.features, {3, 5});
  const auto ctx = make_batch_from_nodes(fx.ds.graph, {0, 1});
  ad::Tape tape;
  EXPECT_THROW(forward_batch(tape, fx.model, fx.ds.graph, ctx, bad, fx.cent, {}), ShapeError);
  const auto one = HistoryStore::init(fx.ds.features, {3});
  EXPECT_THROW(forward_batch(tape, fx.model, fx.ds.graph, ctx, one, fx.cent, {}), ShapeError);
}

TEST(ForwardBatch, GradientsMatchFiniteDifferences) {
  for (auto mode : {AugmentMode::concat, AugmentMode::summation})
    for (auto mix : {MixMode::mass, MixMode::sum}) {
      auto fx = make_fixture(6, mode, mix, 71);
      const auto ctx = make_batch_from_nodes(fx.ds.graph, {0, 2, 3});
      auto f = [&](ad::Tape& t) {
        const auto fw = forward_batch(t, fx.model, fx.ds.graph, ctx, fx.store, fx.cent, {.epoch = 2});
        return ad::cross_entropy(fw.output, {0, 1, 0}, {0, 1, 2});
      };
      const auto rep = ad::grad_check(f, fx.model.parameters(), 1e-6, 1e-5);
      EXPECT_TRUE(rep.passed) << to_string(mode) << "/" << to_string(mix) << " max rel " << rep.max_rel_error;
    }
}

TEST(ForwardBatch, EvictionDropsOverdueFrontierRows) {
  auto fx = make_fixture(12, AugmentMode::none, MixMode::mass, 81);
  const auto ctx = make_batch_from_nodes(fx.ds.graph, {0, 1, 2});
  ASSERT_FALSE(ctx.frontier.empty());
  fx.store.set_iteration(10);
  fx.store.set_g_thres(5);
  ad::Tape tape;
  const auto fw = forward_batch(tape, fx.model, fx.ds.graph, ctx, fx.store, fx.cent, {});
  EXPECT_EQ(fw.layers[0].retained, ctx.frontier.size());  // layer 0 never goes stale
  EXPECT_EQ(fw.layers[1].retained, 0u);
  EXPECT_FALSE(fw.layers[1].alpha_out.valid());
  const auto kept = forward_batch(tape, fx.model, fx.ds.graph, ctx, fx.store, fx.cent, {.evict = false});
  EXPECT_EQ(kept.layers[1].retained, ctx.frontier.size());
}

// ---------------------------------------------------------------------------
// Properties
// ---------------------------------------------------------------------------

TEST(Properties, AttentionSegmentsAreSimplices) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto fx = make_fixture(10 + seed, seed % 2 ? AugmentMode::concat : AugmentMode::summation, MixMode::mass, seed);
    const auto p = partition_greedy(fx.ds.graph, 3, seed);
    const std::vector<std::uint32_t> ids{static_cast<std::uint32_t>(seed % 3)};
    const auto ctx = make_batch(p, ids, fx.ds.graph);
    ad::Tape tape;
    const auto fw = forward_batch(tape, fx.model, fx.ds.graph, ctx, fx.store, fx.cent, {.epoch = 1});
    for (const auto& tr : fw.layers) {
      auto check = [](const ad::Var& a, const std::vector<std::size_t>& off) {
        if (!a.valid()) return;
        for (std::size_t s = 0; s + 1 < off.size(); ++s) {
          if (off[s] == off[s + 1]) continue;
          double sum = 0.0;
          for (std::size_t k = off[s]; k < off[s + 1]; ++k) {
            EXPECT_GE(a.value()[k], 0.0);
            EXPECT_LE(a.value()[k], 1.0);
            sum += a.value()[k];
          }
          EXPECT_NEAR(sum, 1.0, 1e-12);
        }
      };
      check(tr.alpha_in, tr.in_offsets);
      check(tr.alpha_out, tr.out_offsets);
    }
  }
}

TEST(Properties, StalenessMonotonicity) {
  std::mt19937_64 rng(91);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = make_params(3, 4, 200 + trial);
    const std::size_t k = 2 + trial % 5;
    const Tensor rows = oracle::random_tensor(k, 3, rng), hi = oracle::random_tensor(1, 3, rng);
    std::vector<double> s(k), c(k);
    for (std::size_t j = 0; j < k; ++j) s[j] = u(rng), c[j] = u(rng);
    const auto base = attention_out(hi.row(0), rows, s, c, 1.5, 1 + trial % 4, p);
    const std::size_t j = trial % k;
    s[j] += 0.5;
    const auto more = attention_out(hi.row(0), rows, s, c, 1.5, 1 + trial % 4, p);
    EXPECT_LT(more[j], base[j]);
    for (std::size_t q = 0; q < k; ++q) {
      if (q != j) {
        EXPECT_GE(more[q], base[q]);
      }
    }
  }
}

TEST(Properties, CentralityModulation) {
  std::mt19937_64 rng(92);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = make_params(3, 4, 300 + trial);
    const std::size_t k = 2 + trial % 5;
    const Tensor rows = oracle::random_tensor(k, 3, rng), hi = oracle::random_tensor(1, 3, rng);
    std::vector<double> s(k), c(k);
    for (std::size_t j = 0; j < k; ++j) s[j] = u(rng), c[j] = u(rng);
    const std::size_t j = trial % k;
    const auto base = attention_out(hi.row(0), rows, s, c, 1.5, 1, p);
    c[j] += 1.0;
    EXPECT_LT(attention_out(hi.row(0), rows, s, c, 1.5, 1, p)[j], base[j]);
  }
}

TEST(Properties, PenaltyDecaysTowardGat) {
  std::mt19937_64 rng(93);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 30; ++trial) {
    auto p = make_params(3, 4, 400 + trial, 0.5 + trial * 0.1);
    const std::size_t k = 2 + trial % 4;
    const Tensor rows = oracle::random_tensor(k, 3, rng), hi = oracle::random_tensor(1, 3, rng);
    std::vector<double> s(k), c(k);
    for (std::size_t j = 0; j < k; ++j) s[j] = u(rng), c[j] = u(rng);
    const auto gat = gat_coefficients(hi.row(0), rows, p);
    double prev = 1e300;
    for (int t : {1, 2, 4, 8, 16, 64, 1 << 20}) {
      const auto a = attention_out(hi.row(0), rows, s, c, 1.5, t, p);
      double dev = 0.0;
      for (std::size_t j = 0; j < k; ++j) dev += std::abs(a[j] - gat[j]);
      EXPECT_LE(dev, prev + 1e-15);
      prev = dev;
    }
    EXPECT_LT(prev, 1e-5);
  }
}
