#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "nimg/router.hpp"
#include "test_util.hpp"

using namespace nimg;
using nimg::testing::random_tensor;

namespace {

RouterConfig make_cfg(std::int64_t d, std::int64_t E, double C) {
  RouterConfig cfg;
  cfg.d_model = d;
  cfg.n_experts = E;
  cfg.capacity_factor = C;
  return cfg;
}

}  // namespace

TEST(Capacity, QuotedValues) {
  EXPECT_EQ(capacity_for(256, 64, 8.0), 32);
  EXPECT_EQ(capacity_for(1024, 64, 4.0), 64);
  EXPECT_EQ(capacity_for(5, 64, 8.0), 1);
}

TEST(Capacity, ClampedToSequence) {
  EXPECT_EQ(capacity_for(4, 2, 8.0), 4);
  EXPECT_EQ(capacity_for(16, 1, 1.0), 16);
  EXPECT_THROW(capacity_for(0, 4, 1.0), ConfigError);
  EXPECT_THROW(capacity_for(4, 4, 0.0), ConfigError);
}

TEST(CapacitySchedule, Tables) {
  EXPECT_EQ(capacity_schedule(3, StageId::S1024), 4.0);
  EXPECT_EQ(capacity_schedule(4, StageId::S1024), 4.0);
  EXPECT_EQ(capacity_schedule(17, StageId::S1024), 2.0);
  EXPECT_EQ(capacity_schedule(31, StageId::S1024), 2.0);
  EXPECT_EQ(capacity_schedule(17, StageId::S256), 8.0);
  EXPECT_EQ(capacity_schedule(17, StageId::S512), 4.0);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(capacity_schedule(l, StageId::S512), kDenseLayer);
  EXPECT_THROW(capacity_schedule(32, StageId::S256), IndexError);
  EXPECT_THROW(capacity_schedule(-1, StageId::S256), IndexError);
}

TEST(Route, ZeroWeightsSelectLowestIndices) {
  PrecisionScope p(Precision::F64);
  Rng rng(1);
  const std::int64_t d = 4, E = 4, S = 8;
  auto cfg = make_cfg(d, E, 2.0);
  auto dec = route(random_tensor({1, S, d}, rng), random_tensor({1, d}, rng), Tensor::zeros({2 * d, E}), cfg);
  ASSERT_EQ(dec.capacity, 4);
  for (std::int64_t e = 0; e < E; ++e)
    for (std::int64_t k = 0; k < dec.capacity; ++k) {
      EXPECT_EQ(dec.index(0, e, k), k);
      EXPECT_DOUBLE_EQ(dec.affinity[static_cast<std::size_t>(e * dec.capacity + k)], 0.25);
    }
}

TEST(Route, FullCapacityEveryTokenByBothExperts) {
  PrecisionScope p(Precision::F64);
  Rng rng(2);
  const std::int64_t d = 3;
  auto cfg = make_cfg(d, 2, 2.0);
  auto dec = route(random_tensor({1, 4, d}, rng), random_tensor({1, d}, rng), random_tensor({2 * d, 2}, rng), cfg);
  ASSERT_EQ(dec.capacity, 4);
  std::vector<double> gate_sum(4, 0.0);
  for (std::int64_t e = 0; e < 2; ++e) {
    std::set<std::int64_t> seen;
    for (std::int64_t k = 0; k < 4; ++k) {
      seen.insert(dec.index(0, e, k));
      gate_sum[static_cast<std::size_t>(dec.index(0, e, k))] += dec.gates.at(e * 4 + k);
    }
    EXPECT_EQ(seen.size(), 4u);
  }
  // Softmax over two experts sums to one per token, so gates sum to 1/(1+eps).
  for (double g : gate_sum) EXPECT_NEAR(g, 1.0 / (1.0 + 1e-6), 1e-12);
}

TEST(Route, ExactUtilizationAndDistinctRows) {
  PrecisionScope p(Precision::F64);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t S = 1 + static_cast<std::int64_t>(rng.index(24));
    const std::int64_t E = 1 + static_cast<std::int64_t>(rng.index(8));
    const double C = 0.25 * static_cast<double>(1 + rng.index(32));
    const std::int64_t d = 3, B = 2;
    auto cfg = make_cfg(d, E, C);
    auto dec = route(random_tensor({B, S, d}, rng), random_tensor({B, d}, rng), random_tensor({2 * d, E}, rng), cfg);
    ASSERT_EQ(dec.capacity, capacity_for(S, E, C));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t e = 0; e < E; ++e) {
        std::set<std::int64_t> seen;
        for (std::int64_t k = 0; k < dec.capacity; ++k) {
          const auto t = dec.index(b, e, k);
          ASSERT_GE(t, 0);
          ASSERT_LT(t, S);
          seen.insert(t);
        }
        ASSERT_EQ(static_cast<std::int64_t>(seen.size()), dec.capacity);
      }
  }
}

TEST(Route, SelectionMatchesFullSortOracle) {
  PrecisionScope p(Precision::F64);
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t S = 2 + static_cast<std::int64_t>(rng.index(12)), E = 3, d = 2;
    auto cfg = make_cfg(d, E, 1.5);
    // Quantized weights create tied scores.
    std::vector<double> w(static_cast<std::size_t>(2 * d * E));
    for (auto& v : w) v = static_cast<double>(rng.index(3)) - 1.0;
    std::vector<double> x(static_cast<std::size_t>(S * d));
    for (auto& v : x) v = static_cast<double>(rng.index(2));
    auto dec = route(Tensor({1, S, d}, x), Tensor::zeros({1, d}), Tensor({2 * d, E}, w), cfg);
    Tensor scores = ops::softmax_last(dec.logits);
    for (std::int64_t e = 0; e < E; ++e) {
      std::vector<std::int64_t> order(static_cast<std::size_t>(S));
      for (std::int64_t s = 0; s < S; ++s) order[static_cast<std::size_t>(s)] = s;
      std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return scores.at(a * E + e) > scores.at(b * E + e);
      });
      for (std::int64_t k = 0; k < dec.capacity; ++k) {
        EXPECT_EQ(dec.index(0, e, k), order[static_cast<std::size_t>(k)]);
        EXPECT_EQ(dec.affinity[static_cast<std::size_t>(e * dec.capacity + k)],
                  scores.at(order[static_cast<std::size_t>(k)] * E + e));
      }
    }
  }
}

TEST(Route, GateNormalizationIdentity) {
  PrecisionScope p(Precision::F64);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t S = 10, E = 4, d = 3;
    auto cfg = make_cfg(d, E, 2.0);
    cfg.gate_scale = 0.5 + rng.uniform();
    auto dec = route(random_tensor({1, S, d}, rng), random_tensor({1, d}, rng), random_tensor({2 * d, E}, rng), cfg);
    std::vector<double> total(S, 0.0), gsum(S, 0.0);
    for (std::int64_t e = 0; e < E; ++e)
      for (std::int64_t k = 0; k < dec.capacity; ++k) {
        const auto slot = static_cast<std::size_t>(e * dec.capacity + k);
        total[static_cast<std::size_t>(dec.index(0, e, k))] += dec.affinity[slot];
        gsum[static_cast<std::size_t>(dec.index(0, e, k))] += dec.gates.at(static_cast<std::int64_t>(slot)) / cfg.gate_scale;
      }
    for (std::int64_t s = 0; s < S; ++s) {
      const double a = total[static_cast<std::size_t>(s)];
      EXPECT_NEAR(gsum[static_cast<std::size_t>(s)], a > 0 ? a / (a + cfg.gate_eps) : 0.0, 1e-12);
    }
  }
}

TEST(Route, TimestepSensitivity) {
  PrecisionScope p(Precision::F64);
  // With two experts a timestep shift adds the same constant to every token's
  // logit gap, which keeps each expert's ranking; three experts are needed.
  const std::int64_t d = 3, E = 3, S = 2;
  auto cfg = make_cfg(d, E, 1.0);
  Tensor xn({1, S, d}, {1, 0, 0, 0, 1, 0});
  // Token 0 logits (10,10,0), token 1 logits (10,0,11); t_emb[0] adds 3 to expert 1.
  Tensor w({2 * d, E}, {10, 10, 0, 10, 0, 11, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0});
  auto a = route(xn, Tensor({1, d}, {0, 0, 0}), w, cfg);
  auto b = route(xn, Tensor({1, d}, {1, 0, 0}), w, cfg);
  ASSERT_EQ(a.capacity, 1);
  EXPECT_EQ(a.index(0, 0, 0), 0);
  EXPECT_EQ(b.index(0, 0, 0), 1);
}

TEST(Route, Deterministic) {
  Rng rng(6);
  auto cfg = make_cfg(4, 4, 2.0);
  Tensor x = random_tensor({2, 9, 4}, rng), t = random_tensor({2, 4}, rng), w = random_tensor({8, 4}, rng);
  auto a = route(x, t, w, cfg);
  auto b = route(x, t, w, cfg);
  EXPECT_EQ(a.top_indices, b.top_indices);
  EXPECT_EQ(a.affinity, b.affinity);
  for (std::int64_t i = 0; i < a.gates.numel(); ++i) EXPECT_EQ(a.gates.at(i), b.gates.at(i));
}

TEST(Route, ShapeErrors) {
  auto cfg = make_cfg(4, 4, 2.0);
  EXPECT_THROW(route(Tensor::zeros({1, 3, 4}), Tensor::zeros({1, 4}), Tensor::zeros({4, 4}), cfg), ShapeError);
  EXPECT_THROW(route(Tensor::zeros({1, 3, 4}), Tensor::zeros({2, 4}), Tensor::zeros({8, 4}), cfg), ShapeError);
  cfg.gate_eps = 0.0;
  EXPECT_THROW(route(Tensor::zeros({1, 3, 4}), Tensor::zeros({1, 4}), Tensor::zeros({8, 4}), cfg), ConfigError);
}

TEST(Route, GradientsThroughGatesAndLogits) {
  PrecisionScope p(Precision::F64);
  Rng rng(7);
  const std::int64_t d = 3, E = 3, S = 6;
  auto cfg = make_cfg(d, E, 1.5);
  cfg.gate_scale = 1.3;
  Tensor x = random_tensor({2, S, d}, rng), t = random_tensor({2, d}, rng), w = random_tensor({2 * d, E}, rng);
  Tensor pg = random_tensor({2, E, capacity_for(S, E, 1.5)}, rng);
  Tensor pl = random_tensor({2, S, E}, rng);
  // The selection is piecewise constant; the checked function keeps it fixed
  // by routing once and recomputing gates from the same indices.
  auto base = route(x, t, w, cfg);
  auto fn = [&] {
    Tensor ri = ops::concat({x, ops::broadcast_seq(t, S)}, 2);
    Tensor logits = ops::reshape(ops::matmul(ops::reshape(ri, {2 * S, 2 * d}), w), {2, S, E});
    Tensor gates = expert_choice_gates(ops::softmax_last(logits), base.top_indices, base.capacity, cfg.gate_scale, cfg.gate_eps);
    return ops::add(ops::sum(ops::mul(gates, pg)), ops::sum(ops::mul(logits, pl)));
  };
  auto rep = grad_check_params(fn, {x, t, w}, 1e-3, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}
