#include <gtest/gtest.h>

#include <cmath>

#include "nimg/kernels.hpp"
#include "nimg/moe.hpp"
#include "test_util.hpp"

using namespace nimg;
using nimg::testing::max_abs_diff;
using nimg::testing::max_rel_diff;
using nimg::testing::random_bank;
using nimg::testing::random_tensor;

namespace {

RouterConfig make_cfg(std::int64_t d, std::int64_t E, double C) {
  RouterConfig cfg;
  cfg.d_model = d;
  cfg.n_experts = E;
  cfg.capacity_factor = C;
  return cfg;
}

Tensor expert_slice(const Tensor& w, std::int64_t e) {
  return ops::reshape(ops::slice(w, 0, e, 1), {w.dim(1), w.dim(2)});
}

}  // namespace

TEST(SwiGLU, ZeroInput) {
  Rng rng(1);
  Tensor y = swiglu(Tensor::zeros({3, 4}), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), random_tensor({4, 6}, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(SwiGLU, ScalarReduction) {
  PrecisionScope p(Precision::F64);
  const double x = 0.7;
  Tensor y = swiglu(Tensor({1, 1}, {x}), Tensor({1, 1}, {1}), Tensor({1, 1}, {1}), Tensor({1, 1}, {1}));
  EXPECT_NEAR(y.item(), x / (1 + std::exp(-x)) * x, 1e-15);
}

TEST(SwiGLU, FusedMatchesComposed) {
  PrecisionScope p(Precision::F64);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({8, 4}, rng), w1 = random_tensor({6, 4}, rng), w3 = random_tensor({6, 4}, rng),
           w2 = random_tensor({4, 6}, rng);
    EXPECT_LE(max_rel_diff(swiglu(x, w1, w3, w2), swiglu_composed(x, w1, w3, w2)), 1e-6);
  }
  EXPECT_THROW(swiglu(Tensor::zeros({2, 4}), Tensor::zeros({6, 3}), Tensor::zeros({6, 3}), Tensor::zeros({3, 6})), ShapeError);
}

TEST(SwiGLU, GradientMatchesFiniteDifferences) {
  PrecisionScope p(Precision::F64);
  Rng rng(3);
  Tensor x = random_tensor({5, 4}, rng), w1 = random_tensor({6, 4}, rng), w3 = random_tensor({6, 4}, rng),
         w2 = random_tensor({4, 6}, rng), proj = random_tensor({5, 4}, rng);
  auto rep = grad_check_params([&] { return ops::sum(ops::mul(swiglu(x, w1, w3, w2), proj)); }, {x, w1, w3, w2}, 1e-3, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Grouped, IdenticalExpertsGiveIdenticalRows) {
  PrecisionScope p(Precision::F64);
  Rng rng(4);
  ExpertBank bank = random_bank(1, 4, 6, 6, rng);
  bank.w1 = ops::concat({bank.w1, bank.w1}, 0);
  bank.w3 = ops::concat({bank.w3, bank.w3}, 0);
  bank.w2 = ops::concat({bank.w2, bank.w2}, 0);
  Tensor row = random_tensor({1, 4}, rng);
  GroupedBatch batch{ops::concat({row, row}, 0), {0, 1, 2}};
  Tensor y = grouped_forward(batch, bank);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(y.at(c), y.at(4 + c));
}

TEST(Grouped, EmptySegment) {
  PrecisionScope p(Precision::F64);
  Rng rng(5);
  ExpertBank bank = random_bank(2, 4, 6, 6, rng);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor y = grouped_forward({x, {0, 0, 5}}, bank);
  Tensor expect = swiglu_composed(x, expert_slice(bank.w1, 1), expert_slice(bank.w3, 1), expert_slice(bank.w2, 1));
  EXPECT_LE(max_rel_diff(y, expect), 1e-12);
}

TEST(Grouped, MatchesPerExpertLoop) {
  PrecisionScope p(Precision::F64);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t E = 1 + static_cast<std::int64_t>(rng.index(5));
    ExpertBank bank = random_bank(E, 4, 5, 5, rng);
    std::vector<std::int64_t> offsets{0};
    for (std::int64_t e = 0; e < E; ++e) offsets.push_back(offsets.back() + static_cast<std::int64_t>(rng.index(4)));
    GroupedBatch batch{random_tensor({offsets.back(), 4}, rng), offsets};
    Tensor a = grouped_forward(batch, bank);
    Tensor b = grouped_forward_reference(batch, bank);
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_LE(max_rel_diff(a, b), 1e-6);
  }
}

TEST(Grouped, BadOffsets) {
  Rng rng(7);
  ExpertBank bank = random_bank(2, 4, 5, 5, rng);
  EXPECT_THROW(grouped_forward({Tensor::zeros({3, 4}), {0, 2}}, bank), ShapeError);
  EXPECT_THROW(grouped_forward({Tensor::zeros({3, 4}), {0, 2, 1}}, bank), ShapeError);
  EXPECT_THROW(grouped_forward({Tensor::zeros({3, 4}), {0, 1, 2}}, bank), ShapeError);
}

TEST(Grouped, GradientMatchesFiniteDifferences) {
  PrecisionScope p(Precision::F64);
  Rng rng(8);
  ExpertBank bank = random_bank(3, 4, 5, 5, rng);
  GroupedBatch batch{random_tensor({7, 4}, rng), {0, 3, 3, 7}};
  Tensor proj = random_tensor({7, 4}, rng);
  auto rep = grad_check_params([&] { return ops::sum(ops::mul(grouped_forward(batch, bank), proj)); },
                               {batch.tokens, bank.w1, bank.w3, bank.w2}, 1e-3, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Grouped, SerialAndParallelBitwiseEqual) {
  PrecisionScope p(Precision::F64);
  Rng rng(9);
  ExpertBank bank = random_bank(4, 8, 16, 16, rng);
  GroupedBatch batch{random_tensor({40, 8}, rng, 1.0, true), {0, 10, 10, 25, 40}};
  Tensor proj = random_tensor({40, 8}, rng);
  auto run = [&](kernels::Exec exec) {
    kernels::ExecScope scope(exec);
    Tape::Scope tape;
    batch.tokens.zero_grad();
    Tensor y = grouped_forward(batch, bank);
    backward(ops::sum(ops::mul(y, proj)));
    return std::make_pair(std::vector<double>(y.data().begin(), y.data().end()),
                          std::vector<double>(batch.tokens.grad().begin(), batch.tokens.grad().end()));
  };
  EXPECT_EQ(run(kernels::Exec::Serial), run(kernels::Exec::Parallel));
}

TEST(MoeForward, ZeroExpertsGiveSharedOutput) {
  PrecisionScope p(Precision::F64);
  Rng rng(10);
  const std::int64_t d = 4, E = 3, S = 6;
  ExpertBank bank = random_bank(E, d, 5, 5, rng);
  bank.w1 = Tensor::zeros(bank.w1.shape());
  bank.w3 = Tensor::zeros(bank.w3.shape());
  bank.w2 = Tensor::zeros(bank.w2.shape());
  Tensor xn = random_tensor({2, S, d}, rng), xm = random_tensor({2, S, d}, rng);
  auto res = moe_forward(xn, xm, random_tensor({2, d}, rng), random_tensor({2 * d, E}, rng), make_cfg(d, E, 2.0), bank);
  Tensor shared = swiglu(ops::reshape(xm, {2 * S, d}), bank.shared_w1, bank.shared_w3, bank.shared_w2);
  for (std::int64_t i = 0; i < shared.numel(); ++i) EXPECT_EQ(res.out.at(i), shared.at(i));
}

TEST(MoeForward, SingleExpertFullCapacity) {
  PrecisionScope p(Precision::F64);
  Rng rng(11);
  const std::int64_t d = 4, S = 5;
  ExpertBank bank = random_bank(1, d, 5, 5, rng);
  Tensor xn = random_tensor({1, S, d}, rng), xm = random_tensor({1, S, d}, rng);
  auto cfg = make_cfg(d, 1, 1.0);
  auto res = moe_forward(xn, xm, random_tensor({1, d}, rng), random_tensor({2 * d, 1}, rng), cfg, bank);
  Tensor flat = ops::reshape(xm, {S, d});
  Tensor shared = swiglu_composed(flat, bank.shared_w1, bank.shared_w3, bank.shared_w2);
  Tensor expert = swiglu_composed(flat, expert_slice(bank.w1, 0), expert_slice(bank.w3, 0), expert_slice(bank.w2, 0));
  // Softmax over one expert is 1, so every gate is alpha / (1 + eps).
  const double gate = 1.0 / (1.0 + cfg.gate_eps);
  for (std::int64_t i = 0; i < flat.numel(); ++i)
    EXPECT_NEAR(res.out.at(i), shared.at(i) + gate * expert.at(i), 1e-12);
}

TEST(MoeForward, ForcedZeroGates) {
  PrecisionScope p(Precision::F64);
  Rng rng(12);
  const std::int64_t d = 4, E = 2, S = 6;
  ExpertBank bank = random_bank(E, d, 5, 5, rng);
  Tensor xn = random_tensor({1, S, d}, rng), xm = random_tensor({1, S, d}, rng);
  auto dec = route(xn, random_tensor({1, d}, rng), random_tensor({2 * d, E}, rng), make_cfg(d, E, 2.0));
  dec.gates = Tensor::zeros(dec.gates.shape());
  Tensor out = moe_combine(xm, dec, bank);
  Tensor shared = swiglu(ops::reshape(xm, {S, d}), bank.shared_w1, bank.shared_w3, bank.shared_w2);
  for (std::int64_t i = 0; i < shared.numel(); ++i) EXPECT_EQ(out.at(i), shared.at(i));
}

TEST(MoeForward, MatchesDenseBookkeepingOracle) {
  PrecisionScope p(Precision::F64);
  Rng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t d = 3, B = 2;
    const std::int64_t S = 1 + static_cast<std::int64_t>(rng.index(16));
    const std::int64_t E = 1 + static_cast<std::int64_t>(rng.index(4));
    const double C = 0.5 + rng.uniform() * 2.0;
    ExpertBank bank = random_bank(E, d, 4, 5, rng);
    Tensor xn = random_tensor({B, S, d}, rng), xm = random_tensor({B, S, d}, rng);
    auto res = moe_forward(xn, xm, random_tensor({B, d}, rng), random_tensor({2 * d, E}, rng), make_cfg(d, E, C), bank);
    const auto& dec = res.decision;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t s = 0; s < S; ++s) {
        Tensor tok = ops::reshape(ops::slice(ops::slice(xm, 0, b, 1), 1, s, 1), {1, d});
        Tensor expect = swiglu_composed(tok, bank.shared_w1, bank.shared_w3, bank.shared_w2);
        for (std::int64_t e = 0; e < E; ++e)
          for (std::int64_t k = 0; k < dec.capacity; ++k)
            if (dec.index(b, e, k) == s) {
              const double g = dec.gates.at((b * E + e) * dec.capacity + k);
              Tensor ex = swiglu_composed(tok, expert_slice(bank.w1, e), expert_slice(bank.w3, e), expert_slice(bank.w2, e));
              expect = ops::add(expect, ops::scale(ex, g));
            }
        for (std::int64_t c = 0; c < d; ++c) {
          const double got = res.out.at((b * S + s) * d + c);
          EXPECT_TRUE(std::isfinite(got));
          EXPECT_NEAR(got, expect.at(c), 1e-6);
        }
      }
  }
}

TEST(MoeForward, BatchPermutationEquivariance) {
  PrecisionScope p(Precision::F64);
  Rng rng(14);
  const std::int64_t d = 4, E = 3, S = 7;
  ExpertBank bank = random_bank(E, d, 5, 5, rng);
  Tensor w = random_tensor({2 * d, E}, rng);
  auto cfg = make_cfg(d, E, 1.5);
  Tensor xn = random_tensor({3, S, d}, rng), xm = random_tensor({3, S, d}, rng), t = random_tensor({3, d}, rng);
  auto perm = [](const Tensor& x) {
    return ops::concat({ops::slice(x, 0, 2, 1), ops::slice(x, 0, 0, 1), ops::slice(x, 0, 1, 1)}, 0);
  };
  Tensor a = perm(moe_forward(xn, xm, t, w, cfg, bank).out);
  Tensor b = moe_forward(perm(xn), perm(xm), perm(t), w, cfg, bank).out;
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(MoeForward, DecoupledFromModulationScale) {
  PrecisionScope p(Precision::F64);
  Rng rng(15);
  const std::int64_t d = 4, E = 4, S = 8;
  ExpertBank bank = random_bank(E, d, 5, 5, rng);
  Tensor w = random_tensor({2 * d, E}, rng);
  Tensor xn = random_tensor({1, S, d}, rng), t = random_tensor({1, d}, rng), s2 = random_tensor({1, S, d}, rng);
  Tensor one_plus = ops::add_scalar(s2, 1.0);
  auto a = moe_forward(xn, ops::mul(xn, one_plus), t, w, make_cfg(d, E, 2.0), bank);
  auto b = moe_forward(xn, ops::mul(xn, ops::scale(one_plus, 10.0)), t, w, make_cfg(d, E, 2.0), bank);
  EXPECT_EQ(a.decision.top_indices, b.decision.top_indices);
  for (std::int64_t i = 0; i < a.decision.gates.numel(); ++i) EXPECT_EQ(a.decision.gates.at(i), b.decision.gates.at(i));
  EXPECT_GT(max_abs_diff(a.out, b.out), 1e-6);
}

TEST(MoeForward, GradientMatchesFiniteDifferences) {
  PrecisionScope p(Precision::F64);
  Rng rng(16);
  const std::int64_t d = 3, E = 3, S = 5;
  ExpertBank bank = random_bank(E, d, 4, 4, rng);
  Tensor w = random_tensor({2 * d, E}, rng), xn = random_tensor({1, S, d}, rng), xm = random_tensor({1, S, d}, rng),
         t = random_tensor({1, d}, rng), proj = random_tensor({1, S, d}, rng);
  auto cfg = make_cfg(d, E, 1.5);
  auto fn = [&] { return ops::sum(ops::mul(moe_forward(xn, xm, t, w, cfg, bank).out, proj)); };
  auto rep = grad_check_params(fn, {xm, bank.w1, bank.w3, bank.w2, bank.shared_w1, bank.shared_w2, w, t}, 1e-4, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst_index;
}
