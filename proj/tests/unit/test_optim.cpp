#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "nimg/backbone.hpp"
#include "nimg/optim.hpp"
#include "test_util.hpp"

using namespace nimg;
using nimg::testing::random_tensor;

namespace {

Eigen::MatrixXd to_eigen(const std::vector<double>& v, std::int64_t rows, std::int64_t cols) {
  Eigen::MatrixXd m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) m(i, j) = v[static_cast<std::size_t>(i * cols + j)];
  return m;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("nimg_test_" + name);
}

// Random (rows, cols) matrix with singular values spread over [1, cond].
std::vector<double> conditioned(std::int64_t r, std::int64_t c, double cond, Rng& rng) {
  auto random = [&](std::int64_t n) {
    Eigen::MatrixXd m(n, n);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) m(i, j) = rng.normal();
    return Eigen::MatrixXd(Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ());
  };
  const std::int64_t k = std::min(r, c);
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(r, c);
  for (std::int64_t i = 0; i < k; ++i) s(i, i) = 1.0 + (cond - 1.0) * rng.uniform();
  Eigen::MatrixXd m = random(r) * s * random(c).transpose();
  std::vector<double> out(static_cast<std::size_t>(r * c));
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] = m(i, j);
  return out;
}

}  // namespace

TEST(NewtonSchulz, SingularValuesNearOne) {
  // The quintic coefficients trade exact convergence for speed: singular
  // values settle in a band around 1 (about [0.68, 1.13]) rather than at 1.
  Rng rng(1);
  for (auto [r, c] : {std::pair{4, 4}, std::pair{6, 3}, std::pair{3, 8}, std::pair{16, 16}}) {
    for (int trial = 0; trial < 10; ++trial) {
      auto m = conditioned(r, c, 10.0, rng);
      auto out = newton_schulz(m, r, c);
      ASSERT_EQ(out.size(), m.size());
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(out, r, c));
      for (int i = 0; i < svd.singularValues().size(); ++i) {
        EXPECT_GE(svd.singularValues()(i), 0.65) << r << "x" << c;
        EXPECT_LE(svd.singularValues()(i), 1.2) << r << "x" << c;
      }
    }
  }
}

TEST(NewtonSchulz, Anchors) {
  const double th = 0.3;
  std::vector<double> rot{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
  auto o = newton_schulz(rot, 2, 2);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(o[i], rot[i], 0.35);
  auto d = newton_schulz(std::vector<double>{10, 0, 0, 0.1}, 2, 2);
  EXPECT_NEAR(d[0], 1.0, 0.35);
  EXPECT_NEAR(d[3], 1.0, 0.35);
  EXPECT_NEAR(d[1], 0.0, 1e-12);
  Rng rng(2);
  std::vector<double> tall(8);
  for (auto& v : tall) v = rng.normal();
  auto t = to_eigen(newton_schulz(tall, 4, 2), 4, 2);
  EXPECT_LE(((t.transpose() * t) - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.6);
  auto z = newton_schulz(std::vector<double>(6, 0.0), 2, 3);
  for (double v : z) EXPECT_EQ(v, 0.0);
}

TEST(NewtonSchulz, RotationIsNearFixedPoint) {
  // The quintic iteration trades exactness for speed: an orthogonal input maps
  // to a scalar multiple of itself whose factor is the polynomial at 1.
  const double th = 1.1;
  std::vector<double> rot{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
  auto o = newton_schulz(rot, 2, 2);
  const double f = o[0] / rot[0];
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(o[i], f * rot[i], 1e-12);
  EXPECT_NEAR(f, 1.0, 0.35);
}

TEST(Groups, ClassificationAndPartition) {
  Model m(ModelConfig{}, 1);
  auto groups = build_groups(m.params(), OptimConfig{});
  ASSERT_EQ(groups.size(), 3u);
  EXPECT_EQ(classify_param("blocks.0.attn.q.weight", {8, 8}), GroupKind::Muon);
  EXPECT_EQ(classify_param("blocks.4.moe.experts.w1", {4, 8, 8}), GroupKind::Muon);
  EXPECT_EQ(classify_param("patch_embed.weight", {8, 16}), GroupKind::AdamW);
  EXPECT_EQ(classify_param("blocks.1.img_mod.weight", {32, 8}), GroupKind::AdamW);
  EXPECT_EQ(classify_param("patch_embed.bias", {8}), GroupKind::AdamWNoDecay);
  EXPECT_EQ(classify_param("blocks.4.moe.router.gate", {16, 4}), GroupKind::AdamWNoDecay);
  EXPECT_THROW(classify_param("mystery.weight", {3, 3}), GroupError);
  EXPECT_EQ(groups[2].weight_decay, 0.0);
  std::size_t total = 0;
  for (const auto& g : groups) total += g.members.size();
  EXPECT_EQ(total, m.params().size());

  const auto manifest = groups_manifest(groups, m.params());
  EXPECT_NE(manifest.find("blocks.3.moe.router.gate,\"(64,4)\",adamw_nodecay"), std::string::npos);

  groups[0].members.push_back("patch_embed.bias");
  EXPECT_THROW(check_partition(groups, m.params()), GroupError);
}

TEST(Muon, DecayOnlyWithZeroGradient) {
  ParamStore ps;
  ps.add("blocks.0.attn.q.weight", Tensor({2, 2}, {1, 2, 3, 4}, true));
  Optimizer opt(build_groups(ps, {}), {});
  opt.step(ps, 0.1);
  const auto d = ps.at("blocks.0.attn.q.weight").data();
  EXPECT_NEAR(d[0], store(1 * (1 - 0.1 * 0.01)), 1e-7);
  EXPECT_NEAR(d[3], store(4 * (1 - 0.1 * 0.01)), 1e-6);
}

TEST(Muon, MomentumRecurrence) {
  PrecisionScope p(Precision::F64);
  ParamStore ps;
  Tensor w = ps.add("blocks.0.ffn.w1", Tensor({2, 3}, {1, 0, 0, 0, 1, 0}, true));
  Optimizer opt(build_groups(ps, {}), {});
  const std::vector<double> g{0.5, -1, 2, 0.1, 0.3, -0.2};
  for (int s = 0; s < 2; ++s) {
    w.grad_mut();
    std::copy(g.begin(), g.end(), w.grad_mut().begin());
    if (s == 1) {
      for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(opt.muon_buffer("blocks.0.ffn.w1")[i], g[i], 1e-15);
    }
    opt.step(ps, 1e-3);
  }
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(opt.muon_buffer("blocks.0.ffn.w1")[i], g[i] * 1.95, 1e-12);
}

TEST(Muon, UpdateRmsMatchesScale) {
  PrecisionScope p(Precision::F64);
  Rng rng(3);
  for (auto [r, c] : {std::pair{8, 8}, std::pair{16, 4}, std::pair{4, 32}}) {
    ParamStore ps;
    Tensor w = ps.add("blocks.0.attn.o.weight", random_tensor({r, c}, rng, 1.0, true));
    const std::vector<double> before(w.data().begin(), w.data().end());
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    Optimizer opt(build_groups(ps, cfg), cfg);
    auto g = w.grad_mut();
    for (auto& v : g) v = rng.normal();
    const double lr = 1e-3;
    opt.step(ps, lr);
    double ss = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) ss += std::pow(w.data()[i] - before[i], 2);
    const double rms = std::sqrt(ss / static_cast<double>(before.size()));
    const double ratio = rms / (0.2 * lr);
    EXPECT_GE(ratio, 0.5) << r << "x" << c;
    EXPECT_LE(ratio, 2.0) << r << "x" << c;
  }
}

TEST(Muon, RejectsVectors) {
  ParamStore ps;
  ps.add("blocks.0.attn.q.weight", Tensor({2}, {1, 2}, true));
  std::vector<ParamGroup> groups{{GroupKind::Muon, {"blocks.0.attn.q.weight"}, 0.0}};
  Optimizer opt(groups, {});
  EXPECT_THROW(opt.step(ps, 0.1), GroupError);
  EXPECT_THROW(check_partition(groups, ps), GroupError);
}

TEST(AdamW, FirstStepAndNoDecay) {
  PrecisionScope p(Precision::F64);
  ParamStore ps;
  Tensor w = ps.add("patch_embed.weight", Tensor({1, 2}, {1.0, -2.0}, true));
  Tensor gate = ps.add("blocks.3.moe.router.gate", Tensor({2, 2}, {1, 2, 3, 4}, true));
  Tensor bias = ps.add("patch_embed.bias", Tensor({2}, {0.5, 0.5}, true));
  OptimConfig cfg;
  Optimizer opt(build_groups(ps, cfg), cfg);
  auto g = w.grad_mut();
  g[0] = 0.3;
  g[1] = -4.0;
  opt.step(ps, 0.01);
  // Step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps) after decay.
  EXPECT_NEAR(w.data()[0], 1.0 * (1 - 0.01 * 0.01) - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w.data()[1], -2.0 * (1 - 0.01 * 0.01) + 0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  for (int s = 0; s < 100; ++s) {
    w.zero_grad();
    opt.step(ps, 0.01);
  }
  EXPECT_EQ(gate.data()[3], 4.0);
  EXPECT_EQ(bias.data()[0], 0.5);
}

TEST(Schedule, WarmupThenFlat) {
  EXPECT_EQ(wsm_lr(0, 1000, 1e-4), 0.0);
  EXPECT_DOUBLE_EQ(wsm_lr(500, 1000, 1e-4), 5e-5);
  EXPECT_EQ(wsm_lr(1000, 1000, 1e-4), 1e-4);
  EXPECT_EQ(wsm_lr(1000000, 1000, 1e-4), 1e-4);
}

TEST(Merge, Weights) {
  auto g = merge_weights({MergeProfile::Geometric, 3, 0.9});
  ASSERT_EQ(g.size(), 3u);
  EXPECT_NEAR(g[0], 0.81, 1e-15);
  EXPECT_NEAR(g[1], 0.09, 1e-15);
  EXPECT_NEAR(g[2], 0.10, 1e-15);
  for (auto profile : {MergeProfile::Geometric, MergeProfile::InvSqrt, MergeProfile::Mean}) {
    auto c = merge_weights({profile, 16, 0.97});
    double s = 0.0;
    for (double v : c) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto m = merge_weights({MergeProfile::Mean, 4, 0});
  for (double v : m) EXPECT_EQ(v, 0.25);
  auto inv = merge_weights({MergeProfile::InvSqrt, 16, 0});
  for (std::size_t j = 1; j < inv.size(); ++j) EXPECT_LT(inv[j], inv[j - 1]);
  EXPECT_NEAR(inv[4] / inv[0], 1.0 - std::sqrt(4.0 / 16.0), 1e-15);
  EXPECT_THROW(merge_weights({MergeProfile::Mean, 0, 0}), ConfigError);
  EXPECT_THROW(parse_merge_profile("median"), ConfigError);
}

TEST(Merge, EffectiveLrIdentity) {
  for (double beta : {0.9, 0.99, 0.9999}) {
    const std::int64_t k = 20;
    auto c = merge_weights({MergeProfile::Geometric, k + 1, beta});
    auto w = effective_lr_profile(c);
    EXPECT_NEAR(w[0], 1.0, 1e-12);
    for (std::int64_t j = 1; j <= k; ++j)
      EXPECT_NEAR(w[static_cast<std::size_t>(j)], 1.0 - std::pow(beta, static_cast<double>(k - j + 1)), 1e-12);
    if (beta == 0.9999) EXPECT_NEAR(w.back(), 1e-4, 1e-12);
  }
}

TEST(Merge, CheckpointAverages) {
  PrecisionScope p(Precision::F64);
  Rng rng(4);
  CheckpointSet set;
  for (int s = 0; s < 4; ++s) {
    ParamStore ps;
    ps.add("a", random_tensor({2, 3}, rng));
    ps.add("b", random_tensor({4}, rng));
    set.steps.push_back(s * 10);
    set.snapshots.push_back(std::move(ps));
  }
  auto mean = merge_checkpoints(set, {MergeProfile::Mean, 2, 0});
  for (int i = 0; i < 6; ++i)
    EXPECT_NEAR(mean.at("a").at(i), (set.snapshots[2].at("a").at(i) + set.snapshots[3].at("a").at(i)) / 2, 1e-15);

  CheckpointSet same;
  for (int s = 0; s < 3; ++s) {
    same.steps.push_back(s);
    same.snapshots.push_back(set.snapshots[0].clone());
  }
  auto merged = merge_checkpoints(same, {MergeProfile::Mean, 3, 0});
  EXPECT_EQ(merged.at("b").at(2), set.snapshots[0].at("b").at(2));

  set.snapshots[1].at("a") = Tensor::zeros({3, 2});
  EXPECT_THROW(merge_checkpoints(set, {MergeProfile::Mean, 2, 0}), CorruptCheckpoint);
  set.snapshots[1].at("a") = Tensor::zeros({2, 3});
  set.steps[2] = 5;
  EXPECT_THROW(merge_checkpoints(set, {MergeProfile::Mean, 2, 0}), CorruptCheckpoint);
  set.steps[2] = 20;
  EXPECT_THROW(merge_checkpoints(set, {MergeProfile::Mean, 5, 0}), ConfigError);
}

TEST(Merge, GeometricEqualsOnlineEma) {
  PrecisionScope p(Precision::F64);
  Rng rng(5);
  const double beta = 0.95;
  const int k = 60;
  ParamStore theta;
  theta.add("w", random_tensor({3, 3}, rng));
  CheckpointSet set;
  set.steps.push_back(0);
  set.snapshots.push_back(theta.clone());
  OnlineEma ema(theta, beta);
  for (int s = 1; s <= k; ++s) {
    for (auto& v : theta.at("w").data_mut()) v += 0.1 * rng.normal();
    ema.update(theta);
    set.steps.push_back(s);
    set.snapshots.push_back(theta.clone());
  }
  auto merged = merge_checkpoints(set, {MergeProfile::Geometric, k + 1, beta});
  const auto& e = ema.values().at("w");
  for (std::size_t i = 0; i < e.size(); ++i)
    EXPECT_LE(std::abs(merged.at("w").at(static_cast<std::int64_t>(i)) - e[i]), 1e-12 * std::max(1.0, std::abs(e[i])));
}

TEST(Checkpoint, RoundTripAndErrors) {
  Rng rng(6);
  ParamStore ps;
  {
    PrecisionScope p(Precision::F32);
    Tensor a = random_tensor({2, 3}, rng);
    std::vector<double> v(a.data().begin(), a.data().end());
    store_inplace(v);
    ps.add("layer.weight", Tensor({2, 3}, v));
    ps.add("layer.bias", Tensor({3}, {0.5, -0.25, 1.0}));
  }
  const auto path = temp_file("ckpt.nimg");
  save_checkpoint(path, ps, Dtype::F32);
  auto back = load_checkpoint(path);
  ASSERT_EQ(back.size(), 2u);
  for (const auto& [name, t] : ps) {
    ASSERT_EQ(back.at(name).shape(), t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back.at(name).at(i), t.at(i));
  }

  ParamStore exact;
  exact.add("x", Tensor({2}, {0.1, 1.0 / 3.0}));
  save_checkpoint(path, exact, Dtype::F64);
  EXPECT_EQ(load_checkpoint(path).at("x").at(1), 1.0 / 3.0);

  // Flip the first magic byte.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);

  // Truncated payload.
  save_checkpoint(path, ps, Dtype::F32);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_checkpoint(path), CorruptCheckpoint);

  // Dims larger than the payload: patch the first dim of the first tensor.
  save_checkpoint(path, ps, Dtype::F32);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4 + 4 + 4 + 2 + 12 + 1 + 1);
    const std::uint32_t big = 1000;
    f.write(reinterpret_cast<const char*>(&big), 4);
  }
  EXPECT_THROW(load_checkpoint(path), CorruptCheckpoint);
  std::filesystem::remove(path);
}
