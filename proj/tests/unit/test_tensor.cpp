#include <gtest/gtest.h>

#include <cmath>

#include "nimg/rng.hpp"
#include "nimg/tensor.hpp"

using namespace nimg;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, MatmulIdentity) {
  PrecisionScope p(Precision::F64);
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 1}, {3, 4});
  Tensor c = ops::matmul(eye, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.at(0), 3.0);
  EXPECT_EQ(c.at(1), 4.0);

  Rng rng(3);
  Tensor a = random_tensor({5, 7}, rng);
  std::vector<double> i5(25, 0.0), i7(49, 0.0);
  for (int i = 0; i < 5; ++i) i5[i * 6] = 1.0;
  for (int i = 0; i < 7; ++i) i7[i * 8] = 1.0;
  Tensor left = ops::matmul(Tensor({5, 5}, i5), a);
  Tensor right = ops::matmul(a, Tensor({7, 7}, i7));
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(left.at(i), a.at(i));
    EXPECT_EQ(right.at(i), a.at(i));
  }
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3)"), std::string::npos);
  }
}

TEST(Tensor, SiluAndSoftmax) {
  EXPECT_EQ(ops::silu(Tensor::scalar(0.0)).item(), 0.0);
  Tensor s = ops::softmax_last(Tensor({4}, {0, 0, 0, 0}));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(s.at(i), 0.25);
}

TEST(Tensor, SoftmaxRowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({3, 6}, rng, 3.0);
    Tensor y = ops::softmax_last(x);
    Tensor ys = ops::softmax_last(ops::add_scalar(x, 7.5));
    for (int r = 0; r < 3; ++r) {
      double total = 0.0;
      for (int j = 0; j < 6; ++j) {
        total += y.at(r * 6 + j);
        EXPECT_NEAR(y.at(r * 6 + j), ys.at(r * 6 + j), 1e-6);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Tensor, UnsupportedKindThroughDispatch) {
  Tensor x = Tensor::zeros({2});
  std::vector<Tensor> in{x};
  EXPECT_THROW(ops::forward(OpKind::Attention, in), UnsupportedOp);
  EXPECT_NO_THROW(ops::forward(OpKind::Silu, in));
}

TEST(Backward, SumAndSquare) {
  PrecisionScope p(Precision::F64);
  Tape::Scope scope;
  Tensor x({3}, {1, 2, 3}, true);
  backward(ops::sum(x));
  ASSERT_TRUE(x.has_grad());
  for (int i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 1.0);

  Tape::active().clear();
  Tensor y({2}, {2, -1}, true);
  backward(ops::sum(ops::mul(y, y)));
  EXPECT_EQ(y.grad()[0], 4.0);
  EXPECT_EQ(y.grad()[1], -2.0);
}

TEST(Backward, AccumulatesAcrossCalls) {
  PrecisionScope p(Precision::F64);
  Tape::Scope scope;
  Tensor x({2}, {1, 2}, true);
  Tensor loss = ops::sum(x);
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, NonScalarLoss) {
  Tape::Scope scope;
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), NonScalarLoss);
}

TEST(Backward, ReverseInsertionOrder) {
  Tape::Scope scope;
  Tensor x({2}, {1, 2}, true);
  Tensor y = ops::exp(ops::silu(x));
  Tensor z = ops::sum(y);
  const auto& nodes = Tape::active().nodes();
  ASSERT_EQ(nodes.size(), 3u);
  EXPECT_EQ(nodes[0].kind, OpKind::Silu);
  EXPECT_EQ(nodes[2].kind, OpKind::Sum);
  // Every input is a leaf or an earlier output.
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i].inputs) {
      bool found = in->is_leaf;
      for (std::size_t j = 0; j < i && !found; ++j)
        for (const auto& out : nodes[j].outputs) found = found || out == in;
      EXPECT_TRUE(found);
    }
  (void)z;
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tape::Scope scope;
  Tensor x({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    ops::sum(x);
  }
  EXPECT_EQ(Tape::active().size(), 0u);
}

TEST(Precision, F32StoresRounded) {
  PrecisionScope p(Precision::F32);
  Tensor y = ops::scale(Tensor({1}, {1.0}), 0.1);
  EXPECT_EQ(y.at(0), static_cast<double>(0.1f));
}

TEST(GradCheck, ConstantFunction) {
  PrecisionScope p(Precision::F64);
  Tensor pt({3}, {0.1, 0.2, 0.3});
  auto rep = grad_check([](const Tensor&) { return Tensor::scalar(4.0); }, pt, 1e-4, 1e-6);
  EXPECT_TRUE(rep.pass);
  EXPECT_LE(rep.max_abs_err, 1e-8);
}

TEST(GradCheck, NonFiniteRaises) {
  PrecisionScope p(Precision::F64);
  Tensor pt({1}, {-1.0});
  EXPECT_THROW(grad_check([](const Tensor& x) { return ops::sum(ops::log(x)); }, pt, 1e-4, 1e-6),
               EvalError);
}

// Every differentiable op against central differences on random points.
class OpGrad : public ::testing::TestWithParam<int> {};

TEST_P(OpGrad, MatchesFiniteDifferences) {
  PrecisionScope p(Precision::F64);
  const int which = GetParam();
  Rng rng(100 + which);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({5, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor c = random_tensor({3, 4}, rng);
    std::function<Tensor()> fn;
    std::vector<Tensor> params{x};
    Tensor wsum = random_tensor({3, 4}, rng);  // random projection to a scalar
    Tensor pw5 = random_tensor({3, 5}, rng);
    Tensor pw3 = random_tensor({3}, rng);
    Tensor pw8 = random_tensor({3, 8}, rng);
    switch (which) {
      case 0: fn = [&] { return ops::sum(ops::mul(ops::linear(x, w), pw5)); }; params = {x, w}; break;
      case 1: fn = [&] { return ops::sum(ops::mul(ops::matmul(x, ops::transpose(w)), pw5)); }; params = {x, w}; break;
      case 2: fn = [&] { return ops::sum(ops::mul(ops::add_bias(x, b), wsum)); }; params = {x, b}; break;
      case 3: fn = [&] { return ops::sum(ops::mul(ops::mul(x, c), wsum)); }; params = {x, c}; break;
      case 4: fn = [&] { return ops::sum(ops::mul(ops::silu(x), wsum)); }; break;
      case 5: fn = [&] { return ops::sum(ops::mul(ops::tanh(x), wsum)); }; break;
      case 6: fn = [&] { return ops::sum(ops::mul(ops::sigmoid(x), wsum)); }; break;
      case 7: fn = [&] { return ops::sum(ops::mul(ops::exp(x), wsum)); }; break;
      case 8: fn = [&] { return ops::sum(ops::mul(ops::log(ops::add_scalar(ops::square(x), 0.5)), wsum)); }; break;
      case 9: fn = [&] { return ops::sum(ops::mul(ops::sqrt(ops::add_scalar(ops::square(x), 0.5)), wsum)); }; break;
      case 10: fn = [&] { return ops::sum(ops::mul(ops::reciprocal(ops::add_scalar(ops::square(x), 0.5)), wsum)); }; break;
      case 11: fn = [&] { return ops::sum(ops::mul(ops::softmax_last(x), wsum)); }; break;
      case 12: fn = [&] { return ops::sum(ops::mul(ops::logsumexp_last(x), pw3)); }; break;
      case 13: fn = [&] { return ops::sum(ops::mul(ops::layer_norm_last(x), wsum)); }; break;
      case 14: fn = [&] { return ops::sum(ops::mul(ops::rms_norm_last(x), wsum)); }; break;
      case 15: fn = [&] { return ops::sum(ops::mul(ops::mean_last(ops::square(x)), pw3)); }; break;
      case 16: fn = [&] { return ops::sum(ops::mul(ops::concat({x, c}, 1), pw8)); }; params = {x, c}; break;
      case 17: fn = [&] { return ops::mean(ops::square(ops::slice(ops::sub(x, ops::neg(c)), 1, 1, 2))); }; params = {x, c}; break;
      case 18: {
        static const std::vector<std::int64_t> idx{2, 0, 2};
        fn = [&] { return ops::sum(ops::mul(ops::gather_rows(x, idx), wsum)); };
        break;
      }
      case 19: {
        static const std::vector<std::int64_t> idx{1, 1, 0};
        fn = [&] { return ops::sum(ops::mul(ops::index_add_rows(3, idx, ops::scale_rows(x, pw3)), wsum)); };
        params = {x, pw3};
        break;
      }
      case 22: {
        static const std::vector<std::int64_t> idx{11, 0, 5, 5};
        fn = [&] { return ops::sum(ops::mul(ops::take(x, idx), ops::take(wsum, idx))); };
        break;
      }
      case 20: fn = [&] { return ops::sum(ops::mul(ops::broadcast_seq(x, 2), ops::reshape(ops::stack({wsum, c}), {3, 2, 4}))); }; break;
      case 21: fn = [&] { return ops::sum(ops::add_aux_loss(ops::scale(x, 2.0), ops::sum(ops::square(c)), 0.5)); }; break;
    }
    auto rep = grad_check_params(fn, params, 1e-3, 1e-6);
    ASSERT_TRUE(rep.pass) << "op " << which << " trial " << trial << " rel " << rep.max_rel_err << " abs " << rep.max_abs_err << " idx " << rep.worst_index;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGrad, ::testing::Range(0, 23));

TEST(AuxLoss, ForwardUnchangedGradientInjected) {
  PrecisionScope p(Precision::F64);
  Tape::Scope scope;
  Tensor x({2}, {1, 2}, true);
  Tensor a({1}, {3}, true);
  Tensor y = ops::add_aux_loss(x, ops::square(a), 0.5);
  EXPECT_EQ(y.at(0), 1.0);
  backward(ops::sum(y));
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.5 * 6.0);
}
