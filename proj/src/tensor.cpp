#include "nimg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "nimg/kernels.hpp"

namespace nimg {

namespace {

thread_local Precision g_precision =
    verify_mode_from_env() ? Precision::F64 : Precision::F32;
thread_local bool g_grad_enabled = true;
thread_local Tape* g_active_tape = nullptr;

using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor make_result(Shape shape, std::vector<double> data) {
  store_inplace(data);
  return Tensor(std::move(shape), std::move(data));
}

bool needs_grad(const ImplPtr& p) { return p->requires_grad; }

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

std::string pair_msg(std::string_view op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
}

// Elementwise unary op with derivative expressed through input and output.
template <typename F, typename DF>
Tensor unary(OpKind kind, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  Tensor y = make_result(x.shape(), std::move(out));
  ImplPtr xi = x.impl();
  ImplPtr yi = y.impl();
  Tape::active().record(kind, {x}, {y}, [xi, yi, df]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i] * df(xi->data[i], yi->data[i]);
  });
  return y;
}

enum class Bin { Add, Sub, Mul };

Tensor binary(Bin op, const Tensor& a, const Tensor& b) {
  const OpKind kind = op == Bin::Add ? OpKind::Add : op == Bin::Sub ? OpKind::Sub : OpKind::Mul;
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  Shape shape;
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (b_scalar) {
    shape = a.shape();
  } else if (a_scalar) {
    shape = b.shape();
  } else {
    throw ShapeError(pair_msg(op_name(kind), a.shape(), b.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
  const bool same = a.shape() == b.shape();
  auto av = [&](std::size_t i) { return (same || !a_scalar) ? a.data()[i] : a.data()[0]; };
  auto bv = [&](std::size_t i) { return (same || !b_scalar) ? b.data()[i] : b.data()[0]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case Bin::Add: out[i] = av(i) + bv(i); break;
      case Bin::Sub: out[i] = av(i) - bv(i); break;
      case Bin::Mul: out[i] = av(i) * bv(i); break;
    }
  }
  Tensor y = make_result(shape, std::move(out));
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();
  ImplPtr yi = y.impl();
  const bool a_bcast = !same && a_scalar;
  const bool b_bcast = !same && b_scalar;
  Tape::active().record(kind, {a, b}, {y}, [=]() {
    const auto& g = yi->grad;
    auto a_at = [&](std::size_t i) { return a_bcast ? ai->data[0] : ai->data[i]; };
    auto b_at = [&](std::size_t i) { return b_bcast ? bi->data[0] : bi->data[i]; };
    if (needs_grad(ai)) {
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = op == Bin::Mul ? g[i] * b_at(i) : g[i];
        ga[a_bcast ? 0 : i] += d;
      }
    }
    if (needs_grad(bi)) {
      auto& gb = grad_buffer(*bi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = op == Bin::Mul ? g[i] * a_at(i) : (op == Bin::Sub ? -g[i] : g[i]);
        gb[b_bcast ? 0 : i] += d;
      }
    }
  });
  return y;
}

std::int64_t last_dim(const Tensor& x, std::string_view op) {
  require(x.rank() >= 1, std::string(op) + ": rank-0 input");
  return x.shape().back();
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

void store_inplace(std::span<double> values) {
  if (precision() == Precision::F64) return;
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

bool verify_mode_from_env() {
  const char* v = std::getenv("NIMG_VERIFY");
  return v != nullptr && std::strcmp(v, "1") == 0;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape)
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, store(value)), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::grad_mut() { return grad_buffer(*impl_); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

std::vector<double>& grad_buffer(TensorImpl& impl) {
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

// ---------------------------------------------------------------------------
// Tape

bool Tape::record(OpKind kind, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                  std::function<void()> backward) {
  if (!g_grad_enabled) return false;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return false;
  Node node{kind, {}, {}, std::move(backward)};
  for (auto& t : inputs)
    if (t.defined()) node.inputs.push_back(t.impl());
  for (auto& t : outputs) {
    t.impl()->requires_grad = true;
    t.impl()->is_leaf = false;
    node.outputs.push_back(t.impl());
  }
  nodes_.push_back(std::move(node));
  return true;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw NonScalarLoss("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  for (auto& node : nodes_)
    for (auto& out : node.outputs) out->grad.assign(out->data.size(), 0.0);
  grad_buffer(*loss.impl())[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

Tape& Tape::active() {
  if (g_active_tape == nullptr) {
    thread_local Tape default_tape;
    g_active_tape = &default_tape;
  }
  return *g_active_tape;
}

Tape::Scope::Scope() : saved_(&Tape::active()), tape_(std::make_unique<Tape>()) {
  g_active_tape = tape_.get();
}

Tape::Scope::~Scope() { g_active_tape = saved_; }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Silu: return "silu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::Reciprocal: return "reciprocal";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SumLast: return "sum_last";
    case OpKind::MeanLast: return "mean_last";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSumExp: return "logsumexp";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Take: return "take";
    case OpKind::IndexAddRows: return "index_add_rows";
    case OpKind::ScaleRows: return "scale_rows";
    case OpKind::BroadcastSeq: return "broadcast_seq";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::RmsNorm: return "rms_norm";
    case OpKind::AuxLoss: return "aux_loss";
    case OpKind::SwiGLU: return "swiglu";
    case OpKind::GroupedSwiGLU: return "grouped_swiglu";
    case OpKind::ExpertChoiceGates: return "expert_choice_gates";
    case OpKind::GatedResidual: return "gated_residual";
    case OpKind::LnScale: return "ln_scale";
    case OpKind::GateResLnScale: return "gate_res_ln_scale";
    case OpKind::Rope: return "rope";
    case OpKind::Attention: return "attention";
    case OpKind::Sinusoid: return "sinusoid";
    case OpKind::HaarDwt: return "haar_dwt";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(pair_msg("matmul", a.shape(), b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul_nn(a.data(), b.data(), out, m, k, n, kernels::default_exec());
  Tensor y = make_result({m, n}, std::move(out));
  ImplPtr ai = a.impl(), bi = b.impl(), yi = y.impl();
  Tape::active().record(OpKind::Matmul, {a, b}, {y}, [=]() {
    const auto exec = kernels::default_exec();
    if (needs_grad(ai)) {
      // dA = G B^T
      std::vector<double> tmp(static_cast<std::size_t>(m * k));
      kernels::matmul_nt(yi->grad, bi->data, tmp, m, n, k, exec);
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (needs_grad(bi)) kernels::matmul_tn_acc(ai->data, yi->grad, grad_buffer(*bi), k, m, n, exec);
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(1))
    throw ShapeError(pair_msg("linear", x.shape(), w.shape()));
  const auto k = w.dim(1), n = w.dim(0);
  const auto m = x.numel() / k;
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul_nt(x.data(), w.data(), out, m, k, n, kernels::default_exec());
  Tensor y = make_result(shape, std::move(out));
  ImplPtr xi = x.impl(), wi = w.impl(), yi = y.impl();
  Tape::active().record(OpKind::Linear, {x, w}, {y}, [=]() {
    const auto exec = kernels::default_exec();
    if (needs_grad(xi)) {
      std::vector<double> tmp(static_cast<std::size_t>(m * k));
      kernels::matmul_nn(yi->grad, wi->data, tmp, m, n, k, exec);
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    }
    // dW (n,k) += G^T X
    if (needs_grad(wi)) kernels::matmul_tn_acc(yi->grad, xi->data, grad_buffer(*wi), n, m, k, exec);
  });
  return y;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0))
    throw ShapeError(pair_msg("add_bias", x.shape(), bias.shape()));
  const auto n = bias.dim(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % static_cast<std::size_t>(n)];
  Tensor y = make_result(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), bi = bias.impl(), yi = y.impl();
  Tape::active().record(OpKind::AddBias, {x, bias}, {y}, [=]() {
    if (needs_grad(xi)) {
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i];
    }
    if (needs_grad(bi)) {
      auto& gb = grad_buffer(*bi);
      for (std::size_t i = 0; i < yi->grad.size(); ++i) gb[i % static_cast<std::size_t>(n)] += yi->grad[i];
    }
  });
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Bin::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Bin::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Bin::Mul, a, b); }

Tensor neg(const Tensor& x) {
  return unary(OpKind::Neg, x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double c) {
  return unary(OpKind::Scale, x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(OpKind::AddScalar, x, [c](double v) { return v + c; },
               [](double, double) { return 1.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      OpKind::Silu, x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s + v * s * (1.0 - s);
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      OpKind::Tanh, x, [](double v) { return std::tanh(v); },
      [](double v, double) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      OpKind::Sigmoid, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 - s);
      });
}

Tensor exp(const Tensor& x) {
  return unary(OpKind::Exp, x, [](double v) { return std::exp(v); },
               [](double v, double) { return std::exp(v); });
}

Tensor log(const Tensor& x) {
  return unary(OpKind::Log, x, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(OpKind::Sqrt, x, [](double v) { return std::sqrt(v); },
               [](double v, double) { return 0.5 / std::sqrt(v); });
}

Tensor square(const Tensor& x) {
  return unary(OpKind::Square, x, [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

Tensor reciprocal(const Tensor& x) {
  return unary(OpKind::Reciprocal, x, [](double v) { return 1.0 / v; },
               [](double v, double) { return -1.0 / (v * v); });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = make_result({}, {acc});
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Sum, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (auto& g : gx) g += yi->grad[0];
  });
  return y;
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean of empty tensor");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  Tensor y = make_result({}, {acc / n});
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Mean, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (auto& g : gx) g += yi->grad[0] / n;
  });
  return y;
}

namespace {

Tensor reduce_last(const Tensor& x, bool average) {
  const auto n = last_dim(x, average ? "mean_last" : "sum_last");
  require(n > 0, "reduction over empty axis");
  const auto rows = x.numel() / n;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < n; ++j) acc += x.data()[static_cast<std::size_t>(r * n + j)];
    out[static_cast<std::size_t>(r)] = average ? acc / static_cast<double>(n) : acc;
  }
  Tensor y = make_result(shape, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  const double f = average ? 1.0 / static_cast<double>(n) : 1.0;
  Tape::active().record(average ? OpKind::MeanLast : OpKind::SumLast, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(r * n + j)] += f * yi->grad[static_cast<std::size_t>(r)];
  });
  return y;
}

}  // namespace

Tensor sum_last(const Tensor& x) { return reduce_last(x, false); }
Tensor mean_last(const Tensor& x) { return reduce_last(x, true); }

Tensor softmax_last(const Tensor& x) {
  const auto n = last_dim(x, "softmax");
  const auto rows = n == 0 ? 0 : x.numel() / n;
  std::vector<double> out(x.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double denom = 0.0;
    for (std::int64_t j = 0; j < n; ++j) denom += (o[j] = std::exp(in[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) o[j] /= denom;
  }
  Tensor y = make_result(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Softmax, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* p = yi->data.data() + r * n;
      const double* g = yi->grad.data() + r * n;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += p[j] * g[j];
      for (std::int64_t j = 0; j < n; ++j) gx[static_cast<std::size_t>(r * n + j)] += p[j] * (g[j] - dot);
    }
  });
  return y;
}

Tensor logsumexp_last(const Tensor& x) {
  const auto n = last_dim(x, "logsumexp");
  require(n > 0, "logsumexp over empty axis");
  const auto rows = x.numel() / n;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double acc = 0.0;
    for (std::int64_t j = 0; j < n; ++j) acc += std::exp(in[j] - mx);
    out[static_cast<std::size_t>(r)] = mx + std::log(acc);
  }
  Tensor y = make_result(shape, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::LogSumExp, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double lse = yi->data[static_cast<std::size_t>(r)];
      const double g = yi->grad[static_cast<std::size_t>(r)];
      for (std::int64_t j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>(r * n + j);
        gx[idx] += g * std::exp(xi->data[idx] - lse);
      }
    }
  });
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError(pair_msg("reshape", x.shape(), shape));
  Tensor y(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Reshape, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i];
  });
  return y;
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, "transpose expects rank 2, got " + shape_str(x.shape()));
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j * m + i)] = x.data()[static_cast<std::size_t>(i * n + j)];
  Tensor y({n, m}, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Transpose, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(i * n + j)] += yi->grad[static_cast<std::size_t>(j * m + i)];
  });
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat of zero tensors");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat axis out of range");
  Shape shape = parts[0].shape();
  shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == rank;
    for (int a = 0; ok && a < rank; ++a)
      if (a != axis && p.shape()[static_cast<std::size_t>(a)] != parts[0].shape()[static_cast<std::size_t>(a)]) ok = false;
    if (!ok) throw ShapeError(pair_msg("concat", parts[0].shape(), p.shape()));
    shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= shape[static_cast<std::size_t>(a)];
  for (int a = axis + 1; a < rank; ++a) inner *= shape[static_cast<std::size_t>(a)];
  const auto total_axis = shape[static_cast<std::size_t>(axis)];
  std::vector<double> out(static_cast<std::size_t>(shape_numel(shape)));
  std::vector<std::int64_t> starts;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    starts.push_back(off);
    const auto len = p.shape()[static_cast<std::size_t>(axis)];
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * len * inner, len * inner,
                  out.data() + (o * total_axis + off) * inner);
    off += len;
  }
  Tensor y(shape, std::move(out));
  std::vector<ImplPtr> pis;
  for (const auto& p : parts) pis.push_back(p.impl());
  ImplPtr yi = y.impl();
  Tape::active().record(OpKind::Concat, parts, {y}, [=]() {
    for (std::size_t i = 0; i < pis.size(); ++i) {
      if (!needs_grad(pis[i])) continue;
      auto& gp = grad_buffer(*pis[i]);
      const auto len = pis[i]->shape[static_cast<std::size_t>(axis)];
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t t = 0; t < len * inner; ++t)
          gp[static_cast<std::size_t>(o * len * inner + t)] +=
              yi->grad[static_cast<std::size_t>((o * total_axis + starts[i]) * inner + t)];
    }
  });
  return y;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int rank = x.rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "slice axis out of range");
  const auto full = x.shape()[static_cast<std::size_t>(axis)];
  if (start < 0 || length < 0 || start + length > full)
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= shape[static_cast<std::size_t>(a)];
  for (int a = axis + 1; a < rank; ++a) inner *= shape[static_cast<std::size_t>(a)];
  std::vector<double> out(static_cast<std::size_t>(shape_numel(shape)));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * full + start) * inner, length * inner,
                out.data() + o * length * inner);
  Tensor y(shape, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Slice, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t t = 0; t < length * inner; ++t)
        gx[static_cast<std::size_t>((o * full + start) * inner + t)] +=
            yi->grad[static_cast<std::size_t>(o * length * inner + t)];
  });
  return y;
}

Tensor stack(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "stack of zero tensors");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) throw ShapeError(pair_msg("stack", parts[0].shape(), p.shape()));
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, 0);
}

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> rows) {
  require(x.rank() == 2, "gather_rows expects (n, d), got " + shape_str(x.shape()));
  const auto n = x.dim(0), d = x.dim(1);
  const auto m = static_cast<std::int64_t>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(m * d));
  for (std::int64_t i = 0; i < m; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= n) throw IndexError("gather_rows: row " + std::to_string(r) + " out of range");
    std::copy_n(x.data().data() + r * d, d, out.data() + i * d);
  }
  Tensor y({m, d}, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  Tape::active().record(OpKind::GatherRows, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t c = 0; c < d; ++c)
        gx[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)] * d + c)] +=
            yi->grad[static_cast<std::size_t>(i * d + c)];
  });
  return y;
}

Tensor take(const Tensor& x, std::span<const std::int64_t> flat) {
  std::vector<std::int64_t> idx(flat.begin(), flat.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.numel()) throw IndexError("take: index " + std::to_string(idx[i]) + " out of range");
    out[i] = x.data()[static_cast<std::size_t>(idx[i])];
  }
  Tensor y({static_cast<std::int64_t>(idx.size())}, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Take, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[static_cast<std::size_t>(idx[i])] += yi->grad[i];
  });
  return y;
}

Tensor index_add_rows(std::int64_t n_rows, std::span<const std::int64_t> rows, const Tensor& src) {
  require(src.rank() == 2 && src.dim(0) == static_cast<std::int64_t>(rows.size()),
          "index_add_rows: source " + shape_str(src.shape()) + " vs " + std::to_string(rows.size()) + " indices");
  const auto d = src.dim(1);
  const auto m = src.dim(0);
  std::vector<double> out(static_cast<std::size_t>(n_rows * d), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= n_rows) throw IndexError("index_add_rows: row " + std::to_string(r) + " out of range");
    for (std::int64_t c = 0; c < d; ++c)
      out[static_cast<std::size_t>(r * d + c)] += src.data()[static_cast<std::size_t>(i * d + c)];
  }
  Tensor y = make_result({n_rows, d}, std::move(out));
  ImplPtr si = src.impl(), yi = y.impl();
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  Tape::active().record(OpKind::IndexAddRows, {src}, {y}, [=]() {
    if (!needs_grad(si)) return;
    auto& gs = grad_buffer(*si);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t c = 0; c < d; ++c)
        gs[static_cast<std::size_t>(i * d + c)] +=
            yi->grad[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)] * d + c)];
  });
  return y;
}

Tensor scale_rows(const Tensor& x, const Tensor& g) {
  require(x.rank() == 2 && g.rank() == 1 && g.dim(0) == x.dim(0), pair_msg("scale_rows", x.shape(), g.shape()));
  const auto m = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.data().size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t c = 0; c < d; ++c)
      out[static_cast<std::size_t>(i * d + c)] =
          x.data()[static_cast<std::size_t>(i * d + c)] * g.data()[static_cast<std::size_t>(i)];
  Tensor y = make_result(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), gi = g.impl(), yi = y.impl();
  Tape::active().record(OpKind::ScaleRows, {x, g}, {y}, [=]() {
    for (std::int64_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < d; ++c) {
        const auto idx = static_cast<std::size_t>(i * d + c);
        acc += yi->grad[idx] * xi->data[idx];
        if (needs_grad(xi)) grad_buffer(*xi)[idx] += yi->grad[idx] * gi->data[static_cast<std::size_t>(i)];
      }
      if (needs_grad(gi)) grad_buffer(*gi)[static_cast<std::size_t>(i)] += acc;
    }
  });
  return y;
}

Tensor broadcast_seq(const Tensor& x, std::int64_t seq) {
  require(x.rank() == 2, "broadcast_seq expects (B, d), got " + shape_str(x.shape()));
  const auto b = x.dim(0), d = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(b * seq * d));
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t s = 0; s < seq; ++s)
      std::copy_n(x.data().data() + i * d, d, out.data() + (i * seq + s) * d);
  Tensor y({b, seq, d}, std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::BroadcastSeq, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t s = 0; s < seq; ++s)
        for (std::int64_t c = 0; c < d; ++c)
          gx[static_cast<std::size_t>(i * d + c)] += yi->grad[static_cast<std::size_t>((i * seq + s) * d + c)];
  });
  return y;
}

Tensor layer_norm_last(const Tensor& x, double eps) {
  const auto n = last_dim(x, "layer_norm");
  const auto rows = n == 0 ? 0 : x.numel() / n;
  std::vector<double> out(x.data().size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double mu = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = (in[j] - mu) * is;
  }
  std::vector<double> xhat = out;
  Tensor y = make_result(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::LayerNorm, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* g = yi->grad.data() + r * n;
      const double* xh = xhat.data() + r * n;
      double mg = 0.0, mgx = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        mg += g[j];
        mgx += g[j] * xh[j];
      }
      mg /= static_cast<double>(n);
      mgx /= static_cast<double>(n);
      const double is = inv_std[static_cast<std::size_t>(r)];
      for (std::int64_t j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(r * n + j)] += is * (g[j] - mg - xh[j] * mgx);
    }
  });
  return y;
}

Tensor rms_norm_last(const Tensor& x, double eps) {
  const auto n = last_dim(x, "rms_norm");
  const auto rows = n == 0 ? 0 : x.numel() / n;
  std::vector<double> out(x.data().size());
  std::vector<double> inv_rms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double ms = 0.0;
    for (std::int64_t j = 0; j < n; ++j) ms += in[j] * in[j];
    ms /= static_cast<double>(n);
    const double ir = 1.0 / std::sqrt(ms + eps);
    inv_rms[static_cast<std::size_t>(r)] = ir;
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = in[j] * ir;
  }
  Tensor y = make_result(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::RmsNorm, {x}, {y}, [=]() {
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* g = yi->grad.data() + r * n;
      const double* in = xi->data.data() + r * n;
      const double ir = inv_rms[static_cast<std::size_t>(r)];
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += g[j] * in[j];
      const double coef = ir * ir * ir * dot / static_cast<double>(n);
      for (std::int64_t j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(r * n + j)] += g[j] * ir - in[j] * coef;
    }
  });
  return y;
}

Tensor add_aux_loss(const Tensor& x, const Tensor& aux, double coeff) {
  require(aux.numel() == 1, "add_aux_loss: auxiliary loss must be scalar");
  Tensor y(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  ImplPtr xi = x.impl(), ai = aux.impl(), yi = y.impl();
  Tape::active().record(OpKind::AuxLoss, {x, aux}, {y}, [=]() {
    if (needs_grad(xi)) {
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i];
    }
    if (needs_grad(ai)) grad_buffer(*ai)[0] += coeff;
  });
  return y;
}

Tensor forward(OpKind kind, std::span<const Tensor> inputs) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n)
      throw UnsupportedOp(std::string(op_name(kind)) + " expects " + std::to_string(n) +
                          " inputs, got " + std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::Matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::Linear: arity(2); return linear(inputs[0], inputs[1]);
    case OpKind::AddBias: arity(2); return add_bias(inputs[0], inputs[1]);
    case OpKind::Add: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::Sub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::Mul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::Neg: arity(1); return neg(inputs[0]);
    case OpKind::Silu: arity(1); return silu(inputs[0]);
    case OpKind::Tanh: arity(1); return tanh(inputs[0]);
    case OpKind::Sigmoid: arity(1); return sigmoid(inputs[0]);
    case OpKind::Exp: arity(1); return exp(inputs[0]);
    case OpKind::Log: arity(1); return log(inputs[0]);
    case OpKind::Sqrt: arity(1); return sqrt(inputs[0]);
    case OpKind::Square: arity(1); return square(inputs[0]);
    case OpKind::Reciprocal: arity(1); return reciprocal(inputs[0]);
    case OpKind::Sum: arity(1); return sum(inputs[0]);
    case OpKind::Mean: arity(1); return mean(inputs[0]);
    case OpKind::SumLast: arity(1); return sum_last(inputs[0]);
    case OpKind::MeanLast: arity(1); return mean_last(inputs[0]);
    case OpKind::Softmax: arity(1); return softmax_last(inputs[0]);
    case OpKind::LogSumExp: arity(1); return logsumexp_last(inputs[0]);
    case OpKind::Transpose: arity(1); return transpose(inputs[0]);
    case OpKind::LayerNorm: arity(1); return layer_norm_last(inputs[0]);
    case OpKind::RmsNorm: arity(1); return rms_norm_last(inputs[0]);
    default:
      throw UnsupportedOp(std::string("op '") + std::string(op_name(kind)) +
                          "' is not available through parameterless dispatch");
  }
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double eval_scalar(const std::function<Tensor()>& fn) {
  NoGradGuard guard;
  const Tensor y = fn();
  if (y.numel() != 1) throw NonScalarLoss("grad_check: function is not scalar-valued");
  const double v = y.item();
  if (!std::isfinite(v)) throw EvalError("grad_check: non-finite function value");
  return v;
}

void compare(GradCheckReport& report, double analytic, double numeric, std::int64_t index) {
  const double abs_err = std::abs(analytic - numeric);
  const double rel = abs_err / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
  report.max_abs_err = std::max(report.max_abs_err, abs_err);
  if (rel > report.max_rel_err || report.worst_index < 0) {
    if (rel >= report.max_rel_err) report.worst_index = index;
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  ++report.checked;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                           double h, double tol) {
  Tensor x(point.shape(), std::vector<double>(point.data().begin(), point.data().end()), true);
  return grad_check_params([&]() { return fn(x); }, {x}, h, tol);
}

GradCheckReport grad_check_params(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                                  double h, double tol, std::int64_t max_per_param) {
  if (!(h > 0.0)) throw DomainError("grad_check: step h must be positive");
  Tape::Scope scope;
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    const Tensor y = fn();
    if (y.numel() != 1) throw NonScalarLoss("grad_check: function is not scalar-valued");
    if (!std::isfinite(y.item())) throw EvalError("grad_check: non-finite function value");
    Tape::active().backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                    : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0));
  Tape::active().clear();

  GradCheckReport report;
  std::int64_t global = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::int64_t n = p.numel();
    const std::int64_t stride =
        (max_per_param > 0 && n > max_per_param) ? (n + max_per_param - 1) / max_per_param : 1;
    for (std::int64_t i = 0; i < n; i += stride) {
      auto values = p.data_mut();
      const double orig = values[static_cast<std::size_t>(i)];
      auto central = [&](double step) {
        values[static_cast<std::size_t>(i)] = orig + step;
        const double fp = eval_scalar(fn);
        values[static_cast<std::size_t>(i)] = orig - step;
        const double fm = eval_scalar(fn);
        values[static_cast<std::size_t>(i)] = orig;
        return (fp - fm) / (2.0 * step);
      };
      // One Richardson step cancels the h^2 truncation term of the central difference.
      const double numeric = (4.0 * central(0.5 * h) - central(h)) / 3.0;
      compare(report, analytic[pi][static_cast<std::size_t>(i)], numeric, global + i);
    }
    global += n;
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace nimg
