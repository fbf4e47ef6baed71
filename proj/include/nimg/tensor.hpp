#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nimg/errors.hpp"

namespace nimg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage precision. Arithmetic always accumulates in double; in F32 mode every
// stored result is rounded to the nearest float.
enum class Precision { F32, F64 };

Precision precision();
void set_precision(Precision p);

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
  ~PrecisionScope() { set_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

inline double store(double v) {
  return precision() == Precision::F32 ? static_cast<double>(static_cast<float>(v)) : v;
}
void store_inplace(std::span<double> values);

// True when NIMG_VERIFY=1 is set: 64-bit storage and serial kernels.
bool verify_mode_from_env();

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  // Direct mutation, for optimizer updates outside the tape.
  std::span<double> data_mut() { return impl_->data; }
  double item() const;
  double at(std::int64_t flat) const { return impl_->data[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad_mut();
  void zero_grad() { impl_->grad.clear(); }

  // Copy of the values as a new leaf without gradient history.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

enum class OpKind {
  Matmul,
  Linear,
  AddBias,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddScalar,
  Silu,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Sqrt,
  Square,
  Reciprocal,
  Sum,
  Mean,
  SumLast,
  MeanLast,
  Softmax,
  LogSumExp,
  Reshape,
  Transpose,
  Concat,
  Slice,
  GatherRows,
  Take,
  IndexAddRows,
  ScaleRows,
  BroadcastSeq,
  LayerNorm,
  RmsNorm,
  AuxLoss,
  // Kinds recorded by higher-level modules with hand-written backward passes.
  SwiGLU,
  GroupedSwiGLU,
  ExpertChoiceGates,
  GatedResidual,
  LnScale,
  GateResLnScale,
  Rope,
  Attention,
  Sinusoid,
  HaarDwt,
};

std::string_view op_name(OpKind kind);

// Ordered record of differentiable operations. Nodes are appended in
// execution order, so every input of a node is either a leaf or the output of
// an earlier node; backward() walks the nodes in exact reverse order.
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::vector<std::shared_ptr<TensorImpl>> outputs;
    std::function<void()> backward;
  };

  // Appends a node when gradients are enabled and any input requires grad;
  // marks the outputs as non-leaf gradient carriers. Returns true if recorded.
  bool record(OpKind kind, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
              std::function<void()> backward);

  // Accumulates dLoss/dLeaf into every requires_grad leaf reachable from the
  // recorded nodes. Leaf gradients accumulate across calls; intermediate
  // gradients are reset at the start of each call.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // The tape ops record onto (thread-local).
  static Tape& active();

  // Installs a fresh tape for the current thread for the scope's lifetime.
  class Scope {
   public:
    Scope();
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* saved_;
    std::unique_ptr<Tape> tape_;
  };

 private:
  std::vector<Node> nodes_;
};

void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

// Gradient buffer of a tensor taking part in backward, allocated (zeroed) on
// first use. Used by backward closures.
std::vector<double>& grad_buffer(TensorImpl& impl);

namespace ops {

// 2-D product: (m,k) x (k,n) -> (m,n).
Tensor matmul(const Tensor& a, const Tensor& b);
// x (..., k) times w (n, k) transposed -> (..., n).
Tensor linear(const Tensor& x, const Tensor& w);
// x (..., n) plus bias (n).
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Elementwise; operands must have equal shapes or one must hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor reciprocal(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reductions over the last axis; the result drops that axis.
Tensor sum_last(const Tensor& x);
Tensor mean_last(const Tensor& x);
Tensor softmax_last(const Tensor& x);
Tensor logsumexp_last(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// 2-D transpose.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);

// Row gather/scatter on (n, d) tensors.
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> rows);
Tensor index_add_rows(std::int64_t n_rows, std::span<const std::int64_t> rows, const Tensor& src);
// Elements at flat positions of x as a 1-D tensor.
Tensor take(const Tensor& x, std::span<const std::int64_t> flat);
// Multiplies row i of x (m, d) by g[i] (g has shape (m)).
Tensor scale_rows(const Tensor& x, const Tensor& g);
// (B, d) -> (B, S, d) by repetition over a new middle axis.
Tensor broadcast_seq(const Tensor& x, std::int64_t seq);

// Normalizations over the last axis without affine parameters.
Tensor layer_norm_last(const Tensor& x, double eps = 1e-6);
Tensor rms_norm_last(const Tensor& x, double eps = 1e-6);

// Returns x unchanged; during backward, injects coeff * d(aux) into aux's graph
// in addition to passing x's gradient through.
Tensor add_aux_loss(const Tensor& x, const Tensor& aux, double coeff);

// Parameterless dispatch by kind (the op kinds above that need no extra
// arguments). Other kinds raise UnsupportedOp.
Tensor forward(OpKind kind, std::span<const Tensor> inputs);

}  // namespace ops

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
  bool pass = false;
};

// Compares the analytic gradient of a scalar function to central differences
// (f(x+h) - f(x-h)) / 2h element-wise with rel err |a-n| / max(1e-8, |a|+|n|).
// The differences at h and h/2 are combined by one Richardson step.
// Runs on a private tape; raises EvalError on non-finite values.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                           double h, double tol);

// Same check over several parameter tensors closed over by fn. At most
// max_per_param elements per tensor are probed (evenly strided); 0 probes all.
GradCheckReport grad_check_params(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                                  double h, double tol, std::int64_t max_per_param = 0);

}  // namespace nimg
