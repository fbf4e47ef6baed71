#pragma once

#include <cstdint>
#include <span>

// Dense compute kernels used by the autograd ops. Each kernel has a serial
// reference and an OpenMP version; both evaluate every output element with the
// same accumulation order, so their results are bitwise identical.
namespace nimg::kernels {

enum class Exec { Serial, Parallel };

// Serial under NIMG_VERIFY=1, otherwise Parallel; overridable.
Exec default_exec();
void set_default_exec(Exec exec);

class ExecScope {
 public:
  explicit ExecScope(Exec exec) : saved_(default_exec()) { set_default_exec(exec); }
  ~ExecScope() { set_default_exec(saved_); }
  ExecScope(const ExecScope&) = delete;
  ExecScope& operator=(const ExecScope&) = delete;

 private:
  Exec saved_;
};

int max_threads();

// c (m,n) = a (m,k) * b^T, b stored (n,k).
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::int64_t m, std::int64_t k, std::int64_t n, Exec exec);
// c (m,n) = a (m,k) * b (k,n).
void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::int64_t m, std::int64_t k, std::int64_t n, Exec exec);
// c (m,n) += a^T * b with a (k,m), b (k,n).
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::int64_t m, std::int64_t k, std::int64_t n, Exec exec);

// Grouped SwiGLU: rows offsets[e]..offsets[e+1] of x (N,d) go through expert e
// with w1, w3 (E,h,d) and w2 (E,d,h):
//   pre_gate = x W1^T, pre_up = x W3^T, out = (silu(pre_gate) * pre_up) W2^T.
// The activation product is formed per element without materializing silu.
struct GroupedSwiGLUDims {
  std::int64_t experts;
  std::int64_t d;
  std::int64_t h;
};

void grouped_swiglu_forward(std::span<const double> x, std::span<const std::int64_t> offsets,
                            std::span<const double> w1, std::span<const double> w3,
                            std::span<const double> w2, GroupedSwiGLUDims dims,
                            std::span<double> pre_gate, std::span<double> pre_up,
                            std::span<double> out, Exec exec);

// Accumulates gradients for the grouped SwiGLU given saved pre-activations.
// Any of dx/dw1/dw3/dw2 may be empty to skip it.
void grouped_swiglu_backward(std::span<const double> x, std::span<const std::int64_t> offsets,
                             std::span<const double> w1, std::span<const double> w3,
                             std::span<const double> w2, GroupedSwiGLUDims dims,
                             std::span<const double> pre_gate, std::span<const double> pre_up,
                             std::span<const double> grad_out, std::span<double> dx,
                             std::span<double> dw1, std::span<double> dw3, std::span<double> dw2,
                             Exec exec);

// Scaled dot-product attention with grouped KV heads.
//   q (B,Sq,Hq,D), k/v (B,Sk,Hkv,D), key_bias (Sk) or empty, out (B,Sq,Hq,D),
//   probs (B,Hq,Sq,Sk). Query head h reads KV head h / (Hq/Hkv).
struct AttentionDims {
  std::int64_t batch;
  std::int64_t sq;
  std::int64_t sk;
  std::int64_t hq;
  std::int64_t hkv;
  std::int64_t head_dim;
};

void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<const double> key_bias,
                       AttentionDims dims, std::span<double> probs, std::span<double> out,
                       Exec exec);

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        std::span<const double> grad_out, AttentionDims dims, std::span<double> dq,
                        std::span<double> dk, std::span<double> dv, Exec exec);

}  // namespace nimg::kernels
