#include "nimg/kernels.hpp"

#include <omp.h>

#include <cmath>
#include <limits>
#include <vector>

#include "nimg/tensor.hpp"

namespace nimg::kernels {

namespace {

Exec& exec_slot() {
  static Exec exec = verify_mode_from_env() ? Exec::Serial : Exec::Parallel;
  return exec;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One output row of a @ b^T.
inline void row_nt(const double* a_row, const double* b, double* c_row, std::int64_t k,
                   std::int64_t n) {
  for (std::int64_t j = 0; j < n; ++j) {
    const double* b_row = b + j * k;
    double acc = 0.0;
    for (std::int64_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
    c_row[j] = acc;
  }
}

inline void row_nn(const double* a_row, const double* b, double* c_row, std::int64_t k,
                   std::int64_t n) {
  for (std::int64_t j = 0; j < n; ++j) c_row[j] = 0.0;
  for (std::int64_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

inline void row_tn_acc(const double* a, const double* b, double* c_row, std::int64_t i,
                       std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* b_row = b + p * n;
    for (std::int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

// Expert index owning row r.
inline std::int64_t segment_of(std::span<const std::int64_t> offsets, std::int64_t r) {
  std::int64_t e = 0;
  while (offsets[static_cast<std::size_t>(e + 1)] <= r) ++e;
  return e;
}

void swiglu_row(const double* x_row, const double* w1, const double* w3, const double* w2,
                std::int64_t d, std::int64_t h, double* gate_row, double* up_row, double* out_row,
                double* scratch) {
  for (std::int64_t j = 0; j < h; ++j) {
    const double* w1_row = w1 + j * d;
    const double* w3_row = w3 + j * d;
    double g = 0.0;
    double u = 0.0;
    for (std::int64_t p = 0; p < d; ++p) {
      g += x_row[p] * w1_row[p];
      u += x_row[p] * w3_row[p];
    }
    gate_row[j] = g;
    up_row[j] = u;
    scratch[j] = silu(g) * u;
  }
  row_nt(scratch, w2, out_row, h, d);
}

// Backward for the rows of one expert segment.
void swiglu_segment_backward(const double* x, const double* w1, const double* w3,
                             const double* w2, std::int64_t d, std::int64_t h,
                             std::int64_t begin, std::int64_t end, const double* pre_gate,
                             const double* pre_up, const double* grad_out, double* dx,
                             double* dw1, double* dw3, double* dw2) {
  std::vector<double> act(static_cast<std::size_t>(h));
  std::vector<double> d_act(static_cast<std::size_t>(h));
  std::vector<double> d_gate(static_cast<std::size_t>(h));
  std::vector<double> d_up(static_cast<std::size_t>(h));
  for (std::int64_t r = begin; r < end; ++r) {
    const double* x_row = x + r * d;
    const double* g_row = grad_out + r * d;
    const double* a_row = pre_gate + r * h;
    const double* b_row = pre_up + r * h;
    for (std::int64_t j = 0; j < h; ++j) {
      const double s = sigmoid(a_row[j]);
      const double sl = a_row[j] * s;
      act[j] = sl * b_row[j];
      double acc = 0.0;
      for (std::int64_t c = 0; c < d; ++c) acc += g_row[c] * w2[c * h + j];
      d_act[j] = acc;
      d_up[j] = acc * sl;
      d_gate[j] = acc * b_row[j] * (s + a_row[j] * s * (1.0 - s));
    }
    if (dw2 != nullptr) {
      for (std::int64_t c = 0; c < d; ++c)
        for (std::int64_t j = 0; j < h; ++j) dw2[c * h + j] += g_row[c] * act[j];
    }
    if (dx != nullptr) {
      double* dx_row = dx + r * d;
      for (std::int64_t j = 0; j < h; ++j) {
        const double* w1_row = w1 + j * d;
        const double* w3_row = w3 + j * d;
        for (std::int64_t p = 0; p < d; ++p)
          dx_row[p] += d_gate[j] * w1_row[p] + d_up[j] * w3_row[p];
      }
    }
    if (dw1 != nullptr) {
      for (std::int64_t j = 0; j < h; ++j)
        for (std::int64_t p = 0; p < d; ++p) dw1[j * d + p] += d_gate[j] * x_row[p];
    }
    if (dw3 != nullptr) {
      for (std::int64_t j = 0; j < h; ++j)
        for (std::int64_t p = 0; p < d; ++p) dw3[j * d + p] += d_up[j] * x_row[p];
    }
  }
}

void attention_head_forward(const double* q, const double* k, const double* v,
                            std::span<const double> key_bias, const AttentionDims& dm,
                            std::int64_t b, std::int64_t hq, double* probs, double* out) {
  const std::int64_t group = dm.hq / dm.hkv;
  const std::int64_t hk = hq / group;
  const std::int64_t D = dm.head_dim;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::int64_t i = 0; i < dm.sq; ++i) {
    const double* q_row = q + ((b * dm.sq + i) * dm.hq + hq) * D;
    double* p_row = probs + ((b * dm.hq + hq) * dm.sq + i) * dm.sk;
    double max_score = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < dm.sk; ++j) {
      const double* k_row = k + ((b * dm.sk + j) * dm.hkv + hk) * D;
      double s = 0.0;
      for (std::int64_t c = 0; c < D; ++c) s += q_row[c] * k_row[c];
      s *= inv_scale;
      if (!key_bias.empty()) s += key_bias[static_cast<std::size_t>(j)];
      p_row[j] = s;
      if (s > max_score) max_score = s;
    }
    double denom = 0.0;
    for (std::int64_t j = 0; j < dm.sk; ++j) {
      const double e = std::isinf(p_row[j]) && p_row[j] < 0 ? 0.0 : std::exp(p_row[j] - max_score);
      p_row[j] = e;
      denom += e;
    }
    double* o_row = out + ((b * dm.sq + i) * dm.hq + hq) * D;
    for (std::int64_t c = 0; c < D; ++c) o_row[c] = 0.0;
    for (std::int64_t j = 0; j < dm.sk; ++j) {
      p_row[j] /= denom;
      const double* v_row = v + ((b * dm.sk + j) * dm.hkv + hk) * D;
      for (std::int64_t c = 0; c < D; ++c) o_row[c] += p_row[j] * v_row[c];
    }
  }
}

// Gradients for all query heads sharing KV head hk of batch b.
void attention_group_backward(const double* q, const double* k, const double* v,
                              const double* probs, const double* grad_out,
                              const AttentionDims& dm, std::int64_t b, std::int64_t hk,
                              double* dq, double* dk, double* dv) {
  const std::int64_t group = dm.hq / dm.hkv;
  const std::int64_t D = dm.head_dim;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(D));
  std::vector<double> dp(static_cast<std::size_t>(dm.sk));
  for (std::int64_t hq = hk * group; hq < (hk + 1) * group; ++hq) {
    for (std::int64_t i = 0; i < dm.sq; ++i) {
      const double* q_row = q + ((b * dm.sq + i) * dm.hq + hq) * D;
      const double* go_row = grad_out + ((b * dm.sq + i) * dm.hq + hq) * D;
      const double* p_row = probs + ((b * dm.hq + hq) * dm.sq + i) * dm.sk;
      double dot = 0.0;
      for (std::int64_t j = 0; j < dm.sk; ++j) {
        const double* v_row = v + ((b * dm.sk + j) * dm.hkv + hk) * D;
        double acc = 0.0;
        for (std::int64_t c = 0; c < D; ++c) acc += go_row[c] * v_row[c];
        dp[static_cast<std::size_t>(j)] = acc;
        dot += acc * p_row[j];
        if (dv != nullptr) {
          double* dv_row = dv + ((b * dm.sk + j) * dm.hkv + hk) * D;
          for (std::int64_t c = 0; c < D; ++c) dv_row[c] += p_row[j] * go_row[c];
        }
      }
      double* dq_row = dq != nullptr ? dq + ((b * dm.sq + i) * dm.hq + hq) * D : nullptr;
      for (std::int64_t j = 0; j < dm.sk; ++j) {
        const double ds = p_row[j] * (dp[static_cast<std::size_t>(j)] - dot) * inv_scale;
        if (ds == 0.0) continue;
        const double* k_row = k + ((b * dm.sk + j) * dm.hkv + hk) * D;
        if (dq_row != nullptr)
          for (std::int64_t c = 0; c < D; ++c) dq_row[c] += ds * k_row[c];
        if (dk != nullptr) {
          double* dk_row = dk + ((b * dm.sk + j) * dm.hkv + hk) * D;
          for (std::int64_t c = 0; c < D; ++c) dk_row[c] += ds * q_row[c];
        }
      }
    }
  }
}

double* ptr_or_null(std::span<double> s) { return s.empty() ? nullptr : s.data(); }

}  // namespace

Exec default_exec() { return exec_slot(); }
void set_default_exec(Exec exec) { exec_slot() = exec; }

int max_threads() { return omp_get_max_threads(); }

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::int64_t m, std::int64_t k, std::int64_t n, Exec exec) {
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) row_nt(a.data() + i * k, b.data(), c.data() + i * n, k, n);
  } else {
    for (std::int64_t i = 0; i < m; ++i) row_nt(a.data() + i * k, b.data(), c.data() + i * n, k, n);
  }
}

void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::int64_t m, std::int64_t k, std::int64_t n, Exec exec) {
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) row_nn(a.data() + i * k, b.data(), c.data() + i * n, k, n);
  } else {
    for (std::int64_t i = 0; i < m; ++i) row_nn(a.data() + i * k, b.data(), c.data() + i * n, k, n);
  }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::int64_t m, std::int64_t k, std::int64_t n, Exec exec) {
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i)
      row_tn_acc(a.data(), b.data(), c.data() + i * n, i, m, k, n);
  } else {
    for (std::int64_t i = 0; i < m; ++i)
      row_tn_acc(a.data(), b.data(), c.data() + i * n, i, m, k, n);
  }
}

void grouped_swiglu_forward(std::span<const double> x, std::span<const std::int64_t> offsets,
                            std::span<const double> w1, std::span<const double> w3,
                            std::span<const double> w2, GroupedSwiGLUDims dims,
                            std::span<double> pre_gate, std::span<double> pre_up,
                            std::span<double> out, Exec exec) {
  const std::int64_t d = dims.d;
  const std::int64_t h = dims.h;
  const std::int64_t n_rows = offsets[static_cast<std::size_t>(dims.experts)];
  auto row = [&](std::int64_t r, std::int64_t e, double* scratch) {
    swiglu_row(x.data() + r * d, w1.data() + e * h * d, w3.data() + e * h * d,
               w2.data() + e * d * h, d, h, pre_gate.data() + r * h, pre_up.data() + r * h,
               out.data() + r * d, scratch);
  };
  if (exec == Exec::Parallel) {
#pragma omp parallel
    {
      std::vector<double> scratch(static_cast<std::size_t>(h));
#pragma omp for schedule(static)
      for (std::int64_t r = 0; r < n_rows; ++r) row(r, segment_of(offsets, r), scratch.data());
    }
  } else {
    std::vector<double> scratch(static_cast<std::size_t>(h));
    for (std::int64_t e = 0; e < dims.experts; ++e)
      for (std::int64_t r = offsets[static_cast<std::size_t>(e)];
           r < offsets[static_cast<std::size_t>(e + 1)]; ++r)
        row(r, e, scratch.data());
  }
}

void grouped_swiglu_backward(std::span<const double> x, std::span<const std::int64_t> offsets,
                             std::span<const double> w1, std::span<const double> w3,
                             std::span<const double> w2, GroupedSwiGLUDims dims,
                             std::span<const double> pre_gate, std::span<const double> pre_up,
                             std::span<const double> grad_out, std::span<double> dx,
                             std::span<double> dw1, std::span<double> dw3, std::span<double> dw2,
                             Exec exec) {
  const std::int64_t d = dims.d;
  const std::int64_t h = dims.h;
  double* dx_p = ptr_or_null(dx);
  double* dw1_p = ptr_or_null(dw1);
  double* dw3_p = ptr_or_null(dw3);
  double* dw2_p = ptr_or_null(dw2);
  auto segment = [&](std::int64_t e) {
    swiglu_segment_backward(x.data(), w1.data() + e * h * d, w3.data() + e * h * d,
                            w2.data() + e * d * h, d, h, offsets[static_cast<std::size_t>(e)],
                            offsets[static_cast<std::size_t>(e + 1)], pre_gate.data(),
                            pre_up.data(), grad_out.data(), dx_p,
                            dw1_p ? dw1_p + e * h * d : nullptr, dw3_p ? dw3_p + e * h * d : nullptr,
                            dw2_p ? dw2_p + e * d * h : nullptr);
  };
  // Segments touch disjoint rows of dx and disjoint expert slices of the weights.
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t e = 0; e < dims.experts; ++e) segment(e);
  } else {
    for (std::int64_t e = 0; e < dims.experts; ++e) segment(e);
  }
}

void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<const double> key_bias,
                       AttentionDims dims, std::span<double> probs, std::span<double> out,
                       Exec exec) {
  const std::int64_t tasks = dims.batch * dims.hq;
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t t = 0; t < tasks; ++t)
      attention_head_forward(q.data(), k.data(), v.data(), key_bias, dims, t / dims.hq,
                             t % dims.hq, probs.data(), out.data());
  } else {
    for (std::int64_t t = 0; t < tasks; ++t)
      attention_head_forward(q.data(), k.data(), v.data(), key_bias, dims, t / dims.hq,
                             t % dims.hq, probs.data(), out.data());
  }
}

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        std::span<const double> grad_out, AttentionDims dims, std::span<double> dq,
                        std::span<double> dk, std::span<double> dv, Exec exec) {
  const std::int64_t tasks = dims.batch * dims.hkv;
  double* dq_p = ptr_or_null(dq);
  double* dk_p = ptr_or_null(dk);
  double* dv_p = ptr_or_null(dv);
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t t = 0; t < tasks; ++t)
      attention_group_backward(q.data(), k.data(), v.data(), probs.data(), grad_out.data(), dims,
                               t / dims.hkv, t % dims.hkv, dq_p, dk_p, dv_p);
  } else {
    for (std::int64_t t = 0; t < tasks; ++t)
      attention_group_backward(q.data(), k.data(), v.data(), probs.data(), grad_out.data(), dims,
                               t / dims.hkv, t % dims.hkv, dq_p, dk_p, dv_p);
  }
}

}  // namespace nimg::kernels
