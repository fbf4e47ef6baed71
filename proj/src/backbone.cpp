#include "nimg/backbone.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "nimg/kernels.hpp"
#include "nimg/rng.hpp"

namespace nimg {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

std::atomic<std::int64_t> g_text_kv_count{0};

constexpr double kLnEps = 1e-6;
constexpr double kRopeBase = 10000.0;

Tensor init_tensor(Shape shape, double std, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = store(rng.truncated_normal(std));
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor zero_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void check_modulated(const Tensor& x, const Tensor& m, std::string_view op) {
  if (x.rank() != 3 || m.shape() != Shape{x.dim(0), x.dim(2)})
    throw ShapeError(std::string(op) + ": x " + shape_str(x.shape()) + " with modulation " + shape_str(m.shape()));
}

// Row-wise LayerNorm of one (d) row; returns inverse std.
double ln_row(const double* in, double* xhat, std::int64_t d) {
  double mu = 0.0;
  for (std::int64_t j = 0; j < d; ++j) mu += in[j];
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (std::int64_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
  var /= static_cast<double>(d);
  const double is = 1.0 / std::sqrt(var + kLnEps);
  for (std::int64_t j = 0; j < d; ++j) xhat[j] = (in[j] - mu) * is;
  return is;
}

// Accumulates the LayerNorm input gradient of one row given d(xhat).
void ln_row_backward(const double* gxhat, const double* xhat, double is, std::int64_t d, double* gx) {
  double mg = 0.0, mgx = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    mg += gxhat[j];
    mgx += gxhat[j] * xhat[j];
  }
  mg /= static_cast<double>(d);
  mgx /= static_cast<double>(d);
  for (std::int64_t j = 0; j < d; ++j) gx[j] += is * (gxhat[j] - mg - xhat[j] * mgx);
}

std::vector<double> rope_inv_freq(std::int64_t head_dim) {
  const std::int64_t pairs = head_dim / 4;
  std::vector<double> f(static_cast<std::size_t>(pairs));
  for (std::int64_t i = 0; i < pairs; ++i)
    f[static_cast<std::size_t>(i)] = std::pow(kRopeBase, -static_cast<double>(i) / static_cast<double>(pairs));
  return f;
}

void check_rope_dim(std::int64_t head_dim) {
  if (head_dim <= 0 || head_dim % 4 != 0)
    throw ConfigError("rotary embedding needs head_dim divisible by 4, got " + std::to_string(head_dim));
}

// Rotates pairs of one head vector by the given per-pair angles (dir = +1 or -1).
void rotate(const double* in, double* out, const double* cosv, const double* sinv, std::int64_t head_dim,
            double dir) {
  for (std::int64_t p = 0; p < head_dim / 2; ++p) {
    const double c = cosv[p], s = dir * sinv[p];
    const double a = in[2 * p], b = in[2 * p + 1];
    out[2 * p] = a * c - b * s;
    out[2 * p + 1] = a * s + b * c;
  }
}

void rope_angles(std::int64_t pos_h, std::int64_t pos_w, std::int64_t head_dim, std::vector<double>& cosv,
                 std::vector<double>& sinv) {
  const auto inv = rope_inv_freq(head_dim);
  const std::int64_t pairs = head_dim / 4;
  cosv.resize(static_cast<std::size_t>(head_dim / 2));
  sinv.resize(cosv.size());
  for (std::int64_t i = 0; i < pairs; ++i) {
    const double ah = static_cast<double>(pos_h) * inv[static_cast<std::size_t>(i)];
    const double aw = static_cast<double>(pos_w) * inv[static_cast<std::size_t>(i)];
    cosv[static_cast<std::size_t>(i)] = std::cos(ah);
    sinv[static_cast<std::size_t>(i)] = std::sin(ah);
    cosv[static_cast<std::size_t>(pairs + i)] = std::cos(aw);
    sinv[static_cast<std::size_t>(pairs + i)] = std::sin(aw);
  }
}

std::vector<std::int64_t> patch_index(std::int64_t B, std::int64_t C, std::int64_t H, std::int64_t W,
                                      std::int64_t p) {
  const std::int64_t hp = H / p, wp = W / p, f = C * p * p;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(B * C * H * W));
  std::size_t o = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < hp; ++i)
      for (std::int64_t j = 0; j < wp; ++j)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t di = 0; di < p; ++di)
            for (std::int64_t dj = 0; dj < p; ++dj)
              idx[o++] = ((b * C + c) * H + (i * p + di)) * W + (j * p + dj);
  (void)f;
  return idx;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (d_model < 1 || head_dim < 1 || n_q_heads < 1 || n_kv_heads < 1)
    throw ConfigError("model dimensions must be positive");
  if (n_q_heads % n_kv_heads != 0)
    throw ConfigError("n_q_heads (" + std::to_string(n_q_heads) + ") must be a multiple of n_kv_heads (" +
                      std::to_string(n_kv_heads) + ")");
  check_rope_dim(head_dim);
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for the sinusoidal timestep features");
  if (dense_layers < 0 || dense_layers > n_layers) throw ConfigError("dense_layers outside [0, n_layers]");
  if (dense_layers < 3 && !allow_fewer_dense)
    throw ConfigError("dense_layers must be >= 3 unless allow_fewer_dense is set");
  if (n_experts < 1 || expert_hidden < 1 || shared_hidden < 1 || dense_hidden < 1)
    throw ConfigError("expert and FFN sizes must be positive");
  if (latent_channels < 1 || patch < 1) throw ConfigError("latent_channels and patch must be positive");
}

std::string block_prefix(int layer) { return "blocks." + std::to_string(layer) + "."; }

Tensor sinusoidal_features(const Tensor& t, std::int64_t dim) {
  if (t.rank() != 1) throw ShapeError("sinusoidal_features expects t of shape (B), got " + shape_str(t.shape()));
  if (dim < 2 || dim % 2 != 0) throw ConfigError("sinusoidal feature dim must be even");
  for (double v : t.data())
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("timestep " + std::to_string(v) + " outside [0, 1]");
  const std::int64_t B = t.dim(0), half = dim / 2;
  std::vector<double> freq(static_cast<std::size_t>(half));
  for (std::int64_t i = 0; i < half; ++i)
    freq[static_cast<std::size_t>(i)] = 1000.0 * std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
  std::vector<double> out(static_cast<std::size_t>(B * dim));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < half; ++i) {
      const double a = t.at(b) * freq[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(b * dim + i)] = std::sin(a);
      out[static_cast<std::size_t>(b * dim + half + i)] = std::cos(a);
    }
  store_inplace(out);
  Tensor y({B, dim}, std::move(out));
  ImplPtr ti = t.impl(), yi = y.impl();
  Tape::active().record(OpKind::Sinusoid, {t}, {y}, [=]() {
    if (!ti->requires_grad) return;
    auto& gt = grad_buffer(*ti);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < half; ++i) {
        const double w = freq[static_cast<std::size_t>(i)];
        const double a = ti->data[static_cast<std::size_t>(b)] * w;
        gt[static_cast<std::size_t>(b)] += yi->grad[static_cast<std::size_t>(b * dim + i)] * w * std::cos(a) -
                                           yi->grad[static_cast<std::size_t>(b * dim + half + i)] * w * std::sin(a);
      }
  });
  return y;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const auto d = cfg_.d_model, C = cfg_.latent_channels, p = cfg_.patch;
  const auto qd = cfg_.n_q_heads * cfg_.head_dim, kvd = cfg_.n_kv_heads * cfg_.head_dim;
  const double s = cfg_.init_std;
  params_.add("patch_embed.weight", init_tensor({d, C * p * p}, s, rng));
  params_.add("patch_embed.bias", zero_param({d}));
  params_.add("time_embed.fc1.weight", init_tensor({d, d}, s, rng));
  params_.add("time_embed.fc1.bias", zero_param({d}));
  params_.add("time_embed.fc2.weight", init_tensor({d, d}, s, rng));
  params_.add("time_embed.fc2.bias", zero_param({d}));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string b = block_prefix(l);
    params_.add(b + "img_mod.weight", zero_param({4 * d, d}));
    params_.add(b + "img_mod.bias", zero_param({4 * d}));
    params_.add(b + "attn.q.weight", init_tensor({qd, d}, s, rng));
    params_.add(b + "attn.k.weight", init_tensor({kvd, d}, s, rng));
    params_.add(b + "attn.v.weight", init_tensor({kvd, d}, s, rng));
    params_.add(b + "attn.o.weight", init_tensor({d, qd}, s, rng));
    params_.add(b + "attn.text_proj.weight", init_tensor({d, d}, s, rng));
    if (!cfg_.is_moe_layer(l)) {
      const auto h = cfg_.dense_hidden;
      params_.add(b + "ffn.w1", init_tensor({h, d}, s, rng));
      params_.add(b + "ffn.w3", init_tensor({h, d}, s, rng));
      params_.add(b + "ffn.w2", init_tensor({d, h}, s, rng));
    } else {
      const auto E = cfg_.n_experts, h = cfg_.expert_hidden, hs = cfg_.shared_hidden;
      params_.add(b + "moe.router.gate", init_tensor({2 * d, E}, cfg_.router_init_std, rng));
      params_.add(b + "moe.experts.w1", init_tensor({E, h, d}, s, rng));
      params_.add(b + "moe.experts.w3", init_tensor({E, h, d}, s, rng));
      params_.add(b + "moe.experts.w2", init_tensor({E, d, h}, s, rng));
      params_.add(b + "moe.shared.w1", init_tensor({hs, d}, s, rng));
      params_.add(b + "moe.shared.w3", init_tensor({hs, d}, s, rng));
      params_.add(b + "moe.shared.w2", init_tensor({d, hs}, s, rng));
    }
  }
  params_.add("final_proj.weight", init_tensor({C * p * p, d}, s, rng));
  params_.add("final_proj.bias", zero_param({C * p * p}));
}

Tensor Model::time_embedding(const Tensor& t) const {
  Tensor f = sinusoidal_features(t, cfg_.d_model);
  Tensor h = ops::silu(ops::add_bias(ops::linear(f, param("time_embed.fc1.weight")), param("time_embed.fc1.bias")));
  return ops::add_bias(ops::linear(h, param("time_embed.fc2.weight")), param("time_embed.fc2.bias"));
}

RouterConfig Model::router_config(int layer, StageId stage) const {
  RouterConfig rc;
  rc.d_model = cfg_.d_model;
  rc.n_experts = cfg_.n_experts;
  rc.capacity_factor = capacity_schedule(layer, stage, cfg_.n_layers, cfg_.dense_layers);
  if (rc.capacity_factor == kDenseLayer) throw ConfigError("layer " + std::to_string(layer) + " is dense");
  rc.gate_scale = cfg_.gate_scale;
  rc.gate_eps = cfg_.gate_eps;
  return rc;
}

ExpertBank Model::expert_bank(int layer) const {
  const std::string b = block_prefix(layer);
  return ExpertBank{param(b + "moe.experts.w1"), param(b + "moe.experts.w3"), param(b + "moe.experts.w2"),
                    param(b + "moe.shared.w1"),  param(b + "moe.shared.w3"),  param(b + "moe.shared.w2")};
}

// ---------------------------------------------------------------------------
// Fused ops

Tensor fused_gated_residual(const Tensor& x, const Tensor& g, const Tensor& r) {
  check_modulated(x, g, "fused_gated_residual");
  if (r.shape() != x.shape())
    throw ShapeError("fused_gated_residual: x " + shape_str(x.shape()) + " vs r " + shape_str(r.shape()));
  const std::int64_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
  std::vector<double> tg(static_cast<std::size_t>(B * d));
  for (std::size_t i = 0; i < tg.size(); ++i) tg[i] = std::tanh(g.data()[i]);
  std::vector<double> out(x.data().size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s)
      for (std::int64_t c = 0; c < d; ++c) {
        const auto i = static_cast<std::size_t>((b * S + s) * d + c);
        out[i] = x.data()[i] + tg[static_cast<std::size_t>(b * d + c)] * r.data()[i];
      }
  store_inplace(out);
  Tensor y(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), gi = g.impl(), ri = r.impl(), yi = y.impl();
  Tape::active().record(OpKind::GatedResidual, {x, g, r}, {y}, [=]() {
    const auto& gy = yi->grad;
    if (xi->requires_grad) {
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    const bool need_r = ri->requires_grad, need_g = gi->requires_grad;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < d; ++c) {
        const double t = tg[static_cast<std::size_t>(b * d + c)];
        double acc = 0.0;
        for (std::int64_t s = 0; s < S; ++s) {
          const auto i = static_cast<std::size_t>((b * S + s) * d + c);
          if (need_r) grad_buffer(*ri)[i] += gy[i] * t;
          acc += gy[i] * ri->data[i];
        }
        if (need_g) grad_buffer(*gi)[static_cast<std::size_t>(b * d + c)] += acc * (1.0 - t * t);
      }
  });
  return y;
}

Tensor fused_ln_scale(const Tensor& x, const Tensor& s) {
  check_modulated(x, s, "fused_ln_scale");
  const std::int64_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<std::size_t>(B * S));
  std::vector<double> out(x.data().size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t q = 0; q < S; ++q) {
      const auto row = static_cast<std::size_t>((b * S + q) * d);
      inv_std[static_cast<std::size_t>(b * S + q)] = ln_row(x.data().data() + row, xhat.data() + row, d);
      for (std::int64_t c = 0; c < d; ++c)
        out[row + c] = xhat[row + c] * (1.0 + s.data()[static_cast<std::size_t>(b * d + c)]);
    }
  store_inplace(out);
  Tensor y(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), si = s.impl(), yi = y.impl();
  Tape::active().record(OpKind::LnScale, {x, s}, {y}, [=]() {
    const auto& gy = yi->grad;
    std::vector<double> gxhat(static_cast<std::size_t>(d));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t q = 0; q < S; ++q) {
        const auto row = static_cast<std::size_t>((b * S + q) * d);
        for (std::int64_t c = 0; c < d; ++c) {
          const auto m = static_cast<std::size_t>(b * d + c);
          gxhat[static_cast<std::size_t>(c)] = gy[row + c] * (1.0 + si->data[m]);
          if (si->requires_grad) grad_buffer(*si)[m] += gy[row + c] * xhat[row + c];
        }
        if (xi->requires_grad)
          ln_row_backward(gxhat.data(), xhat.data() + row, inv_std[static_cast<std::size_t>(b * S + q)], d,
                          grad_buffer(*xi).data() + row);
      }
  });
  return y;
}

std::pair<Tensor, Tensor> fused_gate_res_ln_scale(const Tensor& x, const Tensor& g, const Tensor& r,
                                                  const Tensor& s) {
  check_modulated(x, g, "fused_gate_res_ln_scale");
  check_modulated(x, s, "fused_gate_res_ln_scale");
  if (r.shape() != x.shape())
    throw ShapeError("fused_gate_res_ln_scale: x " + shape_str(x.shape()) + " vs r " + shape_str(r.shape()));
  const std::int64_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
  std::vector<double> tg(static_cast<std::size_t>(B * d));
  for (std::size_t i = 0; i < tg.size(); ++i) tg[i] = std::tanh(g.data()[i]);
  std::vector<double> res(x.data().size());
  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<std::size_t>(B * S));
  std::vector<double> out(x.data().size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t q = 0; q < S; ++q) {
      const auto row = static_cast<std::size_t>((b * S + q) * d);
      for (std::int64_t c = 0; c < d; ++c)
        res[row + c] = store(x.data()[row + c] + tg[static_cast<std::size_t>(b * d + c)] * r.data()[row + c]);
      inv_std[static_cast<std::size_t>(b * S + q)] = ln_row(res.data() + row, xhat.data() + row, d);
      for (std::int64_t c = 0; c < d; ++c)
        out[row + c] = xhat[row + c] * (1.0 + s.data()[static_cast<std::size_t>(b * d + c)]);
    }
  store_inplace(out);
  Tensor res_t(x.shape(), std::move(res));
  Tensor y(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), gi = g.impl(), ri = r.impl(), si = s.impl(), resi = res_t.impl(), yi = y.impl();
  Tape::active().record(OpKind::GateResLnScale, {x, g, r, s}, {res_t, y}, [=]() {
    std::vector<double> gres(resi->grad.begin(), resi->grad.end());
    std::vector<double> gxhat(static_cast<std::size_t>(d));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t q = 0; q < S; ++q) {
        const auto row = static_cast<std::size_t>((b * S + q) * d);
        for (std::int64_t c = 0; c < d; ++c) {
          const auto m = static_cast<std::size_t>(b * d + c);
          gxhat[static_cast<std::size_t>(c)] = yi->grad[row + c] * (1.0 + si->data[m]);
          if (si->requires_grad) grad_buffer(*si)[m] += yi->grad[row + c] * xhat[row + c];
        }
        ln_row_backward(gxhat.data(), xhat.data() + row, inv_std[static_cast<std::size_t>(b * S + q)], d,
                        gres.data() + row);
      }
    if (xi->requires_grad) {
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gres.size(); ++i) gx[i] += gres[i];
    }
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < d; ++c) {
        const double t = tg[static_cast<std::size_t>(b * d + c)];
        double acc = 0.0;
        for (std::int64_t q = 0; q < S; ++q) {
          const auto i = static_cast<std::size_t>((b * S + q) * d + c);
          if (ri->requires_grad) grad_buffer(*ri)[i] += gres[i] * t;
          acc += gres[i] * ri->data[i];
        }
        if (gi->requires_grad) grad_buffer(*gi)[static_cast<std::size_t>(b * d + c)] += acc * (1.0 - t * t);
      }
  });
  return {res_t, y};
}

Tensor composed_gated_residual(const Tensor& x, const Tensor& g, const Tensor& r) {
  return ops::add(x, ops::mul(ops::broadcast_seq(ops::tanh(g), x.dim(1)), r));
}

Tensor composed_ln_scale(const Tensor& x, const Tensor& s) {
  return ops::mul(ops::layer_norm_last(x, kLnEps), ops::add_scalar(ops::broadcast_seq(s, x.dim(1)), 1.0));
}

std::pair<Tensor, Tensor> composed_gate_res_ln_scale(const Tensor& x, const Tensor& g, const Tensor& r,
                                                     const Tensor& s) {
  Tensor res = composed_gated_residual(x, g, r);
  return {res, composed_ln_scale(res, s)};
}

// ---------------------------------------------------------------------------
// Rotary positions and attention

std::vector<double> rope_2d(std::span<const double> x, std::int64_t pos_h, std::int64_t pos_w) {
  const auto D = static_cast<std::int64_t>(x.size());
  check_rope_dim(D);
  std::vector<double> cosv, sinv;
  rope_angles(pos_h, pos_w, D, cosv, sinv);
  std::vector<double> out(x.size());
  rotate(x.data(), out.data(), cosv.data(), sinv.data(), D, 1.0);
  return out;
}

Tensor apply_rope(const Tensor& x, std::span<const std::int64_t> pos_h, std::span<const std::int64_t> pos_w) {
  if (x.rank() != 4) throw ShapeError("apply_rope expects (B,S,H,D), got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), S = x.dim(1), H = x.dim(2), D = x.dim(3);
  check_rope_dim(D);
  if (static_cast<std::int64_t>(pos_h.size()) != S || static_cast<std::int64_t>(pos_w.size()) != S)
    throw ShapeError("apply_rope: " + std::to_string(pos_h.size()) + " positions for sequence " + std::to_string(S));
  auto cos_all = std::make_shared<std::vector<double>>(static_cast<std::size_t>(S * D / 2));
  auto sin_all = std::make_shared<std::vector<double>>(cos_all->size());
  std::vector<double> cosv, sinv;
  for (std::int64_t s = 0; s < S; ++s) {
    rope_angles(pos_h[static_cast<std::size_t>(s)], pos_w[static_cast<std::size_t>(s)], D, cosv, sinv);
    std::copy(cosv.begin(), cosv.end(), cos_all->begin() + s * D / 2);
    std::copy(sinv.begin(), sinv.end(), sin_all->begin() + s * D / 2);
  }
  std::vector<double> out(x.data().size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s)
      for (std::int64_t h = 0; h < H; ++h) {
        const auto off = static_cast<std::size_t>(((b * S + s) * H + h) * D);
        rotate(x.data().data() + off, out.data() + off, cos_all->data() + s * D / 2, sin_all->data() + s * D / 2, D, 1.0);
      }
  store_inplace(out);
  Tensor y(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), yi = y.impl();
  Tape::active().record(OpKind::Rope, {x}, {y}, [=]() {
    if (!xi->requires_grad) return;
    auto& gx = grad_buffer(*xi);
    std::vector<double> tmp(static_cast<std::size_t>(D));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t h = 0; h < H; ++h) {
          const auto off = static_cast<std::size_t>(((b * S + s) * H + h) * D);
          rotate(yi->grad.data() + off, tmp.data(), cos_all->data() + s * D / 2, sin_all->data() + s * D / 2, D, -1.0);
          for (std::int64_t c = 0; c < D; ++c) gx[off + c] += tmp[static_cast<std::size_t>(c)];
        }
  });
  return y;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const double> key_bias) {
  if (q.rank() != 4 || k.rank() != 4 || v.shape() != k.shape())
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  const kernels::AttentionDims dm{q.dim(0), q.dim(1), k.dim(1), q.dim(2), k.dim(2), q.dim(3)};
  if (k.dim(0) != dm.batch || k.dim(3) != dm.head_dim)
    throw ShapeError("attention: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
  if (dm.hq % dm.hkv != 0)
    throw ConfigError("attention: " + std::to_string(dm.hq) + " query heads not divisible by " + std::to_string(dm.hkv) + " kv heads");
  if (!key_bias.empty() && static_cast<std::int64_t>(key_bias.size()) != dm.sk)
    throw ShapeError("attention: key bias length " + std::to_string(key_bias.size()) + " vs " + std::to_string(dm.sk) + " keys");
  std::vector<double> probs(static_cast<std::size_t>(dm.batch * dm.hq * dm.sq * dm.sk));
  std::vector<double> out(static_cast<std::size_t>(dm.batch * dm.sq * dm.hq * dm.head_dim));
  kernels::attention_forward(q.data(), k.data(), v.data(), key_bias, dm, probs, out, kernels::default_exec());
  store_inplace(out);
  Tensor y(q.shape(), std::move(out));
  ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl(), yi = y.impl();
  Tape::active().record(OpKind::Attention, {q, k, v}, {y}, [=]() {
    auto grad_or_empty = [](const ImplPtr& t) -> std::span<double> {
      return t->requires_grad ? std::span<double>(grad_buffer(*t)) : std::span<double>();
    };
    kernels::attention_backward(qi->data, ki->data, vi->data, probs, yi->grad, dm, grad_or_empty(qi),
                                grad_or_empty(ki), grad_or_empty(vi), kernels::default_exec());
  });
  return y;
}

Tensor joint_attention(const Tensor& q_img, const Tensor& k_img, const Tensor& v_img, const Tensor& k_txt,
                       const Tensor& v_txt, std::span<const double> key_bias) {
  if (q_img.rank() != 4 || k_img.rank() != 4)
    throw ShapeError("joint_attention: q " + shape_str(q_img.shape()) + ", k " + shape_str(k_img.shape()));
  if (q_img.dim(2) % k_img.dim(2) != 0)
    throw ConfigError("joint_attention: " + std::to_string(q_img.dim(2)) + " query heads vs " +
                      std::to_string(k_img.dim(2)) + " kv heads");
  Tensor k = k_img, v = v_img;
  if (k_txt.defined() && k_txt.dim(1) > 0) {
    if (k_txt.dim(2) != k_img.dim(2) || v_txt.shape() != k_txt.shape())
      throw ConfigError("joint_attention: text kv heads " + shape_str(k_txt.shape()) + " vs image " + shape_str(k_img.shape()));
    k = ops::concat({k_img, k_txt}, 1);
    v = ops::concat({v_img, v_txt}, 1);
  }
  Tensor o = attention(q_img, k, v, key_bias);
  return ops::reshape(o, {q_img.dim(0), q_img.dim(1), q_img.dim(2) * q_img.dim(3)});
}

// ---------------------------------------------------------------------------
// Text path

std::vector<std::string> tokenize(const std::string& prompt) {
  std::istringstream is(prompt);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

std::vector<double> hash_embedding(const std::string& token, std::int64_t dim) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : token) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  Rng rng(derive_seed(h, 0x7e47));
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = rng.normal();
  return v;
}

TextContext precompute_text_kv(const Model& model, const std::vector<std::vector<std::string>>& prompts) {
  const auto& cfg = model.config();
  TextContext ctx;
  ctx.batch = static_cast<std::int64_t>(prompts.size());
  if (ctx.batch == 0) throw ShapeError("precompute_text_kv: empty batch");
  ctx.text_len = static_cast<std::int64_t>(prompts.front().size());
  for (const auto& p : prompts)
    if (static_cast<std::int64_t>(p.size()) != ctx.text_len)
      throw ShapeError("precompute_text_kv: prompts in one batch must have equal token counts");
  ++g_text_kv_count;
  const std::int64_t B = ctx.batch, St = ctx.text_len, d = cfg.d_model, Hkv = cfg.n_kv_heads, D = cfg.head_dim;
  std::vector<double> emb;
  emb.reserve(static_cast<std::size_t>(B * St * d));
  for (const auto& p : prompts)
    for (const auto& tok : p) {
      auto e = hash_embedding(tok, d);
      emb.insert(emb.end(), e.begin(), e.end());
    }
  store_inplace(emb);
  Tensor c({B, St, d}, std::move(emb));
  std::vector<std::int64_t> pos_h(static_cast<std::size_t>(St), 0), pos_w(static_cast<std::size_t>(St));
  for (std::int64_t j = 0; j < St; ++j) pos_w[static_cast<std::size_t>(j)] = j;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = block_prefix(l);
    Tensor h = ops::linear(c, model.param(b + "attn.text_proj.weight"));
    Tensor k = ops::reshape(ops::linear(h, model.param(b + "attn.k.weight")), {B, St, Hkv, D});
    Tensor v = ops::reshape(ops::linear(h, model.param(b + "attn.v.weight")), {B, St, Hkv, D});
    ctx.k_txt.push_back(apply_rope(ops::rms_norm_last(k), pos_h, pos_w));
    ctx.v_txt.push_back(v);
  }
  return ctx;
}

TextContext precompute_text_kv(const Model& model, const std::string& prompt) {
  return precompute_text_kv(model, std::vector<std::vector<std::string>>{tokenize(prompt)});
}

std::int64_t text_kv_compute_count() { return g_text_kv_count.load(); }
void reset_text_kv_compute_count() { g_text_kv_count = 0; }

std::int64_t kv_cache_elements(std::int64_t n_layers, std::int64_t seq, std::int64_t n_kv_heads,
                               std::int64_t head_dim) {
  return 2 * n_layers * seq * n_kv_heads * head_dim;
}

// ---------------------------------------------------------------------------
// Model forward

Tensor patchify(const Tensor& z, std::int64_t p) {
  if (z.rank() != 4) throw ShapeError("patchify expects (B,C,H,W), got " + shape_str(z.shape()));
  const std::int64_t B = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
  if (H % p != 0 || W % p != 0)
    throw ShapeError("patchify: latent " + shape_str(z.shape()) + " not divisible by patch " + std::to_string(p));
  const auto idx = patch_index(B, C, H, W, p);
  return ops::reshape(ops::take(z, idx), {B, (H / p) * (W / p), C * p * p});
}

Tensor unpatchify(const Tensor& tokens, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t p) {
  const std::int64_t B = tokens.dim(0);
  if (tokens.shape() != Shape{B, (H / p) * (W / p), C * p * p})
    throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " vs latent " + shape_str({B, C, H, W}));
  const auto fwd = patch_index(B, C, H, W, p);
  std::vector<std::int64_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[static_cast<std::size_t>(fwd[i])] = static_cast<std::int64_t>(i);
  return ops::reshape(ops::take(tokens, inv), {B, C, H, W});
}

ForwardResult model_forward(const Model& model, const Tensor& z_t, const Tensor& t, const TextContext& ctx,
                            const ForwardOptions& opts) {
  const auto& cfg = model.config();
  if (z_t.rank() != 4 || z_t.dim(1) != cfg.latent_channels)
    throw ShapeError("model_forward: latent " + shape_str(z_t.shape()) + " needs " + std::to_string(cfg.latent_channels) + " channels");
  const std::int64_t B = z_t.dim(0), H = z_t.dim(2), W = z_t.dim(3), p = cfg.patch, d = cfg.d_model;
  if (t.shape() != Shape{B}) throw ShapeError("model_forward: t " + shape_str(t.shape()) + " for batch " + std::to_string(B));
  if (ctx.batch != B || static_cast<int>(ctx.k_txt.size()) != cfg.n_layers)
    throw ShapeError("model_forward: text context for batch " + std::to_string(ctx.batch) + " with " +
                     std::to_string(ctx.k_txt.size()) + " layers");
  const std::int64_t gh = H / p, gw = W / p, S = gh * gw;
  const std::int64_t Hq = cfg.n_q_heads, Hkv = cfg.n_kv_heads, D = cfg.head_dim;
  std::vector<std::int64_t> pos_h(static_cast<std::size_t>(S)), pos_w(static_cast<std::size_t>(S));
  for (std::int64_t s = 0; s < S; ++s) {
    pos_h[static_cast<std::size_t>(s)] = s / gw;
    pos_w[static_cast<std::size_t>(s)] = s % gw;
  }

  ForwardResult result;
  Tensor x = ops::add_bias(ops::linear(patchify(z_t, p), model.param("patch_embed.weight")), model.param("patch_embed.bias"));
  Tensor temb = model.time_embedding(t);
  Tensor cond = ops::silu(temb);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = block_prefix(l);
    Tensor mod = ops::add_bias(ops::linear(cond, model.param(b + "img_mod.weight")), model.param(b + "img_mod.bias"));
    Tensor s1 = ops::slice(mod, 1, 0, d), g1 = ops::slice(mod, 1, d, d);
    Tensor s2 = ops::slice(mod, 1, 2 * d, d), g2 = ops::slice(mod, 1, 3 * d, d);

    Tensor h = fused_ln_scale(x, s1);
    Tensor q = ops::reshape(ops::linear(h, model.param(b + "attn.q.weight")), {B, S, Hq, D});
    Tensor k = ops::reshape(ops::linear(h, model.param(b + "attn.k.weight")), {B, S, Hkv, D});
    Tensor v = ops::reshape(ops::linear(h, model.param(b + "attn.v.weight")), {B, S, Hkv, D});
    q = apply_rope(ops::rms_norm_last(q), pos_h, pos_w);
    k = apply_rope(ops::rms_norm_last(k), pos_h, pos_w);
    Tensor a = ops::linear(joint_attention(q, k, v, ctx.k_txt[static_cast<std::size_t>(l)], ctx.v_txt[static_cast<std::size_t>(l)]),
                           model.param(b + "attn.o.weight"));

    if (!cfg.is_moe_layer(l)) {
      auto [res, h2] = fused_gate_res_ln_scale(x, g1, a, s2);
      Tensor f = swiglu(ops::reshape(h2, {B * S, d}), model.param(b + "ffn.w1"), model.param(b + "ffn.w3"),
                        model.param(b + "ffn.w2"));
      x = fused_gated_residual(res, g2, ops::reshape(f, {B, S, d}));
      continue;
    }
    x = fused_gated_residual(x, g1, a);
    Tensor x_norm = ops::scale(ops::rms_norm_last(x), 1.0 / std::sqrt(static_cast<double>(l + 1)));
    Tensor x_mod = ops::mul(x_norm, ops::add_scalar(ops::broadcast_seq(s2, S), 1.0));
    const RouterConfig rc = model.router_config(l, opts.stage);
    MoeResult m = moe_forward(x_norm, x_mod, temb, model.param(b + "moe.router.gate"), rc, model.expert_bank(l));
    result.router_logits.push_back(m.decision.logits);
    result.router_seq.push_back(m.decision.seq);
    if (opts.capture != nullptr) {
      RouteRecord rec;
      rec.layer = l;
      rec.step = opts.step;
      rec.seq = S;
      rec.experts = m.decision.experts;
      rec.capacity = m.decision.capacity;
      rec.grid_h = gh;
      rec.grid_w = gw;
      const auto logits = m.decision.logits.data();
      rec.logits.assign(logits.begin(), logits.begin() + S * rec.experts);
      rec.top_indices.assign(m.decision.top_indices.begin(),
                             m.decision.top_indices.begin() + rec.experts * rec.capacity);
      opts.capture->push_back(std::move(rec));
    }
    x = fused_gated_residual(x, g2, m.out);
  }
  Tensor out = ops::add_bias(ops::linear(ops::layer_norm_last(x, kLnEps), model.param("final_proj.weight")),
                             model.param("final_proj.bias"));
  result.velocity = unpatchify(out, cfg.latent_channels, H, W, p);
  return result;
}

}  // namespace nimg
