#include "nimg/objective.hpp"

#include <algorithm>
#include <cmath>

namespace nimg {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

constexpr double kOrthoEps = 1e-12;

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// (B, ...) -> (B, n) view for per-sample reductions.
Tensor flat_rows(const Tensor& x) {
  if (x.rank() < 1 || x.dim(0) < 1) throw ShapeError("expected a leading batch dim, got " + shape_str(x.shape()));
  return ops::reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

Tensor per_sample_mse(const Tensor& a, const Tensor& b) {
  return ops::mean_last(flat_rows(ops::square(ops::sub(a, b))));
}

}  // namespace

void LossConfig::validate() const {
  if (lambda_z < 0 || lambda_ortho < 0 || lambda_wavelet < 0 || alpha_hf < 0)
    throw ConfigError("loss weights must be non-negative");
  if (uniform_mix < 0 || uniform_mix > 1) throw ConfigError("uniform_mix must lie in [0, 1]");
  if (sigma_shift <= 0) throw ConfigError("sigma_shift must be positive");
  if (n_lo == n_hi) throw ConfigError("shift anchors need distinct token counts");
}

Tensor interpolate(const Tensor& x0, const Tensor& eps, const Tensor& t) {
  check_same(x0, eps, "interpolate");
  if (t.shape() != Shape{x0.dim(0)})
    throw ShapeError("interpolate: t " + shape_str(t.shape()) + " for batch " + shape_str(x0.shape()));
  for (double v : t.data())
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("timestep " + std::to_string(v) + " outside [0, 1]");
  Tensor keep = ops::add_scalar(ops::neg(t), 1.0);
  Tensor z = ops::add(ops::scale_rows(flat_rows(x0), keep), ops::scale_rows(flat_rows(eps), t));
  return ops::reshape(z, x0.shape());
}

Tensor velocity_target(const Tensor& x0, const Tensor& eps) {
  check_same(x0, eps, "velocity_target");
  return ops::sub(x0, eps);
}

Tensor rf_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& eps) {
  check_same(v_pred, x0, "rf_loss");
  return ops::mean(per_sample_mse(v_pred, velocity_target(x0, eps)));
}

Tensor rf_loss(const std::vector<Tensor>& v_pred, const std::vector<Tensor>& x0, const std::vector<Tensor>& eps) {
  if (v_pred.empty() || v_pred.size() != x0.size() || x0.size() != eps.size())
    throw ShapeError("rf_loss: mismatched sample lists");
  std::vector<Tensor> per;
  for (std::size_t i = 0; i < v_pred.size(); ++i) {
    check_same(v_pred[i], x0[i], "rf_loss");
    per.push_back(ops::reshape(ops::mean(ops::square(ops::sub(v_pred[i], velocity_target(x0[i], eps[i])))), {1}));
  }
  return ops::mean(ops::concat(per, 0));
}

double time_shift(double t, double mu, double sigma) {
  t = std::clamp(t, 1e-6, 1.0 - 1e-6);
  const double em = std::exp(mu);
  return em / (em + std::pow(1.0 / t - 1.0, sigma));
}

double shift_mu(std::int64_t tokens, const LossConfig& cfg) {
  const double slope = (cfg.mu_hi - cfg.mu_lo) / static_cast<double>(cfg.n_hi - cfg.n_lo);
  return cfg.mu_lo + slope * static_cast<double>(tokens - cfg.n_lo);
}

TimestepDraw draw_timestep(std::int64_t tokens, Rng& rng, const LossConfig& cfg) {
  if (tokens < 1) throw ConfigError("sample_timestep needs a positive token count");
  if (rng.uniform() < cfg.uniform_mix) return {rng.uniform(), true};
  const double z = rng.normal();
  return {time_shift(1.0 / (1.0 + std::exp(-z)), shift_mu(tokens, cfg), cfg.sigma_shift), false};
}

Tensor z_loss(const Tensor& logits) {
  if (logits.rank() < 1) throw ShapeError("z_loss expects (..., E) logits");
  return ops::mean(ops::square(ops::logsumexp_last(logits)));
}

OrthoLoss ortho_loss(std::span<const double> w, std::int64_t rows, std::int64_t cols) {
  if (static_cast<std::int64_t>(w.size()) != rows * cols || cols < 1)
    throw ShapeError("ortho_loss: " + std::to_string(w.size()) + " values for " + shape_str({rows, cols}));
  const auto R = static_cast<std::size_t>(rows), E = static_cast<std::size_t>(cols);
  std::vector<double> norm(E, 0.0), what(w.size());
  for (std::size_t j = 0; j < E; ++j) {
    for (std::size_t i = 0; i < R; ++i) norm[j] += w[i * E + j] * w[i * E + j];
    norm[j] = std::sqrt(norm[j]);
    for (std::size_t i = 0; i < R; ++i) what[i * E + j] = w[i * E + j] / (norm[j] + kOrthoEps);
  }
  // G = What^T What - I.
  std::vector<double> g(E * E, 0.0);
  for (std::size_t a = 0; a < E; ++a)
    for (std::size_t b = 0; b < E; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < R; ++i) s += what[i * E + a] * what[i * E + b];
      g[a * E + b] = s - (a == b ? 1.0 : 0.0);
    }
  const double inv = 1.0 / static_cast<double>(E * E);
  OrthoLoss out;
  for (double v : g) out.value += v * v;
  out.value *= inv;
  // dL/dWhat = (4/E^2) What G, then through the column normalization.
  out.grad.assign(w.size(), 0.0);
  std::vector<double> gh(R);
  for (std::size_t j = 0; j < E; ++j) {
    double proj = 0.0;
    for (std::size_t i = 0; i < R; ++i) {
      double s = 0.0;
      for (std::size_t b = 0; b < E; ++b) s += what[i * E + b] * g[b * E + j];
      gh[i] = 4.0 * inv * s;
      proj += w[i * E + j] * gh[i];
    }
    const double d = norm[j] + kOrthoEps;
    for (std::size_t i = 0; i < R; ++i) {
      double v = gh[i] / d;
      if (norm[j] > 0.0) v -= w[i * E + j] * proj / (norm[j] * d * d);
      out.grad[i * E + j] = v;
    }
  }
  return out;
}

double ortho_update(Tensor& w, double lambda) {
  if (w.rank() != 2) throw ShapeError("ortho_update expects a (rows, E) matrix, got " + shape_str(w.shape()));
  OrthoLoss l = ortho_loss(w.data(), w.dim(0), w.dim(1));
  auto data = w.data_mut();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = store(data[i] - lambda * l.grad[i]);
  return l.value;
}

std::array<Tensor, 4> haar_dwt(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("haar_dwt expects (..., H, W), got " + shape_str(x.shape()));
  const std::int64_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("haar_dwt needs even spatial dims, got " + shape_str(x.shape()));
  const std::int64_t lead = x.numel() / (H * W), h2 = H / 2, w2 = W / 2;
  Shape bshape = x.shape();
  bshape[bshape.size() - 2] = h2;
  bshape[bshape.size() - 1] = w2;
  std::array<std::vector<double>, 4> out;
  for (auto& o : out) o.resize(static_cast<std::size_t>(lead * h2 * w2));
  const auto in = x.data();
  for (std::int64_t n = 0; n < lead; ++n)
    for (std::int64_t i = 0; i < h2; ++i)
      for (std::int64_t j = 0; j < w2; ++j) {
        const auto base = static_cast<std::size_t>((n * H + 2 * i) * W + 2 * j);
        const double a = in[base], b = in[base + 1], c = in[base + W], d = in[base + W + 1];
        const auto o = static_cast<std::size_t>((n * h2 + i) * w2 + j);
        out[LL][o] = 0.5 * (a + b + c + d);
        out[LH][o] = 0.5 * (a - b + c - d);
        out[HL][o] = 0.5 * (a + b - c - d);
        out[HH][o] = 0.5 * (a - b - c + d);
      }
  std::array<Tensor, 4> bands;
  for (int k = 0; k < 4; ++k) {
    store_inplace(out[k]);
    bands[k] = Tensor(bshape, std::move(out[k]));
  }
  ImplPtr xi = x.impl();
  std::array<ImplPtr, 4> bi{bands[0].impl(), bands[1].impl(), bands[2].impl(), bands[3].impl()};
  Tape::active().record(OpKind::HaarDwt, {x}, {bands[0], bands[1], bands[2], bands[3]}, [=]() {
    if (!xi->requires_grad) return;
    auto& gx = grad_buffer(*xi);
    for (std::int64_t n = 0; n < lead; ++n)
      for (std::int64_t i = 0; i < h2; ++i)
        for (std::int64_t j = 0; j < w2; ++j) {
          const auto o = static_cast<std::size_t>((n * h2 + i) * w2 + j);
          const double ll = bi[LL]->grad[o], lh = bi[LH]->grad[o], hl = bi[HL]->grad[o], hh = bi[HH]->grad[o];
          const auto base = static_cast<std::size_t>((n * H + 2 * i) * W + 2 * j);
          gx[base] += 0.5 * (ll + lh + hl + hh);
          gx[base + 1] += 0.5 * (ll - lh + hl - hh);
          gx[base + W] += 0.5 * (ll + lh - hl - hh);
          gx[base + W + 1] += 0.5 * (ll - lh - hl + hh);
        }
  });
  return bands;
}

Tensor haar_idwt(const std::array<Tensor, 4>& bands) {
  for (int k = 1; k < 4; ++k) check_same(bands[0], bands[k], "haar_idwt");
  const Tensor& ll = bands[LL];
  if (ll.rank() < 2) throw ShapeError("haar_idwt expects (..., H/2, W/2) bands");
  const std::int64_t h2 = ll.dim(ll.rank() - 2), w2 = ll.dim(ll.rank() - 1), H = 2 * h2, W = 2 * w2;
  const std::int64_t lead = ll.numel() / (h2 * w2);
  Shape shape = ll.shape();
  shape[shape.size() - 2] = H;
  shape[shape.size() - 1] = W;
  std::vector<double> out(static_cast<std::size_t>(lead * H * W));
  for (std::int64_t n = 0; n < lead; ++n)
    for (std::int64_t i = 0; i < h2; ++i)
      for (std::int64_t j = 0; j < w2; ++j) {
        const auto o = static_cast<std::int64_t>((n * h2 + i) * w2 + j);
        const double a = bands[LL].at(o), b = bands[LH].at(o), c = bands[HL].at(o), d = bands[HH].at(o);
        const auto base = static_cast<std::size_t>((n * H + 2 * i) * W + 2 * j);
        out[base] = 0.5 * (a + b + c + d);
        out[base + 1] = 0.5 * (a - b + c - d);
        out[base + W] = 0.5 * (a + b - c - d);
        out[base + W + 1] = 0.5 * (a - b - c + d);
      }
  store_inplace(out);
  return Tensor(shape, std::move(out));
}

Tensor wavelet_loss(const Tensor& x0_hat, const Tensor& x0, double alpha_hf) {
  check_same(x0_hat, x0, "wavelet_loss");
  const auto bands = haar_dwt(ops::sub(x0_hat, x0));
  // Each band holds a quarter of the elements, so the band mean is scaled by 1/4.
  Tensor per = ops::mean_last(flat_rows(ops::square(bands[LL])));
  if (alpha_hf != 0.0) {
    Tensor hf = ops::add(ops::add(ops::mean_last(flat_rows(ops::square(bands[LH]))),
                                  ops::mean_last(flat_rows(ops::square(bands[HL])))),
                         ops::mean_last(flat_rows(ops::square(bands[HH]))));
    per = ops::add(per, ops::scale(hf, alpha_hf));
  }
  return ops::scale(ops::mean(per), 0.25);
}

Tensor total_loss(const Tensor& rf, const Tensor& wavelet, const LossConfig& cfg, StageId stage) {
  const double lw = cfg.wavelet_weight(stage);
  if (lw == 0.0) return rf;
  if (!wavelet.defined()) throw ConfigError("stage " + std::string(stage_name(stage)) + " needs the wavelet term");
  return ops::add(rf, ops::scale(wavelet, lw));
}

}  // namespace nimg
