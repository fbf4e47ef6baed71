#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nimg/rng.hpp"
#include "nimg/router.hpp"
#include "nimg/tensor.hpp"

namespace nimg {

struct LossConfig {
  double lambda_z = 5e-7;
  double lambda_ortho = 1e-7;
  // Wavelet weight in high-resolution fine-tuning; pretraining stages use 0.
  double lambda_wavelet = 0.1;
  double alpha_hf = 1.0;
  double uniform_mix = 0.1;
  double sigma_shift = 1.0;
  double mu_lo = 0.5;
  double mu_hi = 1.15;
  std::int64_t n_lo = 256;
  std::int64_t n_hi = 4096;

  void validate() const;
  double wavelet_weight(StageId stage) const { return stage == StageId::S1024 ? lambda_wavelet : 0.0; }
};

// z_t = (1 - t) x0 + t eps with t (B) broadcast over each sample.
Tensor interpolate(const Tensor& x0, const Tensor& eps, const Tensor& t);
// Velocity target x0 - eps.
Tensor velocity_target(const Tensor& x0, const Tensor& eps);

// Squared error averaged per sample over all non-batch dims, then over the batch.
Tensor rf_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& eps);
// Same two-stage mean over samples of differing shapes (one tensor per sample).
Tensor rf_loss(const std::vector<Tensor>& v_pred, const std::vector<Tensor>& x0, const std::vector<Tensor>& eps);

// e^mu / (e^mu + (1/t - 1)^sigma) with t clamped to [1e-6, 1 - 1e-6].
double time_shift(double t, double mu, double sigma);
// Linear map of token count to the shift mu.
double shift_mu(std::int64_t tokens, const LossConfig& cfg = {});
// Uniform draw with probability uniform_mix, else shifted logit-normal.
struct TimestepDraw {
  double t = 0.0;
  bool uniform = false;
};
TimestepDraw draw_timestep(std::int64_t tokens, Rng& rng, const LossConfig& cfg = {});
inline double sample_timestep(std::int64_t tokens, Rng& rng, const LossConfig& cfg = {}) {
  return draw_timestep(tokens, rng, cfg).t;
}

// (1/S) sum over tokens of logsumexp(logits)^2; logits (..., E).
Tensor z_loss(const Tensor& logits);

// (1/E^2) || What^T What - I ||_F^2 with columns normalized by (||w|| + 1e-12).
struct OrthoLoss {
  double value = 0.0;
  std::vector<double> grad;  // same layout as the (rows, E) weight
};
OrthoLoss ortho_loss(std::span<const double> w, std::int64_t rows, std::int64_t cols);
// w <- w - lambda * grad, in place on the values; returns the loss before the step.
double ortho_update(Tensor& w, double lambda);

// Orthonormal single-level Haar transform over the last two dims of x (..., H, W).
// For a 2x2 block [[a, b], [c, d]]:
//   LL = (a+b+c+d)/2, LH = (a-b+c-d)/2, HL = (a+b-c-d)/2, HH = (a-b-c+d)/2.
enum Band { LL = 0, LH = 1, HL = 2, HH = 3 };
std::array<Tensor, 4> haar_dwt(const Tensor& x);
Tensor haar_idwt(const std::array<Tensor, 4>& bands);

// ||dLL||^2 + alpha_hf (||dLH||^2 + ||dHL||^2 + ||dHH||^2) with the rf_loss
// two-stage mean. x0_hat is the recovered clean latent v_pred + eps.
Tensor wavelet_loss(const Tensor& x0_hat, const Tensor& x0, double alpha_hf);

// rf + lambda_wavelet(stage) * wavelet. The wavelet term may be undefined when
// its weight is zero; the result is then rf itself.
Tensor total_loss(const Tensor& rf, const Tensor& wavelet, const LossConfig& cfg, StageId stage);

}  // namespace nimg
