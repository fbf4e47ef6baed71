#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nimg/config.hpp"

namespace nimg {

// Toy latent side per stage: s256 8x8, s512 16x16, s1024 32x32.
std::int64_t latent_side(StageId stage);

// Synthetic latents whose structure is named by a two-word caption: a
// brightness ramp ("bright-left", ...) and a pattern ("stripes-horizontal", ...).
struct SyntheticSample {
  std::vector<double> latent;  // (C, H, W)
  std::string caption;
};
const std::vector<std::string>& brightness_attributes();
const std::vector<std::string>& pattern_attributes();
SyntheticSample synthetic_sample(std::int64_t channels, std::int64_t side, Rng& rng);
// Deterministic latent for a known caption (no noise).
std::vector<double> render_caption(const std::string& caption, std::int64_t channels, std::int64_t side);

// Token used for the unconditional branch; the empty prompt maps to `len` copies.
inline constexpr const char* kNullToken = "<null>";
std::vector<std::string> prompt_tokens(const std::string& prompt);
std::vector<std::string> null_tokens(std::size_t len);

struct LossRow {
  std::int64_t step = 0;
  StageId stage = StageId::S256;
  double lr = 0.0;
  double rf = 0.0;
  double z = 0.0;
  double wavelet = 0.0;
  double total = 0.0;
  std::optional<double> eval_rf;
};

struct TrainHooks {
  std::optional<std::filesystem::path> out_dir;  // loss.csv, stages.log, checkpoints, resolved config
  // Called after every optimizer step with the updated parameters.
  std::function<void(std::int64_t step, const ParamStore&)> on_step;
  bool quiet = true;
};

struct TrainResult {
  std::vector<LossRow> rows;
  double initial_eval = 0.0;
  double final_eval = 0.0;
  std::vector<std::string> stage_log;  // one line per stage switch with per-layer capacity factors
  std::vector<std::filesystem::path> checkpoints;
  Model model;
};

// Runs the toy training loop: rectified-flow loss with router z-loss, the
// orthogonality update on router weights after backward, Muon/AdamW steps with
// warmup, CFG caption dropout, stage switches per the schedule. The eval loss
// uses a fixed set at the first stage's resolution.
TrainResult train(const RunConfig& cfg, const TrainHooks& hooks = {});

// Mean rf loss of the model on `n` fixed samples (fixed x0, eps and t from seed).
double eval_rf_loss(const Model& model, StageId stage, std::int64_t n, std::uint64_t seed, const LossConfig& loss);

std::string loss_csv_header();
std::string loss_csv_line(const LossRow& row);
std::string capacity_log_line(const Model& model, StageId stage, std::int64_t step);

// Copies every tensor of `snapshot` into the model's parameters; names and
// shapes must match exactly (CorruptCheckpoint otherwise).
void load_into(Model& model, const ParamStore& snapshot);

struct SampleResult {
  Tensor latent;  // (1, C, H, W)
  std::int64_t text_kv_computes = 0;
};

// Euler integration from t = 1 to t = 0, z <- z + dt * v, with classifier-free
// guidance v = v_u + s (v_c - v_u). Conditional and unconditional prompts are
// encoded together once; both branches run as one batch of two.
SampleResult sample(const Model& model, const std::string& prompt, StageId stage, std::int64_t steps,
                    double cfg_scale, std::uint64_t seed, std::vector<RouteRecord>* capture = nullptr);

}  // namespace nimg
