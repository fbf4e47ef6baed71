#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nimg/tensor.hpp"

namespace nimg {

enum class StageId { S256, S512, S1024 };

const char* stage_name(StageId stage);
// Accepts "s256", "s512", "s1024"; raises ConfigError otherwise.
StageId parse_stage(const std::string& name);
// Latent token count of a stage's base resolution (256, 1024, 4096).
std::int64_t stage_tokens(StageId stage);

// Returned by capacity_schedule for layers that use a dense FFN.
inline constexpr double kDenseLayer = 0.0;

struct RouterConfig {
  std::int64_t d_model = 0;
  std::int64_t n_experts = 0;
  double capacity_factor = 8.0;
  double gate_scale = 1.0;
  double gate_eps = 1e-6;
  std::uint64_t seed = 0;

  void validate() const;
};

// One routing pass over a batch of B samples with S tokens each. Selection
// arrays are laid out (B, E, capacity).
struct RouterDecision {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::int64_t experts = 0;
  std::int64_t capacity = 0;
  std::vector<std::int64_t> top_indices;
  std::vector<double> affinity;
  Tensor gates;   // (B, E, capacity), differentiable
  Tensor logits;  // (B, S, E), differentiable

  std::int64_t index(std::int64_t b, std::int64_t e, std::int64_t k) const {
    return top_indices[static_cast<std::size_t>((b * experts + e) * capacity + k)];
  }
};

// ceil(C*S/E) clamped to [1, S].
std::int64_t capacity_for(std::int64_t seq, std::int64_t experts, double capacity_factor);

// Per-layer capacity factor for a training stage. The first dense_layers
// layers return kDenseLayer. At S1024 the first two MoE layers keep 4.0 and the
// rest use 2.0.
double capacity_schedule(int layer, StageId stage, int n_layers = 32, int dense_layers = 3);

// Expert-choice routing on the unmodulated state. router_weight has shape
// (2d, E); the router input is concat(x_norm, t_emb broadcast over S).
RouterDecision route(const Tensor& x_norm, const Tensor& t_emb, const Tensor& router_weight,
                     const RouterConfig& cfg);

// Selection from precomputed scores (B, S, E): each expert takes its top
// capacity tokens, ties to the lower token index. Fills top_indices/affinity.
void select_tokens(std::span<const double> scores, std::int64_t batch, std::int64_t seq,
                   std::int64_t experts, std::int64_t capacity, std::vector<std::int64_t>& top,
                   std::vector<double>& affinity);

// gates[b,e,k] = alpha * a / (sum of a over the experts selecting the same
// token + eps), differentiable in scores (B, S, E).
Tensor expert_choice_gates(const Tensor& scores, std::span<const std::int64_t> top,
                           std::int64_t capacity, double alpha, double eps);

}  // namespace nimg
