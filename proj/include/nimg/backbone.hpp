#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nimg/moe.hpp"
#include "nimg/params.hpp"
#include "nimg/router.hpp"
#include "nimg/tensor.hpp"

namespace nimg {

struct ModelConfig {
  int n_layers = 6;
  std::int64_t d_model = 32;
  std::int64_t n_q_heads = 4;
  std::int64_t n_kv_heads = 1;
  std::int64_t head_dim = 8;
  std::int64_t n_experts = 4;
  std::int64_t expert_hidden = 32;
  std::int64_t shared_hidden = 32;
  std::int64_t dense_hidden = 48;
  int dense_layers = 3;
  // Fewer than three dense layers is rejected unless set (ablations, tests).
  bool allow_fewer_dense = false;
  std::int64_t latent_channels = 4;
  std::int64_t patch = 2;
  double gate_scale = 1.0;
  double gate_eps = 1e-6;
  double init_std = 0.02;
  double router_init_std = 0.006;

  void validate() const;
  bool is_moe_layer(int layer) const { return layer >= dense_layers; }
};

// Full sinusoidal features of 1000*t: first half sin, second half cos, with
// log-spaced frequencies 10000^(-i/half). t has shape (B); output (B, dim).
Tensor sinusoidal_features(const Tensor& t, std::int64_t dim);

// Toy diffusion transformer with named parameters.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  Tensor& param(const std::string& name) { return params_.at(name); }
  const Tensor& param(const std::string& name) const { return params_.at(name); }

  // Timestep embedding (B) -> (B, d): sinusoid, Linear, SiLU, Linear.
  Tensor time_embedding(const Tensor& t) const;
  // Router configuration of a MoE layer at a stage.
  RouterConfig router_config(int layer, StageId stage) const;
  ExpertBank expert_bank(int layer) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

std::string block_prefix(int layer);

// x + tanh(g) * r with x, r (B,S,d) and g (B,d) broadcast over S.
Tensor fused_gated_residual(const Tensor& x, const Tensor& g, const Tensor& r);
// LayerNorm(x) * (1 + s), LayerNorm without affine and eps 1e-6.
Tensor fused_ln_scale(const Tensor& x, const Tensor& s);
// Returns (x + tanh(g) * r, LayerNorm(that) * (1 + s)).
std::pair<Tensor, Tensor> fused_gate_res_ln_scale(const Tensor& x, const Tensor& g, const Tensor& r,
                                                  const Tensor& s);

// Reference compositions of the fused ops from elementary ops.
Tensor composed_gated_residual(const Tensor& x, const Tensor& g, const Tensor& r);
Tensor composed_ln_scale(const Tensor& x, const Tensor& s);
std::pair<Tensor, Tensor> composed_gate_res_ln_scale(const Tensor& x, const Tensor& g, const Tensor& r,
                                                     const Tensor& s);

// Rotates a head vector: the first half of the dims by height-position angles,
// the second half by width-position angles, adjacent pairs within each half.
std::vector<double> rope_2d(std::span<const double> x, std::int64_t pos_h, std::int64_t pos_w);
// Applies rope_2d to every head of x (B,S,H,D) with per-token positions.
Tensor apply_rope(const Tensor& x, std::span<const std::int64_t> pos_h, std::span<const std::int64_t> pos_w);

// Grouped-query attention of q (B,Sq,Hq,D) over k, v (B,Sk,Hkv,D); key_bias
// (Sk) is added to the scaled scores (use -inf to mask). Output (B,Sq,Hq,D).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const double> key_bias = {});

// Per-layer text keys and values, computed once per prompt.
struct TextContext {
  std::int64_t batch = 0;
  std::int64_t text_len = 0;
  std::vector<Tensor> k_txt;  // per layer (B, S_t, Hkv, D), normalized and rotated
  std::vector<Tensor> v_txt;  // per layer (B, S_t, Hkv, D)
};

// Image queries attend to [image keys | text keys]. q/k are expected to be
// normalized and rotated already. Output (B, S_i, Hq*D).
Tensor joint_attention(const Tensor& q_img, const Tensor& k_img, const Tensor& v_img, const Tensor& k_txt,
                       const Tensor& v_txt, std::span<const double> key_bias = {});

// Whitespace tokenizer of the toy text encoder.
std::vector<std::string> tokenize(const std::string& prompt);
// Fixed hash embedding of a token (not trainable): (dim) values.
std::vector<double> hash_embedding(const std::string& token, std::int64_t dim);

// Computes the per-layer text context for a batch of tokenized prompts of equal
// length. Each call increments the process-wide text KV counter.
TextContext precompute_text_kv(const Model& model, const std::vector<std::vector<std::string>>& prompts);
TextContext precompute_text_kv(const Model& model, const std::string& prompt);
std::int64_t text_kv_compute_count();
void reset_text_kv_compute_count();

// Key-value cache elements for a sequence: 2 * layers * seq * kv_heads * head_dim.
std::int64_t kv_cache_elements(std::int64_t n_layers, std::int64_t seq, std::int64_t n_kv_heads,
                               std::int64_t head_dim);

// (B,C,H,W) <-> (B, (H/p)(W/p), C*p*p), patches in row-major grid order with
// channel-major features inside a patch.
Tensor patchify(const Tensor& z, std::int64_t patch);
Tensor unpatchify(const Tensor& tokens, std::int64_t channels, std::int64_t height, std::int64_t width,
                  std::int64_t patch);

// Routing snapshot of sample 0 of a batch at one MoE layer and step.
struct RouteRecord {
  int layer = 0;
  int step = 0;
  std::int64_t seq = 0;
  std::int64_t experts = 0;
  std::int64_t capacity = 0;
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;
  std::vector<double> logits;             // (S, E)
  std::vector<std::int64_t> top_indices;  // (E, capacity)
};

struct ForwardOptions {
  StageId stage = StageId::S256;
  int step = 0;
  std::vector<RouteRecord>* capture = nullptr;
};

struct ForwardResult {
  Tensor velocity;                    // same shape as z_t
  std::vector<Tensor> router_logits;  // per MoE layer, (B, S, E)
  std::vector<std::int64_t> router_seq;  // router input length per MoE layer
};

// Velocity prediction for z_t (B,C,H,W) at times t (B).
ForwardResult model_forward(const Model& model, const Tensor& z_t, const Tensor& t, const TextContext& ctx,
                            const ForwardOptions& opts = {});

}  // namespace nimg
