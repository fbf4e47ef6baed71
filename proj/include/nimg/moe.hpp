#pragma once

#include <cstdint>
#include <vector>

#include "nimg/router.hpp"
#include "nimg/tensor.hpp"

namespace nimg {

// Routed experts w1, w3 (E,h,d) and w2 (E,d,h), plus the always-on shared
// expert with hidden size h_shared.
struct ExpertBank {
  Tensor w1;
  Tensor w3;
  Tensor w2;
  Tensor shared_w1;
  Tensor shared_w3;
  Tensor shared_w2;

  std::int64_t experts() const { return w1.dim(0); }
  std::int64_t hidden() const { return w1.dim(1); }
  std::int64_t d_model() const { return w1.dim(2); }
  void validate() const;
};

// Expert inputs concatenated by expert; rows offsets[e]..offsets[e+1] belong
// to expert e.
struct GroupedBatch {
  Tensor tokens;
  std::vector<std::int64_t> offsets;

  void validate(std::int64_t experts) const;
};

// (silu(X W1^T) * (X W3^T)) W2^T evaluated in one pass.
Tensor swiglu(const Tensor& x, const Tensor& w1, const Tensor& w3, const Tensor& w2);
// The same function built from separate linear/silu/mul ops.
Tensor swiglu_composed(const Tensor& x, const Tensor& w1, const Tensor& w3, const Tensor& w2);

Tensor grouped_forward(const GroupedBatch& batch, const ExpertBank& bank);
// Per-expert loop over swiglu_composed, for verification.
Tensor grouped_forward_reference(const GroupedBatch& batch, const ExpertBank& bank);

struct MoeResult {
  Tensor out;  // (B, S, d)
  RouterDecision decision;
};

// Routes on x_norm and t_emb, runs the selected rows of x_mod through their
// experts, scales by the gates, scatter-adds expert-major, and adds the shared
// expert applied to every token of x_mod.
MoeResult moe_forward(const Tensor& x_norm, const Tensor& x_mod, const Tensor& t_emb,
                      const Tensor& router_weight, const RouterConfig& cfg,
                      const ExpertBank& bank);

// Combine step for a given decision (used by moe_forward and the expert
// parallel simulator's reference path).
Tensor moe_combine(const Tensor& x_mod, const RouterDecision& decision, const ExpertBank& bank);

}  // namespace nimg
