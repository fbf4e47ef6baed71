#include "nimg/moe.hpp"

#include "nimg/kernels.hpp"

namespace nimg {

void ExpertBank::validate() const {
  if (w1.rank() != 3 || w3.shape() != w1.shape())
    throw ShapeError("expert w1/w3 must be (E,h,d), got " + shape_str(w1.shape()) + " and " + shape_str(w3.shape()));
  const Shape down{w1.dim(0), w1.dim(2), w1.dim(1)};
  if (w2.shape() != down) throw ShapeError("expert w2 " + shape_str(w2.shape()) + " expected " + shape_str(down));
  if (shared_w1.rank() != 2 || shared_w1.dim(1) != d_model() || shared_w3.shape() != shared_w1.shape() ||
      shared_w2.shape() != Shape{d_model(), shared_w1.dim(0)})
    throw ShapeError("shared expert weights inconsistent with d_model " + std::to_string(d_model()));
}

void GroupedBatch::validate(std::int64_t experts) const {
  if (static_cast<std::int64_t>(offsets.size()) != experts + 1)
    throw ShapeError("grouped batch needs " + std::to_string(experts + 1) + " offsets, got " + std::to_string(offsets.size()));
  if (offsets.front() != 0 || offsets.back() != tokens.dim(0))
    throw ShapeError("grouped batch offsets must span [0, " + std::to_string(tokens.dim(0)) + "]");
  for (std::size_t i = 1; i < offsets.size(); ++i)
    if (offsets[i] < offsets[i - 1]) throw ShapeError("grouped batch offsets must be non-decreasing");
}

namespace {

// SwiGLU over expert-major row segments; weights laid out (E,h,d)/(E,d,h).
Tensor grouped_swiglu(OpKind kind, const Tensor& x, std::vector<std::int64_t> offsets,
                      const Tensor& w1, const Tensor& w3, const Tensor& w2,
                      kernels::GroupedSwiGLUDims dims) {
  const std::int64_t n = x.dim(0);
  std::vector<double> pre_gate(static_cast<std::size_t>(n * dims.h));
  std::vector<double> pre_up(pre_gate.size());
  std::vector<double> out(static_cast<std::size_t>(n * dims.d));
  kernels::grouped_swiglu_forward(x.data(), offsets, w1.data(), w3.data(), w2.data(), dims, pre_gate,
                                  pre_up, out, kernels::default_exec());
  store_inplace(out);
  Tensor y({n, dims.d}, std::move(out));
  auto xi = x.impl(), w1i = w1.impl(), w3i = w3.impl(), w2i = w2.impl(), yi = y.impl();
  Tape::active().record(kind, {x, w1, w3, w2}, {y}, [=]() {
    auto grad_or_empty = [](const std::shared_ptr<TensorImpl>& t) -> std::span<double> {
      return t->requires_grad ? std::span<double>(grad_buffer(*t)) : std::span<double>();
    };
    kernels::grouped_swiglu_backward(xi->data, offsets, w1i->data, w3i->data, w2i->data, dims, pre_gate,
                                     pre_up, yi->grad, grad_or_empty(xi), grad_or_empty(w1i),
                                     grad_or_empty(w3i), grad_or_empty(w2i), kernels::default_exec());
  });
  return y;
}

}  // namespace

Tensor swiglu(const Tensor& x, const Tensor& w1, const Tensor& w3, const Tensor& w2) {
  if (x.rank() != 2 || w1.rank() != 2 || w3.shape() != w1.shape() || w1.dim(1) != x.dim(1) ||
      w2.shape() != Shape{w1.dim(1), w1.dim(0)})
    throw ShapeError("swiglu: x " + shape_str(x.shape()) + ", w1 " + shape_str(w1.shape()) + ", w3 " +
                     shape_str(w3.shape()) + ", w2 " + shape_str(w2.shape()));
  // A single expert: the weights' memory layout already matches (1,h,d)/(1,d,h).
  return grouped_swiglu(OpKind::SwiGLU, x, {0, x.dim(0)}, w1, w3, w2, {1, w1.dim(1), w1.dim(0)});
}

Tensor swiglu_composed(const Tensor& x, const Tensor& w1, const Tensor& w3, const Tensor& w2) {
  return ops::linear(ops::mul(ops::silu(ops::linear(x, w1)), ops::linear(x, w3)), w2);
}

Tensor grouped_forward(const GroupedBatch& batch, const ExpertBank& bank) {
  batch.validate(bank.experts());
  if (batch.tokens.rank() != 2 || batch.tokens.dim(1) != bank.d_model())
    throw ShapeError("grouped tokens " + shape_str(batch.tokens.shape()) + " vs d_model " + std::to_string(bank.d_model()));
  return grouped_swiglu(OpKind::GroupedSwiGLU, batch.tokens, batch.offsets, bank.w1, bank.w3, bank.w2,
                        {bank.experts(), bank.d_model(), bank.hidden()});
}

Tensor grouped_forward_reference(const GroupedBatch& batch, const ExpertBank& bank) {
  batch.validate(bank.experts());
  const std::int64_t E = bank.experts(), h = bank.hidden(), d = bank.d_model();
  std::vector<Tensor> parts;
  for (std::int64_t e = 0; e < E; ++e) {
    const auto begin = batch.offsets[static_cast<std::size_t>(e)];
    const auto len = batch.offsets[static_cast<std::size_t>(e + 1)] - begin;
    if (len == 0) continue;
    Tensor w1 = ops::reshape(ops::slice(bank.w1, 0, e, 1), {h, d});
    Tensor w3 = ops::reshape(ops::slice(bank.w3, 0, e, 1), {h, d});
    Tensor w2 = ops::reshape(ops::slice(bank.w2, 0, e, 1), {d, h});
    parts.push_back(swiglu_composed(ops::slice(batch.tokens, 0, begin, len), w1, w3, w2));
  }
  if (parts.empty()) return Tensor::zeros({0, d});
  return ops::concat(parts, 0);
}

Tensor moe_combine(const Tensor& x_mod, const RouterDecision& dec, const ExpertBank& bank) {
  const std::int64_t B = dec.batch, S = dec.seq, E = dec.experts, cap = dec.capacity;
  const std::int64_t d = x_mod.dim(2);
  Tensor flat = ops::reshape(x_mod, {B * S, d});
  // Expert-major row order: expert, then sample, then slot.
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> gate_pos;
  rows.reserve(static_cast<std::size_t>(E * B * cap));
  std::vector<std::int64_t> offsets{0};
  for (std::int64_t e = 0; e < E; ++e) {
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t k = 0; k < cap; ++k) {
        rows.push_back(b * S + dec.index(b, e, k));
        gate_pos.push_back((b * E + e) * cap + k);
      }
    offsets.push_back(static_cast<std::int64_t>(rows.size()));
  }
  GroupedBatch batch{ops::gather_rows(flat, rows), offsets};
  Tensor expert_out = grouped_forward(batch, bank);
  Tensor gated = ops::scale_rows(expert_out, ops::take(dec.gates, gate_pos));
  Tensor routed = ops::index_add_rows(B * S, rows, gated);
  Tensor shared = swiglu(flat, bank.shared_w1, bank.shared_w3, bank.shared_w2);
  return ops::reshape(ops::add(shared, routed), {B, S, d});
}

MoeResult moe_forward(const Tensor& x_norm, const Tensor& x_mod, const Tensor& t_emb,
                      const Tensor& router_weight, const RouterConfig& cfg,
                      const ExpertBank& bank) {
  bank.validate();
  if (x_mod.shape() != x_norm.shape())
    throw ShapeError("moe_forward: x_mod " + shape_str(x_mod.shape()) + " vs x_norm " + shape_str(x_norm.shape()));
  if (cfg.n_experts != bank.experts())
    throw ConfigError("router expects " + std::to_string(cfg.n_experts) + " experts, bank has " + std::to_string(bank.experts()));
  MoeResult result;
  result.decision = route(x_norm, t_emb, router_weight, cfg);
  result.out = moe_combine(x_mod, result.decision, bank);
  return result;
}

}  // namespace nimg
