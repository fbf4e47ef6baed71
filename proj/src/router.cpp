#include "nimg/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nimg {

const char* stage_name(StageId stage) {
  switch (stage) {
    case StageId::S256: return "s256";
    case StageId::S512: return "s512";
    case StageId::S1024: return "s1024";
  }
  return "?";
}

StageId parse_stage(const std::string& name) {
  if (name == "s256") return StageId::S256;
  if (name == "s512") return StageId::S512;
  if (name == "s1024") return StageId::S1024;
  throw ConfigError("unknown stage '" + name + "' (expected s256, s512 or s1024)");
}

std::int64_t stage_tokens(StageId stage) {
  switch (stage) {
    case StageId::S256: return 256;
    case StageId::S512: return 1024;
    case StageId::S1024: return 4096;
  }
  return 256;
}

void RouterConfig::validate() const {
  if (d_model < 1) throw ConfigError("router d_model must be >= 1");
  if (n_experts < 1) throw ConfigError("router n_experts must be >= 1");
  if (!(capacity_factor > 0.0)) throw ConfigError("capacity_factor must be > 0");
  if (!(gate_eps > 0.0)) throw ConfigError("gate_eps must be > 0");
}

std::int64_t capacity_for(std::int64_t seq, std::int64_t experts, double capacity_factor) {
  if (seq < 1 || experts < 1 || !(capacity_factor > 0.0))
    throw ConfigError("capacity_for needs S >= 1, E >= 1, C > 0");
  const long double exact = static_cast<long double>(capacity_factor) * seq / experts;
  auto cap = static_cast<std::int64_t>(std::ceil(exact));
  if (cap < 1) cap = 1;
  return std::min(cap, seq);
}

double capacity_schedule(int layer, StageId stage, int n_layers, int dense_layers) {
  if (layer < 0 || layer >= n_layers)
    throw IndexError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(n_layers) + ")");
  if (layer < dense_layers) return kDenseLayer;
  switch (stage) {
    case StageId::S256: return 8.0;
    case StageId::S512: return 4.0;
    case StageId::S1024: return layer < dense_layers + 2 ? 4.0 : 2.0;
  }
  return 8.0;
}

void select_tokens(std::span<const double> scores, std::int64_t batch, std::int64_t seq,
                   std::int64_t experts, std::int64_t capacity, std::vector<std::int64_t>& top,
                   std::vector<double>& affinity) {
  top.assign(static_cast<std::size_t>(batch * experts * capacity), 0);
  affinity.assign(top.size(), 0.0);
  std::vector<std::int64_t> order(static_cast<std::size_t>(seq));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t e = 0; e < experts; ++e) {
      auto score = [&](std::int64_t s) {
        return scores[static_cast<std::size_t>((b * seq + s) * experts + e)];
      };
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + capacity, order.end(),
                        [&](std::int64_t i, std::int64_t j) {
                          const double si = score(i), sj = score(j);
                          return si > sj || (si == sj && i < j);
                        });
      for (std::int64_t k = 0; k < capacity; ++k) {
        const auto slot = static_cast<std::size_t>((b * experts + e) * capacity + k);
        top[slot] = order[static_cast<std::size_t>(k)];
        affinity[slot] = score(order[static_cast<std::size_t>(k)]);
      }
    }
  }
}

Tensor expert_choice_gates(const Tensor& scores, std::span<const std::int64_t> top,
                           std::int64_t capacity, double alpha, double eps) {
  if (scores.rank() != 3) throw ShapeError("expert_choice_gates expects scores (B,S,E), got " + shape_str(scores.shape()));
  const std::int64_t B = scores.dim(0), S = scores.dim(1), E = scores.dim(2);
  if (static_cast<std::int64_t>(top.size()) != B * E * capacity)
    throw ShapeError("expert_choice_gates: selection size does not match (B,E,capacity)");
  std::vector<std::int64_t> idx(top.begin(), top.end());
  const auto sc = scores.data();
  auto a_of = [&](std::int64_t b, std::int64_t e, std::int64_t k) {
    const auto tok = idx[static_cast<std::size_t>((b * E + e) * capacity + k)];
    return sc[static_cast<std::size_t>((b * S + tok) * E + e)];
  };
  // Scatter-sum of affinities per token.
  std::vector<double> total(static_cast<std::size_t>(B * S), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t e = 0; e < E; ++e)
      for (std::int64_t k = 0; k < capacity; ++k)
        total[static_cast<std::size_t>(b * S + idx[static_cast<std::size_t>((b * E + e) * capacity + k)])] += a_of(b, e, k);
  std::vector<double> out(idx.size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t e = 0; e < E; ++e)
      for (std::int64_t k = 0; k < capacity; ++k) {
        const auto slot = static_cast<std::size_t>((b * E + e) * capacity + k);
        out[slot] = a_of(b, e, k) / (total[static_cast<std::size_t>(b * S + idx[slot])] + eps) * alpha;
      }
  store_inplace(out);
  Tensor gates({B, E, capacity}, std::move(out));
  auto si = scores.impl();
  auto gi = gates.impl();
  Tape::active().record(OpKind::ExpertChoiceGates, {scores}, {gates}, [=]() {
    if (!si->requires_grad) return;
    auto& gs = grad_buffer(*si);
    // d gate_j / d a_i = alpha * (delta_ij / (T+eps) - a_j / (T+eps)^2) for i, j on one token.
    std::vector<double> weighted(static_cast<std::size_t>(B * S), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t e = 0; e < E; ++e)
        for (std::int64_t k = 0; k < capacity; ++k) {
          const auto slot = static_cast<std::size_t>((b * E + e) * capacity + k);
          const auto tok = idx[slot];
          weighted[static_cast<std::size_t>(b * S + tok)] +=
              gi->grad[slot] * si->data[static_cast<std::size_t>((b * S + tok) * E + e)];
        }
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t e = 0; e < E; ++e)
        for (std::int64_t k = 0; k < capacity; ++k) {
          const auto slot = static_cast<std::size_t>((b * E + e) * capacity + k);
          const auto tok = idx[slot];
          const double denom = total[static_cast<std::size_t>(b * S + tok)] + eps;
          gs[static_cast<std::size_t>((b * S + tok) * E + e)] +=
              alpha * (gi->grad[slot] / denom - weighted[static_cast<std::size_t>(b * S + tok)] / (denom * denom));
        }
  });
  return gates;
}

RouterDecision route(const Tensor& x_norm, const Tensor& t_emb, const Tensor& router_weight,
                     const RouterConfig& cfg) {
  cfg.validate();
  if (x_norm.rank() != 3) throw ShapeError("route expects x_norm (B,S,d), got " + shape_str(x_norm.shape()));
  const std::int64_t B = x_norm.dim(0), S = x_norm.dim(1), d = x_norm.dim(2);
  const std::int64_t E = cfg.n_experts;
  if (d != cfg.d_model) throw ShapeError("route: x_norm width " + std::to_string(d) + " != d_model " + std::to_string(cfg.d_model));
  if (t_emb.shape() != Shape{B, d})
    throw ShapeError("route: t_emb " + shape_str(t_emb.shape()) + " vs x_norm " + shape_str(x_norm.shape()));
  if (router_weight.shape() != Shape{2 * d, E})
    throw ShapeError("route: router weight " + shape_str(router_weight.shape()) + " expected " + shape_str({2 * d, E}));
  const std::int64_t capacity = capacity_for(S, E, cfg.capacity_factor);
  if (capacity < 1) throw ConfigError("routing capacity is zero");

  Tensor router_input = ops::concat({x_norm, ops::broadcast_seq(t_emb, S)}, 2);
  Tensor logits2d = ops::matmul(ops::reshape(router_input, {B * S, 2 * d}), router_weight);
  Tensor logits = ops::reshape(logits2d, {B, S, E});
  Tensor scores = ops::softmax_last(logits);

  RouterDecision dec;
  dec.batch = B;
  dec.seq = S;
  dec.experts = E;
  dec.capacity = capacity;
  select_tokens(scores.data(), B, S, E, capacity, dec.top_indices, dec.affinity);
  dec.gates = expert_choice_gates(scores, dec.top_indices, capacity, cfg.gate_scale, cfg.gate_eps);
  dec.logits = logits;
  return dec;
}

}  // namespace nimg
