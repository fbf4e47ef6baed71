#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "nimg/params.hpp"

namespace nimg {

enum class GroupKind { Muon, AdamW, AdamWNoDecay };
std::string_view group_name(GroupKind kind);

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double momentum = 0.95;  // Muon
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  int ns_steps = 5;
  void validate() const;
};

struct ParamGroup {
  GroupKind kind = GroupKind::AdamW;
  std::vector<std::string> members;
  double weight_decay = 0.0;
};

// Group of one parameter by name and rank: 1-D tensors and the router gate go
// to the no-decay group, patch/time embeddings, modulation and the output head
// to AdamW, attention/FFN/expert matrices to Muon. Anything else is a GroupError.
GroupKind classify_param(const std::string& name, const Shape& shape);

// Muon, AdamW and no-decay groups in that order; asserts they partition the store.
std::vector<ParamGroup> build_groups(const ParamStore& params, const OptimConfig& cfg);
void check_partition(const std::vector<ParamGroup>& groups, const ParamStore& params);
// CSV manifest: name,shape,group.
std::string groups_manifest(const std::vector<ParamGroup>& groups, const ParamStore& params);

// Quintic Newton-Schulz orthogonalization of a (rows, cols) matrix with
// coefficients (3.4445, -4.7750, 2.0315) after Frobenius normalization.
// A zero matrix is returned unchanged.
std::vector<double> newton_schulz(std::span<const double> m, std::int64_t rows, std::int64_t cols,
                                  int steps = 5);
double rms_adjust(std::int64_t rows, std::int64_t cols);

// Muon (Nesterov momentum, orthogonalized update) for the Muon group and AdamW
// with decoupled decay for the other two. Parameters without a gradient are
// treated as having a zero gradient.
class Optimizer {
 public:
  Optimizer(std::vector<ParamGroup> groups, OptimConfig cfg);

  const std::vector<ParamGroup>& groups() const { return groups_; }
  const OptimConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }
  const std::vector<double>& muon_buffer(const std::string& name) const { return state_.at(name).m; }

  void step(ParamStore& params, double lr);

 private:
  struct State {
    std::vector<double> m;
    std::vector<double> v;
  };
  void muon_update(const std::string& name, Tensor& p, std::span<const double> g, double lr, double wd);
  void adamw_update(const std::string& name, Tensor& p, std::span<const double> g, double lr, double wd);

  std::vector<ParamGroup> groups_;
  OptimConfig cfg_;
  std::map<std::string, State> state_;
  std::int64_t t_ = 0;
};

// Linear warmup from 0 to peak over warmup steps, then constant.
double wsm_lr(std::int64_t step, std::int64_t warmup, double peak);

enum class MergeProfile { Geometric, InvSqrt, Mean };
MergeProfile parse_merge_profile(std::string_view name);
std::string_view merge_profile_name(MergeProfile p);

struct MergeSpec {
  MergeProfile profile = MergeProfile::InvSqrt;
  std::int64_t window = 16;  // number of snapshots merged (k + 1 for geometric)
  double beta = 0.9;
};

// Weights c_0..c_{window-1}, oldest first.
//   geometric: c_0 = beta^k, c_j = (1 - beta) beta^(k - j) with k = window - 1
//   invsqrt:   c_j proportional to 1 - sqrt(j / window)
//   mean:      1 / window
std::vector<double> merge_weights(const MergeSpec& spec);
// w_j = sum_{m >= j} c_m.
std::vector<double> effective_lr_profile(std::span<const double> c);

struct CheckpointSet {
  std::vector<std::int64_t> steps;
  std::vector<ParamStore> snapshots;
  void validate() const;
};

// Weighted average of the last spec.window snapshots in 64-bit arithmetic.
ParamStore merge_checkpoints(const CheckpointSet& set, const MergeSpec& spec);

// Online EMA oracle: ema <- beta * ema + (1 - beta) * theta.
class OnlineEma {
 public:
  OnlineEma(const ParamStore& init, double beta);
  void update(const ParamStore& params);
  const std::map<std::string, std::vector<double>>& values() const { return ema_; }

 private:
  double beta_;
  std::map<std::string, std::vector<double>> ema_;
};

// Binary checkpoint: "NIMG", u32 version 1, u32 count, then per tensor u16 name
// length, name, u8 dtype (0 f32, 1 f64), u8 rank, u32 dims, payload. Little endian.
enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, Dtype dtype);
ParamStore load_checkpoint(const std::filesystem::path& path);

}  // namespace nimg
