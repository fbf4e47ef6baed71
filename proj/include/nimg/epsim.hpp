#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nimg/moe.hpp"

namespace nimg {

// R logical devices; device r hosts experts [r * experts_per_device, (r+1) * experts_per_device).
struct Mesh {
  std::int64_t devices = 1;
  std::int64_t experts_per_device = 1;

  std::int64_t experts() const { return devices * experts_per_device; }
  std::int64_t owner(std::int64_t expert) const { return expert / experts_per_device; }
  void validate() const;
};

// counts[r][e]: rows device r sends to expert e.
using CountMatrix = std::vector<std::vector<std::int64_t>>;

// Row-major block of token rows.
struct Slab {
  std::int64_t width = 0;
  std::vector<double> data;

  std::int64_t rows() const { return width ? static_cast<std::int64_t>(data.size()) / width : 0; }
};

struct TraceRow {
  std::string phase;
  std::int64_t src = 0;
  std::int64_t dst = 0;
  std::int64_t count = 0;
};
using Trace = std::vector<TraceRow>;

// Device d receives, from every source r, the counts for d's local experts:
// result[d][r][j] = sent[r][d * experts_per_device + j].
std::vector<CountMatrix> counts_all_to_all(const Mesh& mesh, const CountMatrix& sent, Trace* trace = nullptr);

// slabs[r] holds r's rows ordered by expert. Device d receives the
// concatenation over r = 0..R-1 of r's rows for d's experts.
std::vector<Slab> tokens_all_to_all(const Mesh& mesh, const CountMatrix& sent, const std::vector<Slab>& slabs,
                                    Trace* trace = nullptr);
// Inverse of tokens_all_to_all for the same counts: returns rows to their sources.
std::vector<Slab> tokens_return(const Mesh& mesh, const CountMatrix& sent, const std::vector<Slab>& slabs,
                                Trace* trace = nullptr);

// local[r][j]: rows from source r for local expert j, laid out source-major.
// out[i] is the source-order position of the i-th row in expert-major order
// (expert, then source, then arrival order).
std::vector<std::int64_t> permute_indices(const CountMatrix& local);
std::vector<std::int64_t> inverse_perm(std::span<const std::int64_t> perm);

struct EpOptions {
  bool threaded = false;
  Trace* trace = nullptr;
};

struct EpResult {
  std::vector<Tensor> shards;  // per device, (B_r, S, d)
  Tensor out;                  // shards concatenated along the batch
};

// Batch rows are split contiguously over the devices (sizes differ by at most
// one). Each device routes its shard, dispatches selected tokens to expert
// owners, and combines the returned outputs with its gates and the shared expert.
EpResult distributed_moe_forward(const Mesh& mesh, const Tensor& x_norm, const Tensor& x_mod, const Tensor& t_emb,
                                 const Tensor& router_weight, const RouterConfig& cfg, const ExpertBank& bank,
                                 const EpOptions& opts = {});

// Randomized end-to-end check on one (R, E) mesh: the distributed forward
// against moe_forward, a permute/unpermute round trip, and row-multiset
// conservation through dispatch and return.
struct EpCheckReport {
  std::int64_t devices = 0;
  std::int64_t experts = 0;
  double max_abs_diff = 0.0;
  bool perm_round_trip = false;
  bool multiset_conserved = false;
  bool counts_conserved = false;  // dispatched == combined == B * E * capacity

  bool passed(double tol = 1e-6) const {
    return max_abs_diff <= tol && perm_round_trip && multiset_conserved && counts_conserved;
  }
};
EpCheckReport ep_self_check(std::int64_t devices, std::int64_t experts, std::uint64_t seed, bool threaded = false,
                            Trace* trace = nullptr);

// CSV "phase,src,dst,count".
void write_trace_csv(const std::filesystem::path& path, const Trace& trace);

}  // namespace nimg
