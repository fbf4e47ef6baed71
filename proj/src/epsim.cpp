#include "nimg/epsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <thread>

#include "nimg/errors.hpp"
#include "nimg/rng.hpp"

namespace nimg {

namespace {

void check_counts(const Mesh& mesh, const CountMatrix& sent) {
  mesh.validate();
  if (static_cast<std::int64_t>(sent.size()) != mesh.devices)
    throw ProtocolError("count matrix has " + std::to_string(sent.size()) + " rows for " +
                        std::to_string(mesh.devices) + " devices");
  for (std::size_t r = 0; r < sent.size(); ++r) {
    if (static_cast<std::int64_t>(sent[r].size()) != mesh.experts())
      throw ProtocolError("device " + std::to_string(r) + " reports counts for " + std::to_string(sent[r].size()) +
                          " experts, mesh has " + std::to_string(mesh.experts()));
    for (auto c : sent[r])
      if (c < 0) throw ProtocolError("device " + std::to_string(r) + " reports a negative count");
  }
}

// split[s][t]: rows device s sends to device t, laid out by destination.
CountMatrix device_split(const Mesh& mesh, const CountMatrix& sent) {
  CountMatrix split(static_cast<std::size_t>(mesh.devices), std::vector<std::int64_t>(mesh.devices, 0));
  for (std::int64_t r = 0; r < mesh.devices; ++r)
    for (std::int64_t e = 0; e < mesh.experts(); ++e) split[r][mesh.owner(e)] += sent[r][e];
  return split;
}

std::vector<Slab> exchange(const CountMatrix& split, const std::vector<Slab>& slabs, const char* phase, Trace* trace) {
  const auto R = split.size();
  if (slabs.size() != R) throw ProtocolError(std::string(phase) + ": expected one slab per device");
  const std::int64_t width = R ? slabs[0].width : 0;
  for (std::size_t s = 0; s < R; ++s) {
    if (slabs[s].width != width) throw ProtocolError(std::string(phase) + ": slabs differ in row width");
    const auto expect = std::accumulate(split[s].begin(), split[s].end(), std::int64_t{0});
    if (slabs[s].rows() != expect || static_cast<std::int64_t>(slabs[s].data.size()) != expect * width)
      throw ProtocolError(std::string(phase) + ": device " + std::to_string(s) + " holds " +
                          std::to_string(slabs[s].rows()) + " rows, counts say " + std::to_string(expect));
  }
  std::vector<Slab> out(R, Slab{width, {}});
  for (std::size_t s = 0; s < R; ++s) {
    std::int64_t offset = 0;
    for (std::size_t t = 0; t < R; ++t) {
      const auto n = split[s][t];
      const auto first = slabs[s].data.begin() + offset * width;
      out[t].data.insert(out[t].data.end(), first, first + n * width);
      offset += n;
      if (trace) trace->push_back({phase, static_cast<std::int64_t>(s), static_cast<std::int64_t>(t), n});
    }
  }
  return out;
}

// Runs fn(r) for every device, sequentially or one thread per device.
void for_each_device(std::int64_t R, bool threaded, const std::function<void(std::int64_t)>& fn) {
  if (!threaded || R == 1) {
    for (std::int64_t r = 0; r < R; ++r) fn(r);
    return;
  }
  const Precision p = precision();
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(R));
  std::vector<std::thread> pool;
  for (std::int64_t r = 0; r < R; ++r)
    pool.emplace_back([&, r] {
      PrecisionScope scope(p);
      NoGradGuard no_grad;
      try {
        fn(r);
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Tensor rows_tensor(const Slab& s) { return Tensor({s.rows(), s.width}, s.data); }

}  // namespace

void Mesh::validate() const {
  if (devices < 1 || experts_per_device < 1) throw ConfigError("mesh needs at least one device and one expert per device");
}

std::vector<CountMatrix> counts_all_to_all(const Mesh& mesh, const CountMatrix& sent, Trace* trace) {
  check_counts(mesh, sent);
  const auto R = mesh.devices, P = mesh.experts_per_device;
  std::vector<CountMatrix> out(static_cast<std::size_t>(R), CountMatrix(R, std::vector<std::int64_t>(P, 0)));
  for (std::int64_t d = 0; d < R; ++d)
    for (std::int64_t r = 0; r < R; ++r) {
      for (std::int64_t j = 0; j < P; ++j) out[d][r][j] = sent[r][d * P + j];
      if (trace) trace->push_back({"counts", r, d, P});
    }
  return out;
}

std::vector<Slab> tokens_all_to_all(const Mesh& mesh, const CountMatrix& sent, const std::vector<Slab>& slabs,
                                    Trace* trace) {
  check_counts(mesh, sent);
  return exchange(device_split(mesh, sent), slabs, "dispatch", trace);
}

std::vector<Slab> tokens_return(const Mesh& mesh, const CountMatrix& sent, const std::vector<Slab>& slabs,
                                Trace* trace) {
  check_counts(mesh, sent);
  const auto split = device_split(mesh, sent);
  CountMatrix back(split.size(), std::vector<std::int64_t>(split.size(), 0));
  for (std::size_t s = 0; s < split.size(); ++s)
    for (std::size_t t = 0; t < split.size(); ++t) back[t][s] = split[s][t];
  return exchange(back, slabs, "combine", trace);
}

std::vector<std::int64_t> permute_indices(const CountMatrix& local) {
  const auto R = local.size();
  const auto P = R ? local[0].size() : 0;
  std::vector<std::vector<std::int64_t>> src(R, std::vector<std::int64_t>(P)), dst(P, std::vector<std::int64_t>(R));
  std::int64_t acc = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (local[r].size() != P) throw ProtocolError("ragged local count matrix");
    for (std::size_t j = 0; j < P; ++j) {
      if (local[r][j] < 0) throw ProtocolError("negative count");
      src[r][j] = acc;
      acc += local[r][j];
    }
  }
  std::int64_t pos = 0;
  for (std::size_t j = 0; j < P; ++j)
    for (std::size_t r = 0; r < R; ++r) {
      dst[j][r] = pos;
      pos += local[r][j];
    }
  std::vector<std::int64_t> perm(static_cast<std::size_t>(acc));
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < P; ++j)
      for (std::int64_t k = 0; k < local[r][j]; ++k) perm[dst[j][r] + k] = src[r][j] + k;
  return perm;
}

std::vector<std::int64_t> inverse_perm(std::span<const std::int64_t> perm) {
  std::vector<std::int64_t> inv(perm.size(), -1);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto p = perm[i];
    if (p < 0 || p >= static_cast<std::int64_t>(perm.size()) || inv[p] != -1)
      throw ProtocolError("inverse_perm: input is not a permutation");
    inv[p] = static_cast<std::int64_t>(i);
  }
  return inv;
}

EpResult distributed_moe_forward(const Mesh& mesh, const Tensor& x_norm, const Tensor& x_mod, const Tensor& t_emb,
                                 const Tensor& router_weight, const RouterConfig& cfg, const ExpertBank& bank,
                                 const EpOptions& opts) {
  mesh.validate();
  bank.validate();
  if (mesh.experts() != bank.experts())
    throw ConfigError("mesh hosts " + std::to_string(mesh.experts()) + " experts, bank has " +
                      std::to_string(bank.experts()));
  if (x_norm.rank() != 3 || x_mod.shape() != x_norm.shape())
    throw ShapeError("distributed_moe_forward: x_norm and x_mod must share a (B, S, d) shape");
  const std::int64_t R = mesh.devices, P = mesh.experts_per_device, E = mesh.experts();
  const std::int64_t B = x_norm.dim(0), S = x_norm.dim(1), d = x_norm.dim(2);
  if (B < R) throw ConfigError("batch of " + std::to_string(B) + " cannot be split over " + std::to_string(R) + " devices");
  NoGradGuard no_grad;

  const auto begin = [&](std::int64_t r) { return r * B / R; };
  std::vector<RouterDecision> decisions(static_cast<std::size_t>(R));
  std::vector<Tensor> flat(static_cast<std::size_t>(R));
  std::vector<std::vector<std::int64_t>> rows(static_cast<std::size_t>(R)), gate_pos(static_cast<std::size_t>(R));
  std::vector<Slab> send(static_cast<std::size_t>(R), Slab{d, {}});
  CountMatrix sent(static_cast<std::size_t>(R), std::vector<std::int64_t>(E, 0));

  // Route locally and pack the selected tokens by expert.
  for_each_device(R, opts.threaded, [&](std::int64_t r) {
    const auto b0 = begin(r), nb = begin(r + 1) - b0;
    const Tensor xn = ops::slice(x_norm, 0, b0, nb);
    const Tensor te = ops::slice(t_emb, 0, b0, nb);
    auto& dec = decisions[r] = route(xn, te, router_weight, cfg);
    flat[r] = ops::reshape(ops::slice(x_mod, 0, b0, nb), {nb * S, d});
    for (std::int64_t e = 0; e < E; ++e) {
      for (std::int64_t b = 0; b < nb; ++b)
        for (std::int64_t k = 0; k < dec.capacity; ++k) {
          rows[r].push_back(b * S + dec.index(b, e, k));
          gate_pos[r].push_back((b * E + e) * dec.capacity + k);
        }
      sent[r][e] = nb * dec.capacity;
    }
    const auto src = flat[r].data();
    for (auto row : rows[r]) send[r].data.insert(send[r].data.end(), src.begin() + row * d, src.begin() + (row + 1) * d);
  });

  const auto received_counts = counts_all_to_all(mesh, sent, opts.trace);
  const auto received = tokens_all_to_all(mesh, sent, send, opts.trace);

  // Reorder to expert-major, run the local experts, restore source order.
  std::vector<Slab> processed(static_cast<std::size_t>(R), Slab{d, {}});
  for_each_device(R, opts.threaded, [&](std::int64_t dev) {
    const Slab& in = received[dev];
    processed[dev].data.assign(in.data.size(), 0.0);
    if (in.rows() == 0) return;
    const auto perm = permute_indices(received_counts[dev]);
    const Tensor grouped = ops::gather_rows(rows_tensor(in), perm);
    std::vector<std::int64_t> offsets{0};
    for (std::int64_t j = 0; j < P; ++j) {
      std::int64_t n = 0;
      for (std::int64_t r = 0; r < R; ++r) n += received_counts[dev][r][j];
      offsets.push_back(offsets.back() + n);
    }
    Tensor expert_out;
    if (P == 1) {
      const auto e = dev;
      const auto h = bank.hidden();
      expert_out = swiglu(grouped, ops::reshape(ops::slice(bank.w1, 0, e, 1), {h, d}),
                          ops::reshape(ops::slice(bank.w3, 0, e, 1), {h, d}),
                          ops::reshape(ops::slice(bank.w2, 0, e, 1), {d, h}));
    } else {
      ExpertBank local{ops::slice(bank.w1, 0, dev * P, P), ops::slice(bank.w3, 0, dev * P, P),
                       ops::slice(bank.w2, 0, dev * P, P), bank.shared_w1, bank.shared_w3, bank.shared_w2};
      expert_out = grouped_forward(GroupedBatch{grouped, offsets}, local);
    }
    const auto out = expert_out.data();
    for (std::size_t i = 0; i < perm.size(); ++i)
      std::copy(out.begin() + static_cast<std::ptrdiff_t>(i) * d, out.begin() + static_cast<std::ptrdiff_t>(i + 1) * d,
                processed[dev].data.begin() + perm[i] * d);
  });

  const auto returned = tokens_return(mesh, sent, processed, opts.trace);

  // Gate, scatter back onto the source tokens, add the shared expert.
  EpResult result;
  result.shards.resize(static_cast<std::size_t>(R));
  for_each_device(R, opts.threaded, [&](std::int64_t r) {
    const auto nb = begin(r + 1) - begin(r);
    const Tensor gated = ops::scale_rows(rows_tensor(returned[r]), ops::take(decisions[r].gates, gate_pos[r]));
    const Tensor routed = ops::index_add_rows(nb * S, rows[r], gated);
    const Tensor shared = swiglu(flat[r], bank.shared_w1, bank.shared_w3, bank.shared_w2);
    result.shards[r] = ops::reshape(ops::add(shared, routed), {nb, S, d});
  });
  result.out = R == 1 ? result.shards[0] : ops::concat(result.shards, 0);
  return result;
}

void write_trace_csv(const std::filesystem::path& path, const Trace& trace) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write trace " + path.string());
  os << "phase,src,dst,count\n";
  for (const auto& t : trace) os << t.phase << ',' << t.src << ',' << t.dst << ',' << t.count << '\n';
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double scale) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v));
}

std::vector<std::vector<double>> sorted_rows(const std::vector<Slab>& slabs) {
  std::vector<std::vector<double>> rows;
  for (const auto& s : slabs)
    for (std::int64_t i = 0; i < s.rows(); ++i)
      rows.emplace_back(s.data.begin() + i * s.width, s.data.begin() + (i + 1) * s.width);
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

EpCheckReport ep_self_check(std::int64_t devices, std::int64_t experts, std::uint64_t seed, bool threaded,
                            Trace* trace) {
  if (devices < 1 || experts % devices != 0)
    throw ConfigError("epsim check needs experts divisible by devices, got R=" + std::to_string(devices) +
                      " E=" + std::to_string(experts));
  const Mesh mesh{devices, experts / devices};
  constexpr std::int64_t B = 4, S = 12, d = 8, h = 6, hs = 5;
  Rng rng(seed);
  EpCheckReport rep{devices, experts};

  const Tensor xn = normal_tensor({B, S, d}, rng, 1.0), xm = normal_tensor({B, S, d}, rng, 1.0),
               temb = normal_tensor({B, d}, rng, 1.0), router = normal_tensor({2 * d, experts}, rng, 1.0);
  ExpertBank bank{normal_tensor({experts, h, d}, rng, 0.5), normal_tensor({experts, h, d}, rng, 0.5),
                  normal_tensor({experts, d, h}, rng, 0.5), normal_tensor({hs, d}, rng, 0.5),
                  normal_tensor({hs, d}, rng, 0.5),         normal_tensor({d, hs}, rng, 0.5)};
  RouterConfig cfg;
  cfg.d_model = d;
  cfg.n_experts = experts;
  cfg.capacity_factor = 2.0;

  Trace local;
  const Tensor ref = moe_forward(xn, xm, temb, router, cfg, bank).out;
  const Tensor got = distributed_moe_forward(mesh, xn, xm, temb, router, cfg, bank, {threaded, &local}).out;
  if (got.shape() != ref.shape()) throw ShapeError("distributed output shape differs from the reference");
  for (std::int64_t i = 0; i < ref.numel(); ++i) rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(got.at(i) - ref.at(i)));

  std::int64_t dispatched = 0, combined = 0;
  for (const auto& t : local) {
    if (t.phase == "dispatch") dispatched += t.count;
    if (t.phase == "combine") combined += t.count;
  }
  rep.counts_conserved = dispatched == combined && dispatched == B * experts * capacity_for(S, experts, 2.0);
  if (trace) trace->insert(trace->end(), local.begin(), local.end());

  // Random traffic, including a device that sends nothing.
  CountMatrix sent(static_cast<std::size_t>(devices), std::vector<std::int64_t>(static_cast<std::size_t>(experts)));
  for (auto& row : sent)
    for (auto& v : row) v = static_cast<std::int64_t>(rng.index(6));
  if (devices > 1) std::fill(sent[0].begin(), sent[0].end(), 0);
  std::vector<Slab> slabs;
  for (const auto& row : sent) {
    Slab s{3, {}};
    for (auto n : row)
      for (std::int64_t i = 0; i < 3 * n; ++i) s.data.push_back(rng.normal());
    slabs.push_back(std::move(s));
  }
  const auto recv = tokens_all_to_all(mesh, sent, slabs);
  const auto back = tokens_return(mesh, sent, recv);
  rep.multiset_conserved = sorted_rows(recv) == sorted_rows(slabs);
  for (std::int64_t r = 0; r < devices; ++r) rep.multiset_conserved &= back[r].data == slabs[r].data;

  rep.perm_round_trip = true;
  for (const auto& m : counts_all_to_all(mesh, sent)) {
    const auto perm = permute_indices(m);
    const auto inv = inverse_perm(perm);
    for (std::size_t i = 0; i < perm.size(); ++i)
      rep.perm_round_trip &= perm[static_cast<std::size_t>(inv[i])] == static_cast<std::int64_t>(i);
  }
  return rep;
}

}  // namespace nimg
