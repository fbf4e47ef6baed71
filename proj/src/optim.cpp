#include "nimg/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "nimg/kernels.hpp"

namespace nimg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

bool contains(std::string_view s, std::string_view part) { return s.find(part) != std::string_view::npos; }

// Matrix view of a parameter: rank >= 3 tensors are a batch of (rows, cols)
// matrices over their leading dims.
struct MatrixView {
  std::int64_t batch, rows, cols;
};

MatrixView matrix_view(const Shape& s) {
  const auto r = static_cast<std::int64_t>(s.size());
  std::int64_t batch = 1;
  for (std::int64_t i = 0; i + 2 < r; ++i) batch *= s[static_cast<std::size_t>(i)];
  return {batch, s[static_cast<std::size_t>(r - 2)], s[static_cast<std::size_t>(r - 1)]};
}

}  // namespace

std::string_view group_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::Muon: return "muon";
    case GroupKind::AdamW: return "adamw";
    case GroupKind::AdamWNoDecay: return "adamw_nodecay";
  }
  return "?";
}

void OptimConfig::validate() const {
  if (lr < 0 || weight_decay < 0) throw ConfigError("lr and weight_decay must be non-negative");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("Adam betas must lie in [0, 1)");
  if (eps <= 0) throw ConfigError("eps must be positive");
  if (ns_steps < 1) throw ConfigError("ns_steps must be >= 1");
}

GroupKind classify_param(const std::string& name, const Shape& shape) {
  if (shape.size() <= 1 || ends_with(name, "router.gate")) return GroupKind::AdamWNoDecay;
  if (starts_with(name, "patch_embed.") || starts_with(name, "time_embed.") || starts_with(name, "final_proj.") ||
      contains(name, ".img_mod."))
    return GroupKind::AdamW;
  if (contains(name, ".attn.") || contains(name, ".ffn.") || contains(name, ".moe.experts.") ||
      contains(name, ".moe.shared."))
    return GroupKind::Muon;
  throw GroupError("no optimizer group for parameter '" + name + "' " + shape_str(shape));
}

std::vector<ParamGroup> build_groups(const ParamStore& params, const OptimConfig& cfg) {
  std::vector<ParamGroup> groups(3);
  groups[0] = {GroupKind::Muon, {}, cfg.weight_decay};
  groups[1] = {GroupKind::AdamW, {}, cfg.weight_decay};
  groups[2] = {GroupKind::AdamWNoDecay, {}, 0.0};
  for (const auto& [name, t] : params) groups[static_cast<std::size_t>(classify_param(name, t.shape()))].members.push_back(name);
  check_partition(groups, params);
  return groups;
}

void check_partition(const std::vector<ParamGroup>& groups, const ParamStore& params) {
  std::set<std::string> seen;
  for (const auto& g : groups)
    for (const auto& m : g.members) {
      if (!params.contains(m)) throw GroupError("group member '" + m + "' is not a parameter");
      if (!seen.insert(m).second) throw GroupError("parameter '" + m + "' is in more than one group");
      if (g.kind == GroupKind::Muon && params.at(m).rank() < 2)
        throw GroupError("1-D parameter '" + m + "' in the Muon group");
    }
  if (seen.size() != params.size())
    throw GroupError("groups cover " + std::to_string(seen.size()) + " of " + std::to_string(params.size()) + " parameters");
}

std::string groups_manifest(const std::vector<ParamGroup>& groups, const ParamStore& params) {
  std::ostringstream os;
  os << "name,shape,group\n";
  for (const auto& g : groups)
    for (const auto& m : g.members) os << m << ",\"" << shape_str(params.at(m).shape()) << "\"," << group_name(g.kind) << "\n";
  return os.str();
}

std::vector<double> newton_schulz(std::span<const double> m, std::int64_t rows, std::int64_t cols, int steps) {
  if (static_cast<std::int64_t>(m.size()) != rows * cols)
    throw ShapeError("newton_schulz: " + std::to_string(m.size()) + " values for " + shape_str({rows, cols}));
  constexpr double a = 3.4445, b = -4.7750, c = 2.0315;
  double norm = 0.0;
  for (double v : m) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) return std::vector<double>(m.size(), 0.0);
  // Iterate on the wide orientation so the Gram matrix is the smaller one.
  const bool tall = rows > cols;
  const std::int64_t r = tall ? cols : rows, n = tall ? rows : cols;
  std::vector<double> x(m.size());
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) {
      const double v = m[static_cast<std::size_t>(i * cols + j)] / norm;
      x[static_cast<std::size_t>(tall ? j * rows + i : i * cols + j)] = v;
    }
  const auto exec = kernels::default_exec();
  std::vector<double> A(static_cast<std::size_t>(r * r)), A2(A.size()), B(A.size()), BX(x.size());
  for (int it = 0; it < steps; ++it) {
    kernels::matmul_nt(x, x, A, r, n, r, exec);
    kernels::matmul_nn(A, A, A2, r, r, r, exec);
    for (std::size_t i = 0; i < B.size(); ++i) B[i] = b * A[i] + c * A2[i];
    kernels::matmul_nn(B, x, BX, r, r, n, exec);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = a * x[i] + BX[i];
  }
  if (!tall) return x;
  std::vector<double> out(m.size());
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(i * cols + j)] = x[static_cast<std::size_t>(j * rows + i)];
  return out;
}

double rms_adjust(std::int64_t rows, std::int64_t cols) {
  return 0.2 * std::sqrt(static_cast<double>(std::max(rows, cols)));
}

Optimizer::Optimizer(std::vector<ParamGroup> groups, OptimConfig cfg) : groups_(std::move(groups)), cfg_(cfg) {
  cfg_.validate();
}

void Optimizer::step(ParamStore& params, double lr) {
  ++t_;
  for (const auto& g : groups_)
    for (const auto& name : g.members) {
      Tensor& p = params.at(name);
      std::vector<double> zeros;
      std::span<const double> grad = p.grad();
      if (!p.has_grad()) {
        zeros.assign(static_cast<std::size_t>(p.numel()), 0.0);
        grad = zeros;
      }
      if (g.kind == GroupKind::Muon)
        muon_update(name, p, grad, lr, g.weight_decay);
      else
        adamw_update(name, p, grad, lr, g.weight_decay);
    }
}

void Optimizer::muon_update(const std::string& name, Tensor& p, std::span<const double> g, double lr, double wd) {
  if (p.rank() < 2) throw GroupError("Muon cannot update 1-D parameter '" + name + "'");
  auto& st = state_[name];
  if (st.m.empty()) st.m.assign(g.size(), 0.0);
  const double mu = cfg_.momentum;
  std::vector<double> look(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    st.m[i] = mu * st.m[i] + g[i];
    look[i] = g[i] + mu * st.m[i];
  }
  const auto mv = matrix_view(p.shape());
  const double scale = lr * rms_adjust(mv.rows, mv.cols);
  auto data = p.data_mut();
  const auto block = static_cast<std::size_t>(mv.rows * mv.cols);
  for (std::int64_t bi = 0; bi < mv.batch; ++bi) {
    const auto off = static_cast<std::size_t>(bi) * block;
    const auto u = newton_schulz(std::span<const double>(look).subspan(off, block), mv.rows, mv.cols, cfg_.ns_steps);
    for (std::size_t i = 0; i < block; ++i) data[off + i] = store(data[off + i] * (1.0 - lr * wd) - scale * u[i]);
  }
}

void Optimizer::adamw_update(const std::string& name, Tensor& p, std::span<const double> g, double lr, double wd) {
  auto& st = state_[name];
  if (st.m.empty()) {
    st.m.assign(g.size(), 0.0);
    st.v.assign(g.size(), 0.0);
  }
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto data = p.data_mut();
  for (std::size_t i = 0; i < g.size(); ++i) {
    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
    const double mh = st.m[i] / c1, vh = st.v[i] / c2;
    data[i] = store(data[i] * (1.0 - lr * wd) - lr * mh / (std::sqrt(vh) + cfg_.eps));
  }
}

double wsm_lr(std::int64_t step, std::int64_t warmup, double peak) {
  if (step < 0) throw DomainError("negative step");
  if (warmup <= 0 || step >= warmup) return peak;
  return peak * static_cast<double>(step) / static_cast<double>(warmup);
}

MergeProfile parse_merge_profile(std::string_view name) {
  if (name == "geometric") return MergeProfile::Geometric;
  if (name == "invsqrt") return MergeProfile::InvSqrt;
  if (name == "mean") return MergeProfile::Mean;
  throw ConfigError("unknown merge profile '" + std::string(name) + "' (geometric, invsqrt, mean)");
}

std::string_view merge_profile_name(MergeProfile p) {
  switch (p) {
    case MergeProfile::Geometric: return "geometric";
    case MergeProfile::InvSqrt: return "invsqrt";
    case MergeProfile::Mean: return "mean";
  }
  return "?";
}

std::vector<double> merge_weights(const MergeSpec& spec) {
  if (spec.window <= 0) throw ConfigError("merge window must be >= 1");
  const auto n = static_cast<std::size_t>(spec.window);
  std::vector<double> c(n);
  switch (spec.profile) {
    case MergeProfile::Geometric: {
      if (!(spec.beta > 0.0 && spec.beta < 1.0)) throw ConfigError("geometric merge needs beta in (0, 1)");
      const auto k = static_cast<double>(n - 1);
      c[0] = std::pow(spec.beta, k);
      for (std::size_t j = 1; j < n; ++j) c[j] = (1.0 - spec.beta) * std::pow(spec.beta, k - static_cast<double>(j));
      break;
    }
    case MergeProfile::InvSqrt: {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += c[j] = 1.0 - std::sqrt(static_cast<double>(j) / static_cast<double>(n));
      for (auto& v : c) v /= total;
      break;
    }
    case MergeProfile::Mean:
      std::fill(c.begin(), c.end(), 1.0 / static_cast<double>(n));
      break;
  }
  return c;
}

std::vector<double> effective_lr_profile(std::span<const double> c) {
  std::vector<double> w(c.size());
  double acc = 0.0;
  for (std::size_t j = c.size(); j-- > 0;) w[j] = acc += c[j];
  return w;
}

void CheckpointSet::validate() const {
  if (steps.size() != snapshots.size()) throw CorruptCheckpoint("checkpoint set: steps and snapshots differ in length");
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i] <= steps[i - 1]) throw CorruptCheckpoint("checkpoint steps must be strictly increasing");
  if (snapshots.empty()) return;
  const auto& ref = snapshots.front();
  for (const auto& s : snapshots) {
    if (s.size() != ref.size()) throw CorruptCheckpoint("snapshots hold different parameter sets");
    for (const auto& [name, t] : ref) {
      if (!s.contains(name)) throw CorruptCheckpoint("parameter '" + name + "' missing from a snapshot");
      if (s.at(name).shape() != t.shape())
        throw CorruptCheckpoint("parameter '" + name + "' has shape " + shape_str(s.at(name).shape()) + " vs " + shape_str(t.shape()));
    }
  }
}

ParamStore merge_checkpoints(const CheckpointSet& set, const MergeSpec& spec) {
  set.validate();
  const auto c = merge_weights(spec);
  if (c.size() > set.snapshots.size())
    throw ConfigError("merge window " + std::to_string(c.size()) + " exceeds " + std::to_string(set.snapshots.size()) + " snapshots");
  const std::size_t first = set.snapshots.size() - c.size();
  ParamStore out;
  // Accumulated as offsets from the newest snapshot, so identical snapshots
  // merge to exactly that snapshot.
  const ParamStore& last = set.snapshots.back();
  for (const auto& [name, t] : last) {
    const auto ref = t.data();
    std::vector<double> acc(static_cast<std::size_t>(t.numel()), 0.0);
    for (std::size_t j = 0; j < c.size(); ++j) {
      const auto src = set.snapshots[first + j].at(name).data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c[j] * (src[i] - ref[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += ref[i];
    out.add(name, Tensor(t.shape(), std::move(acc)));
  }
  return out;
}

OnlineEma::OnlineEma(const ParamStore& init, double beta) : beta_(beta) {
  for (const auto& [name, t] : init) ema_[name].assign(t.data().begin(), t.data().end());
}

void OnlineEma::update(const ParamStore& params) {
  for (auto& [name, e] : ema_) {
    const auto src = params.at(name).data();
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = beta_ * e[i] + (1.0 - beta_) * src[i];
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CorruptCheckpoint("truncated checkpoint while reading " + what);
  return v;
}

constexpr char kMagic[4] = {'N', 'I', 'M', 'G'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, Dtype dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.size() > 0xffff || t.rank() > 0xff) throw FormatError("tensor '" + name + "' cannot be encoded");
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
      if (dtype == Dtype::F32)
        put<float>(os, static_cast<float>(v));
      else
        put<double>(os, v);
    }
  }
  if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  const auto file_size = std::filesystem::file_size(path);
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("checkpoint shorter than its header");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path.string());
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = get<std::uint32_t>(is, "tensor count");
  ParamStore out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CorruptCheckpoint("truncated tensor name");
    const auto dtype = get<std::uint8_t>(is, "dtype");
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype) + " for '" + name + "'");
    const auto rank = get<std::uint8_t>(is, "rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(get<std::uint32_t>(is, "dims"));
      numel *= static_cast<std::uint64_t>(shape.back());
    }
    const std::uint64_t bytes = numel * (dtype == 0 ? 4 : 8);
    const auto pos = static_cast<std::uint64_t>(is.tellg());
    if (pos + bytes > file_size)
      throw CorruptCheckpoint("tensor '" + name + "' declares " + shape_str(shape) + " beyond the end of the file");
    std::vector<double> data(numel);
    for (auto& v : data) v = dtype == 0 ? static_cast<double>(get<float>(is, name)) : get<double>(is, name);
    out.add(name, Tensor(shape, std::move(data)));
  }
  if (static_cast<std::uint64_t>(is.tellg()) != file_size)
    throw CorruptCheckpoint("trailing bytes after " + std::to_string(count) + " tensors");
  return out;
}

}  // namespace nimg
