#include "nimg/databucket.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "nimg/errors.hpp"

namespace nimg {

namespace {

// Retained fraction as the exact ratio num / den.
std::pair<std::int64_t, std::int64_t> retained_ratio(std::int64_t w, std::int64_t h, Crop c) {
  const std::int64_t a = c.w * h, b = c.h * w;
  return {std::min(a, b), std::max(a, b)};
}

// True if a's retained ratio exceeds b's, or ties with larger area, then smaller (w, h).
bool better(std::int64_t w, std::int64_t h, Crop a, Crop b) {
  const auto [na, da] = retained_ratio(w, h, a);
  const auto [nb, db] = retained_ratio(w, h, b);
  const __int128 lhs = static_cast<__int128>(na) * db, rhs = static_cast<__int128>(nb) * da;
  if (lhs != rhs) return lhs > rhs;
  if (a.w * a.h != b.w * b.h) return a.w * a.h > b.w * b.h;
  return a < b;
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CorruptCheckpoint("truncated sampler state");
  return v;
}

constexpr char kSamplerMagic[4] = {'N', 'S', 'M', 'P'};
constexpr std::uint32_t kSamplerVersion = 1;

}  // namespace

bool BucketPlan::contains(Crop c) const { return std::binary_search(crops.begin(), crops.end(), c); }

BucketPlan enumerate_crops(std::int64_t base_res, std::int64_t token_budget, double ar_max, std::int64_t stride) {
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (!(ar_max >= 1.0)) throw ConfigError("ar_max must be >= 1");
  if (base_res < stride || token_budget < 1) throw ConfigError("base resolution and token budget must be positive");
  BucketPlan plan{base_res, token_budget, ar_max, stride, {}};
  const std::int64_t n = 2 * base_res / stride;
  for (std::int64_t i = 1; i <= n; ++i)
    for (std::int64_t j = 1; j <= n; ++j) {
      if (i * j > token_budget) continue;
      if (static_cast<double>(std::max(i, j)) > ar_max * static_cast<double>(std::min(i, j))) continue;
      plan.crops.push_back({i * stride, j * stride});
    }
  if (plan.crops.empty()) throw ConfigError("no crop satisfies the token budget and aspect-ratio limit");
  std::sort(plan.crops.begin(), plan.crops.end());
  plan.crops.erase(std::unique(plan.crops.begin(), plan.crops.end()), plan.crops.end());
  return plan;
}

double retained_fraction(std::int64_t w, std::int64_t h, Crop crop) {
  const auto [num, den] = retained_ratio(w, h, crop);
  return static_cast<double>(num) / static_cast<double>(den);
}

Crop assign_bucket(std::int64_t w, std::int64_t h, const BucketPlan& plan) {
  if (w <= 0 || h <= 0) throw NoBucket("image " + std::to_string(w) + "x" + std::to_string(h) + " has no positive size");
  std::optional<Crop> best;
  for (const Crop& c : plan.crops) {
    if (c.w > w || c.h > h) continue;
    if (!best || better(w, h, c, *best)) best = c;
  }
  if (!best) throw NoBucket("no crop fits inside " + std::to_string(w) + "x" + std::to_string(h));
  return *best;
}

BucketSampler::BucketSampler(std::vector<Crop> crops, std::int64_t batch_size, std::uint64_t seed)
    : crops_(std::move(crops)), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  build_epoch();
}

void BucketSampler::build_epoch() {
  Rng rng(derive_seed(seed_, epoch_));
  std::map<Crop, std::vector<std::int64_t>> buckets;
  for (std::size_t i = 0; i < crops_.size(); ++i) buckets[crops_[i]].push_back(static_cast<std::int64_t>(i));
  batches_.clear();
  for (auto& [crop, rows] : buckets) {
    rng.shuffle(std::span<std::int64_t>(rows));
    const auto full = rows.size() / static_cast<std::size_t>(batch_size_);
    for (std::size_t b = 0; b < full; ++b) {
      const auto first = rows.begin() + static_cast<std::ptrdiff_t>(b * batch_size_);
      batches_.push_back({crop, std::vector<std::int64_t>(first, first + batch_size_)});
    }
  }
  rng.shuffle(std::span<Batch>(batches_));
  cursor_ = 0;
}

std::optional<Batch> BucketSampler::next() {
  if (cursor_ >= batches_.size()) return std::nullopt;
  return batches_[cursor_++];
}

void BucketSampler::next_epoch() {
  ++epoch_;
  build_epoch();
}

void BucketSampler::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write sampler state " + path.string());
  os.write(kSamplerMagic, 4);
  put<std::uint32_t>(os, kSamplerVersion);
  put<std::uint64_t>(os, seed_);
  put<std::uint64_t>(os, epoch_);
  put<std::uint64_t>(os, cursor_);
  put<std::int64_t>(os, batch_size_);
  put<std::uint64_t>(os, crops_.size());
  for (const Crop& c : crops_) {
    put<std::int64_t>(os, c.w);
    put<std::int64_t>(os, c.h);
  }
  put<std::uint64_t>(os, batches_.size());
  for (const Batch& b : batches_) {
    put<std::int64_t>(os, b.crop.w);
    put<std::int64_t>(os, b.crop.h);
    for (auto r : b.rows) put<std::int64_t>(os, r);
  }
  if (!os) throw FormatError("failed writing sampler state " + path.string());
}

BucketSampler BucketSampler::restore(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open sampler state " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kSamplerMagic, 4) != 0) throw FormatError("bad sampler state magic");
  if (get<std::uint32_t>(is) != kSamplerVersion) throw FormatError("unsupported sampler state version");
  BucketSampler s;
  s.seed_ = get<std::uint64_t>(is);
  s.epoch_ = get<std::uint64_t>(is);
  s.cursor_ = get<std::uint64_t>(is);
  s.batch_size_ = get<std::int64_t>(is);
  if (s.batch_size_ < 1) throw CorruptCheckpoint("sampler state has batch size " + std::to_string(s.batch_size_));
  s.crops_.resize(get<std::uint64_t>(is));
  for (Crop& c : s.crops_) {
    c.w = get<std::int64_t>(is);
    c.h = get<std::int64_t>(is);
  }
  s.batches_.resize(get<std::uint64_t>(is));
  for (Batch& b : s.batches_) {
    b.crop.w = get<std::int64_t>(is);
    b.crop.h = get<std::int64_t>(is);
    b.rows.resize(static_cast<std::size_t>(s.batch_size_));
    for (auto& r : b.rows) r = get<std::int64_t>(is);
  }
  if (s.cursor_ > s.batches_.size()) throw CorruptCheckpoint("sampler cursor beyond the batch list");
  return s;
}

TierSampler::TierSampler(std::vector<int> labels, std::vector<double> weights) {
  members_.resize(weights.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= weights.size())
      throw ConfigError("row " + std::to_string(i) + " has class " + std::to_string(labels[i]) + " without a weight");
    members_[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < weights.size(); ++c) {
    if (weights[c] < 0 || !std::isfinite(weights[c])) throw ConfigError("class weights must be finite and >= 0");
    if (weights[c] == 0.0 || members_[c].empty()) continue;
    acc += weights[c];
    cumulative_.push_back(acc);
    classes_.push_back(static_cast<int>(c));
  }
  if (classes_.empty()) throw ConfigError("all class weights are zero (or their classes are empty)");
}

std::int64_t TierSampler::sample(Rng& rng) const {
  const double u = rng.uniform() * cumulative_.back();
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  if (it == cumulative_.end()) --it;
  const auto& rows = members_[static_cast<std::size_t>(classes_[static_cast<std::size_t>(it - cumulative_.begin())])];
  return rows[static_cast<std::size_t>(rng.index(rows.size()))];
}

std::vector<int> episodic_partition(std::span<const double> scores, std::span<const std::int64_t> ids, int k) {
  if (scores.empty()) throw ConfigError("episodic_partition needs at least one row");
  if (ids.size() != scores.size()) throw ShapeError("episodic_partition: scores and ids differ in length");
  if (k < 1) throw ConfigError("episodic_partition needs k >= 1");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] < scores[b] : ids[a] < ids[b];
  });
  std::vector<int> labels(scores.size());
  const auto n = scores.size();
  for (std::size_t r = 0; r < n; ++r) labels[order[r]] = static_cast<int>(r * static_cast<std::size_t>(k) / n) + 1;
  return labels;
}

}  // namespace nimg
