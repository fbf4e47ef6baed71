#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "nimg/rng.hpp"

namespace nimg {

struct Crop {
  std::int64_t w = 0;
  std::int64_t h = 0;
  auto operator<=>(const Crop&) const = default;
};

struct BucketPlan {
  std::int64_t base_res = 0;
  std::int64_t token_budget = 0;
  double ar_max = 1.0;
  std::int64_t stride = 16;
  std::vector<Crop> crops;  // sorted by (w, h)

  bool contains(Crop c) const;
};

// Every (w, h) with w, h stride multiples in [stride, 2 * base_res],
// (w/stride)(h/stride) <= token_budget and max(w/h, h/w) <= ar_max.
BucketPlan enumerate_crops(std::int64_t base_res, std::int64_t token_budget, double ar_max, std::int64_t stride);

// Fraction of a w x h image kept when it is resized to cover the crop and
// center-cropped: min(a, b) / max(a, b) with a = cw * h, b = ch * w.
double retained_fraction(std::int64_t w, std::int64_t h, Crop crop);

// Crop maximizing the retained fraction among crops that fit inside the image
// (cw <= w, ch <= h); ties go to the larger area, then the smaller (w, h).
Crop assign_bucket(std::int64_t w, std::int64_t h, const BucketPlan& plan);

struct Batch {
  Crop crop;
  std::vector<std::int64_t> rows;
};

// Two-level shuffled batch sampler: row indices are shuffled within each
// bucket, packed into fixed-size batches (the remainder is dropped), and the
// batches are shuffled across buckets. Each epoch derives its own seed.
class BucketSampler {
 public:
  // crops[i] is the bucket of row i.
  BucketSampler(std::vector<Crop> crops, std::int64_t batch_size, std::uint64_t seed);

  // Next batch, or nullopt at the end of the epoch.
  std::optional<Batch> next();
  // Starts the following epoch with a fresh shuffle.
  void next_epoch();

  std::uint64_t epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }
  std::size_t batches_per_epoch() const { return batches_.size(); }

  // "NSMP" state file: version, seed, epoch, cursor, batch size, packed batches.
  void save(const std::filesystem::path& path) const;
  static BucketSampler restore(const std::filesystem::path& path);

 private:
  BucketSampler() = default;
  void build_epoch();

  std::vector<Crop> crops_;
  std::int64_t batch_size_ = 1;
  std::uint64_t seed_ = 0;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<Batch> batches_;
};

// Draws rows by class weight: a class is picked with probability proportional
// to its weight (classes without rows are skipped), then a row uniformly.
class TierSampler {
 public:
  // labels[i] in [0, weights.size()) is the class of row i.
  TierSampler(std::vector<int> labels, std::vector<double> weights);
  std::int64_t sample(Rng& rng) const;

 private:
  std::vector<std::vector<std::int64_t>> members_;
  std::vector<double> cumulative_;
  std::vector<int> classes_;
};

// Labels 1..k by rank of (score, id): equal-frequency bands, label 1 lowest.
std::vector<int> episodic_partition(std::span<const double> scores, std::span<const std::int64_t> ids, int k = 8);

}  // namespace nimg
