#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nimg/backbone.hpp"

namespace nimg {

struct Map2D {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<double> v;  // row-major

  double at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * w + c)]; }
};

// Raw per-token selection counts summed over the matching records. Empty
// `layers` or `steps` select all. No matching record -> EmptySelection.
Map2D allocation_counts(std::span<const RouteRecord> records, std::span<const int> layers = {},
                        std::span<const int> steps = {});
// allocation_counts divided by its maximum; an all-zero map stays zero.
Map2D allocation_map(std::span<const RouteRecord> records, std::span<const int> layers = {},
                     std::span<const int> steps = {});

// Per token, the number of distinct dominant experts (argmax of the logit
// row, lower index on ties) across the steps recorded at `layer`.
Map2D diversity_map(std::span<const RouteRecord> records, int layer);

// n evenly spaced steps of a T-step run: round(i (T - 1) / (n - 1)), with the
// 50-step, 10-slice case pinned to 0, 5, 11, 17, 22, 27, 33, 38, 44, 49.
std::vector<int> timestep_slice_steps(int T, int n = 10);
// Allocation map of each sliced step at `layer`; T is the number of steps
// recorded at that layer. An absent step -> MissingRecord.
std::vector<Map2D> timestep_slices(std::span<const RouteRecord> records, int layer, int n_slices = 10);

// Bilinear resize with half-pixel centers (align_corners = false).
Map2D upsample_bilinear(const Map2D& map, std::int64_t H, std::int64_t W);

// Binary PGM: "P5\n<w> <h>\n255\n" then round(255 * clamp((v - lo) / (hi - lo), 0, 1)) per pixel.
void write_pgm(const std::filesystem::path& path, const Map2D& map, double lo = 0.0, double hi = 1.0);
// One CSV line per row, shortest round-trip decimal values.
void write_map_csv(const std::filesystem::path& path, const Map2D& map);
Map2D read_map_csv(const std::filesystem::path& path);

// One JSON object per line with the RouteRecord fields.
void save_route_records(const std::filesystem::path& path, std::span<const RouteRecord> records);
std::vector<RouteRecord> load_route_records(const std::filesystem::path& path);

}  // namespace nimg
