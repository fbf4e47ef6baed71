#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nimg/databucket.hpp"

namespace nimg {

struct MetaRow {
  std::string id;
  std::string media_path;
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::string> captions;
  std::vector<std::string> caption_sources;
  std::vector<std::int64_t> caption_lengths;
  std::string media_source;
  std::optional<double> aesthetic_score;
  int quality_tier = 1;     // 1..5
  int episodic_bucket = 1;  // 1..8
  std::string sha256;
};

// Throws RowError(id) on any schema violation.
void validate_row(const MetaRow& row);

// Metadata CSV with a header row naming the MetaRow fields. Caption arrays are
// JSON arrays inside a quoted cell; an empty aesthetic_score cell means absent.
std::vector<MetaRow> read_metadata_csv(const std::filesystem::path& path);
void write_metadata_csv(const std::filesystem::path& path, std::span<const MetaRow> rows);

// Keeps the first row for each sha256.
std::vector<MetaRow> exact_dedup(std::span<const MetaRow> rows);

struct PhashRow {
  std::string id;
  std::string phash;  // 16 hex digits
  std::int64_t width = 0;
  std::int64_t height = 0;
  double quality = 0.0;
};

// Single-linkage clusters under Hamming distance <= radius; each cluster keeps
// the row with the largest (width * height, quality, id). Survivors keep input order.
std::vector<PhashRow> near_dedup(std::span<const PhashRow> rows, int radius);

std::uint64_t parse_phash(const std::string& id, const std::string& hex);
std::string format_phash(std::uint64_t hash);

// 64-bit perceptual hash of a row-major h x w grayscale image. A constant
// image hashes to 0.
std::uint64_t phash(std::span<const double> pixels, std::int64_t h, std::int64_t w);

enum class CaptionAction { Preserve, Refine, Synthesize };
const char* caption_action_name(CaptionAction a);
// Scores outside [0, 1] are clamped; *clamped reports that when given.
CaptionAction caption_route(double s, bool* clamped = nullptr);

enum class SourceKind { Real, DiffusionSynthetic, IllustrationUi, TextRender, Unknown };
SourceKind classify_source(const std::string& media_source);
// Unknown sources get the general template; *fallback reports that when given.
std::string derive_system_prompt(const MetaRow& row, bool* fallback = nullptr);

struct Image {
  std::int64_t w = 0;
  std::int64_t h = 0;
  std::int64_t channels = 1;
  std::vector<float> pixels;  // h x w x channels
};

// Resize to cover the crop (bilinear) and take the center.
Image fit_to_crop(const Image& img, Crop crop);

struct LoadResult {
  Image image;
  bool success = false;
};

struct HealthAlert {
  std::int64_t step = 0;
  double placeholder_fraction = 0.0;
};

// Substitutes a placeholder of the expected bucket shape when a fetch fails.
// Each shape's placeholder is replaced by a recent successful fetch every
// `refresh_every` successes of that shape.
class FallbackLoader {
 public:
  using Fetcher = std::function<std::optional<Image>(const MetaRow&)>;

  FallbackLoader(Fetcher fetcher, double alert_threshold = 0.05, std::int64_t refresh_every = 8,
                 std::int64_t channels = 3);

  LoadResult load(const MetaRow& row, Crop crop);

  // Closes the current batch and returns its placeholder fraction; a value
  // above the threshold appends a HealthAlert.
  double end_batch(std::int64_t step);

  const std::vector<std::pair<std::int64_t, double>>& metrics() const { return metrics_; }
  const std::vector<HealthAlert>& alerts() const { return alerts_; }
  // CSV "step,placeholder_fraction".
  void write_metrics_csv(const std::filesystem::path& path) const;

 private:
  Fetcher fetcher_;
  double alert_threshold_;
  std::int64_t refresh_every_;
  std::int64_t channels_;
  std::map<Crop, Image> placeholders_;
  std::map<Crop, std::int64_t> successes_;
  std::int64_t batch_total_ = 0;
  std::int64_t batch_failed_ = 0;
  std::vector<std::pair<std::int64_t, double>> metrics_;
  std::vector<HealthAlert> alerts_;
};

// Binary PGM (P5, maxval 255) to values in [0, 255].
Image read_pgm(const std::filesystem::path& path);

}  // namespace nimg
