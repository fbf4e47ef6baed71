#include "nimg/curation.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "nimg/errors.hpp"

namespace nimg {

namespace {

using json = nlohmann::json;

const std::vector<std::string> kColumns = {
    "id",           "media_path",    "width",         "height",          "captions",
    "caption_sources", "caption_lengths", "media_source", "aesthetic_score", "quality_tier",
    "episodic_bucket", "sha256"};

// One RFC 4180 record; quoted fields may hold commas, doubled quotes and newlines.
bool read_record(std::istream& is, std::vector<std::string>& out) {
  out.clear();
  if (is.peek() == std::char_traits<char>::eof()) return false;
  std::string field;
  bool quoted = false;
  char c;
  while (is.get(c)) {
    if (quoted) {
      if (c == '"') {
        if (is.peek() == '"') {
          field += '"';
          is.get();
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw FormatError("unterminated quoted CSV field");
  out.push_back(std::move(field));
  return true;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::int64_t parse_int(const std::string& id, const std::string& field, const std::string& s) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw RowError(id, field + " is not an integer: '" + s + "'");
  }
}

bool is_hex(const std::string& s, std::size_t len) {
  return s.size() == len && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isxdigit(c); });
}

template <typename T>
std::vector<T> parse_json_array(const std::string& id, const std::string& field, const std::string& cell) {
  try {
    return json::parse(cell).get<std::vector<T>>();
  } catch (const json::exception& e) {
    throw RowError(id, field + " is not a JSON array: " + e.what());
  }
}

// Bilinear sample with half-pixel centers, edges clamped.
double bilinear(std::span<const double> px, std::int64_t h, std::int64_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::int64_t>(y), x0 = static_cast<std::int64_t>(x);
  const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const auto at = [&](std::int64_t r, std::int64_t c) { return px[static_cast<std::size_t>(r * w + c)]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

struct PromptTemplate {
  const char* high;
  const char* general;
};

constexpr PromptTemplate kTemplates[] = {
    {"A photorealistic, ultra-high-quality photograph with natural lighting and fine detail.",
     "A realistic photograph of an everyday scene."},
    {"A polished, high-quality synthetic render with clean composition.",
     "A synthetic image with a generated look."},
    {"A crisp, high-quality illustration or interface design with clean lines.",
     "An illustration or user-interface image."},
    {"A high-quality image with sharp, legible rendered text.", "An image containing rendered text."},
};
constexpr const char* kGeneralTemplate = "An image.";

}  // namespace

void validate_row(const MetaRow& row) {
  if (row.id.empty()) throw RowError(row.id, "empty id");
  if (row.width <= 0 || row.height <= 0) throw RowError(row.id, "width and height must be positive");
  if (row.captions.size() != row.caption_sources.size() || row.captions.size() != row.caption_lengths.size())
    throw RowError(row.id, "caption arrays are not aligned");
  if (row.quality_tier < 1 || row.quality_tier > 5) throw RowError(row.id, "quality_tier outside 1..5");
  if (row.episodic_bucket < 1 || row.episodic_bucket > 8) throw RowError(row.id, "episodic_bucket outside 1..8");
  if (!is_hex(row.sha256, 64)) throw RowError(row.id, "sha256 is not 64 hex digits");
}

std::vector<MetaRow> read_metadata_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open metadata " + path.string());
  std::vector<std::string> rec;
  if (!read_record(is, rec)) throw FormatError("metadata " + path.string() + " is empty");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rec.size(); ++i) col[rec[i]] = i;
  for (const auto& name : kColumns)
    if (!col.contains(name)) throw FormatError("metadata is missing column '" + name + "'");

  std::vector<MetaRow> rows;
  while (read_record(is, rec)) {
    if (rec.size() == 1 && rec[0].empty()) continue;
    if (rec.size() != col.size())
      throw RowError(rec.empty() ? "" : rec[col["id"]], "expected " + std::to_string(col.size()) + " fields");
    const auto cell = [&](const char* name) -> const std::string& { return rec[col[name]]; };
    MetaRow r;
    r.id = cell("id");
    r.media_path = cell("media_path");
    r.width = parse_int(r.id, "width", cell("width"));
    r.height = parse_int(r.id, "height", cell("height"));
    r.captions = parse_json_array<std::string>(r.id, "captions", cell("captions"));
    r.caption_sources = parse_json_array<std::string>(r.id, "caption_sources", cell("caption_sources"));
    r.caption_lengths = parse_json_array<std::int64_t>(r.id, "caption_lengths", cell("caption_lengths"));
    r.media_source = cell("media_source");
    if (!cell("aesthetic_score").empty()) {
      try {
        r.aesthetic_score = std::stod(cell("aesthetic_score"));
      } catch (const std::exception&) {
        throw RowError(r.id, "aesthetic_score is not a number");
      }
    }
    r.quality_tier = static_cast<int>(parse_int(r.id, "quality_tier", cell("quality_tier")));
    r.episodic_bucket = static_cast<int>(parse_int(r.id, "episodic_bucket", cell("episodic_bucket")));
    r.sha256 = cell("sha256");
    validate_row(r);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_metadata_csv(const std::filesystem::path& path, std::span<const MetaRow> rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write metadata " + path.string());
  for (std::size_t i = 0; i < kColumns.size(); ++i) os << (i ? "," : "") << kColumns[i];
  os << '\n';
  for (const auto& r : rows) {
    std::ostringstream score;
    if (r.aesthetic_score) score.precision(17), score << *r.aesthetic_score;
    os << csv_quote(r.id) << ',' << csv_quote(r.media_path) << ',' << r.width << ',' << r.height << ','
       << csv_quote(json(r.captions).dump()) << ',' << csv_quote(json(r.caption_sources).dump()) << ','
       << csv_quote(json(r.caption_lengths).dump()) << ',' << csv_quote(r.media_source) << ',' << score.str() << ','
       << r.quality_tier << ',' << r.episodic_bucket << ',' << r.sha256 << '\n';
  }
}

std::vector<MetaRow> exact_dedup(std::span<const MetaRow> rows) {
  std::unordered_set<std::string> seen;
  std::vector<MetaRow> out;
  for (const auto& r : rows) {
    if (!is_hex(r.sha256, 64)) throw RowError(r.id, "sha256 is not 64 hex digits");
    std::string key = r.sha256;
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (seen.insert(key).second) out.push_back(r);
  }
  return out;
}

std::uint64_t parse_phash(const std::string& id, const std::string& hex) {
  if (!is_hex(hex, 16)) throw RowError(id, "phash is not 16 hex digits: '" + hex + "'");
  return std::stoull(hex, nullptr, 16);
}

std::string format_phash(std::uint64_t hash) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << hash;
  return os.str();
}

std::vector<PhashRow> near_dedup(std::span<const PhashRow> rows, int radius) {
  if (radius < 0) throw ConfigError("near_dedup radius must be >= 0");
  const auto n = rows.size();
  std::vector<std::uint64_t> hashes(n);
  for (std::size_t i = 0; i < n; ++i) hashes[i] = parse_phash(rows[i].id, rows[i].phash);

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::popcount(hashes[i] ^ hashes[j]) <= radius) parent[find(i)] = find(j);

  const auto rank_less = [&](std::size_t a, std::size_t b) {
    const auto pa = rows[a].width * rows[a].height, pb = rows[b].width * rows[b].height;
    if (pa != pb) return pa < pb;
    if (rows[a].quality != rows[b].quality) return rows[a].quality < rows[b].quality;
    return rows[a].id < rows[b].id;
  };
  std::map<std::size_t, std::size_t> keeper;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, fresh] = keeper.try_emplace(find(i), i);
    if (!fresh && rank_less(it->second, i)) it->second = i;
  }
  std::vector<bool> keep(n, false);
  for (const auto& [root, idx] : keeper) keep[idx] = true;
  std::vector<PhashRow> out;
  for (std::size_t i = 0; i < n; ++i)
    if (keep[i]) out.push_back(rows[i]);
  return out;
}

std::uint64_t phash(std::span<const double> pixels, std::int64_t h, std::int64_t w) {
  if (h < 8 || w < 8) throw ShapeError("phash needs an image of at least 8x8");
  if (static_cast<std::int64_t>(pixels.size()) != h * w) throw ShapeError("phash: pixel count does not match h x w");
  constexpr int N = 32;
  std::vector<double> small(N * N);
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < N; ++c) {
      const double y = (r + 0.5) * static_cast<double>(h) / N - 0.5;
      const double x = (c + 0.5) * static_cast<double>(w) / N - 0.5;
      small[r * N + c] = bilinear(pixels, h, w, y, x);
    }
  // Centering first keeps a uniform brightness shift out of the AC terms.
  const double mean = std::accumulate(small.begin(), small.end(), 0.0) / (N * N);
  for (auto& v : small) v -= mean;

  std::array<std::array<double, N>, 8> basis{};
  for (int k = 0; k < 8; ++k)
    for (int n = 0; n < N; ++n) basis[k][n] = std::cos(std::numbers::pi * (n + 0.5) * k / N);
  std::array<double, 64> coef{};
  double scale = 0.0;
  for (double v : small) scale = std::max(scale, std::abs(v));
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      if (u == 0 && v == 0) continue;  // DC stays 0
      double acc = 0.0;
      for (int r = 0; r < N; ++r) {
        double row = 0.0;
        for (int c = 0; c < N; ++c) row += small[r * N + c] * basis[v][c];
        acc += row * basis[u][r];
      }
      // Rounding noise from the resize would otherwise decide the bits of flat images.
      if (std::abs(acc) <= 1e-9 * N * N * std::max(scale, 1.0)) acc = 0.0;
      coef[u * 8 + v] = acc;
    }
  auto sorted = coef;
  std::sort(sorted.begin(), sorted.end());
  const double median = 0.5 * (sorted[31] + sorted[32]);
  std::uint64_t hash = 0;
  for (int i = 0; i < 64; ++i)
    if (coef[i] > median) hash |= std::uint64_t{1} << (63 - i);
  return hash;
}

const char* caption_action_name(CaptionAction a) {
  switch (a) {
    case CaptionAction::Preserve: return "preserve";
    case CaptionAction::Refine: return "refine";
    case CaptionAction::Synthesize: return "synthesize";
  }
  return "?";
}

CaptionAction caption_route(double s, bool* clamped) {
  const bool out_of_range = !(s >= 0.0 && s <= 1.0);
  if (out_of_range) {
    std::cerr << "warning: alignment score " << s << " outside [0, 1], clamping\n";
    s = std::isnan(s) ? 0.0 : std::clamp(s, 0.0, 1.0);
  }
  if (clamped) *clamped = out_of_range;
  if (s > 0.65) return CaptionAction::Preserve;
  if (s >= 0.30) return CaptionAction::Refine;
  return CaptionAction::Synthesize;
}

SourceKind classify_source(const std::string& media_source) {
  std::string s = media_source;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "real" || s == "photo" || s == "photograph") return SourceKind::Real;
  if (s == "diffusion-synthetic" || s == "synthetic" || s == "diffusion") return SourceKind::DiffusionSynthetic;
  if (s == "illustration" || s == "ui" || s == "illustration/ui") return SourceKind::IllustrationUi;
  if (s == "text-render" || s == "text") return SourceKind::TextRender;
  return SourceKind::Unknown;
}

std::string derive_system_prompt(const MetaRow& row, bool* fallback) {
  const SourceKind kind = classify_source(row.media_source);
  if (fallback) *fallback = kind == SourceKind::Unknown;
  if (kind == SourceKind::Unknown) {
    std::cerr << "warning: row '" << row.id << "' has unknown media_source '" << row.media_source
              << "', using the general prompt\n";
    return kGeneralTemplate;
  }
  const auto& t = kTemplates[static_cast<int>(kind)];
  return row.quality_tier >= 4 ? t.high : t.general;
}

Image fit_to_crop(const Image& img, Crop crop) {
  if (img.w <= 0 || img.h <= 0 || img.channels <= 0) throw ShapeError("fit_to_crop: empty image");
  const double s = std::max(static_cast<double>(crop.w) / img.w, static_cast<double>(crop.h) / img.h);
  const double ox = 0.5 * (img.w * s - crop.w), oy = 0.5 * (img.h * s - crop.h);
  Image out{crop.w, crop.h, img.channels, std::vector<float>(static_cast<std::size_t>(crop.w * crop.h * img.channels))};
  std::vector<double> plane(static_cast<std::size_t>(img.w * img.h));
  for (std::int64_t ch = 0; ch < img.channels; ++ch) {
    for (std::int64_t i = 0; i < img.w * img.h; ++i) plane[i] = img.pixels[i * img.channels + ch];
    for (std::int64_t r = 0; r < crop.h; ++r)
      for (std::int64_t c = 0; c < crop.w; ++c) {
        const double y = (r + oy + 0.5) / s - 0.5, x = (c + ox + 0.5) / s - 0.5;
        out.pixels[(r * crop.w + c) * img.channels + ch] = static_cast<float>(bilinear(plane, img.h, img.w, y, x));
      }
  }
  return out;
}

FallbackLoader::FallbackLoader(Fetcher fetcher, double alert_threshold, std::int64_t refresh_every,
                               std::int64_t channels)
    : fetcher_(std::move(fetcher)), alert_threshold_(alert_threshold), refresh_every_(refresh_every),
      channels_(channels) {
  if (!fetcher_) throw ConfigError("FallbackLoader needs a fetcher");
  if (refresh_every_ < 1 || channels_ < 1) throw ConfigError("refresh_every and channels must be >= 1");
}

LoadResult FallbackLoader::load(const MetaRow& row, Crop crop) {
  ++batch_total_;
  std::optional<Image> fetched;
  try {
    fetched = fetcher_(row);
  } catch (const std::exception&) {
    fetched.reset();
  }
  if (fetched && !fetched->pixels.empty()) {
    Image img = fit_to_crop(*fetched, crop);
    if (successes_[crop]++ % refresh_every_ == 0) placeholders_[crop] = img;
    return {std::move(img), true};
  }
  ++batch_failed_;
  auto it = placeholders_.find(crop);
  if (it == placeholders_.end()) {
    Image gray{crop.w, crop.h, channels_, std::vector<float>(static_cast<std::size_t>(crop.w * crop.h * channels_), 0.5f)};
    it = placeholders_.emplace(crop, std::move(gray)).first;
  }
  return {it->second, false};
}

double FallbackLoader::end_batch(std::int64_t step) {
  const double frac = batch_total_ ? static_cast<double>(batch_failed_) / static_cast<double>(batch_total_) : 0.0;
  metrics_.emplace_back(step, frac);
  if (frac > alert_threshold_) {
    alerts_.push_back({step, frac});
    std::cerr << "alert: placeholder fraction " << frac << " at step " << step << " exceeds " << alert_threshold_
              << '\n';
  }
  batch_total_ = batch_failed_ = 0;
  return frac;
}

void FallbackLoader::write_metrics_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write metrics " + path.string());
  os << "step,placeholder_fraction\n";
  os.precision(17);
  for (const auto& [step, frac] : metrics_) os << step << ',' << frac << '\n';
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::string magic;
  std::int64_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw FormatError(path.string() + " is not an 8-bit P5 PGM");
  is.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h));
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError(path.string() + " is truncated");
  Image img{w, h, 1, std::vector<float>(raw.begin(), raw.end())};
  return img;
}

}  // namespace nimg
