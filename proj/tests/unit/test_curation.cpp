#include <gtest/gtest.h>

#include <bit>
#include <filesystem>
#include <fstream>

#include "nimg/curation.hpp"
#include "nimg/errors.hpp"
#include "nimg/rng.hpp"

using namespace nimg;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("nimg_" + name + "_" + std::to_string(::getpid()));
}

MetaRow sample_row(const std::string& id, char hash_digit = 'a') {
  MetaRow r;
  r.id = id;
  r.media_path = "img/" + id + ".pgm";
  r.width = 640;
  r.height = 480;
  r.captions = {"a red, \"quoted\" cube", "short"};
  r.caption_sources = {"human", "model"};
  r.caption_lengths = {5, 1};
  r.media_source = "real";
  r.aesthetic_score = 6.25;
  r.quality_tier = 5;
  r.episodic_bucket = 3;
  r.sha256 = std::string(64, hash_digit);
  return r;
}

std::vector<double> random_image(std::int64_t h, std::int64_t w, Rng& rng) {
  std::vector<double> px(static_cast<std::size_t>(h * w));
  for (auto& v : px) v = std::floor(rng.uniform() * 256.0);
  return px;
}

}  // namespace

TEST(Metadata, CsvRoundTrip) {
  std::vector<MetaRow> rows = {sample_row("a"), sample_row("b", 'b')};
  rows[1].aesthetic_score.reset();
  rows[1].captions = {};
  rows[1].caption_sources = {};
  rows[1].caption_lengths = {};
  const auto path = temp_file("meta.csv");
  write_metadata_csv(path, rows);
  const auto back = read_metadata_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].captions, rows[0].captions);
  EXPECT_EQ(back[0].caption_lengths, rows[0].caption_lengths);
  EXPECT_EQ(back[0].aesthetic_score, rows[0].aesthetic_score);
  EXPECT_FALSE(back[1].aesthetic_score.has_value());
  EXPECT_EQ(back[1].sha256, rows[1].sha256);
  std::filesystem::remove(path);
}

TEST(Metadata, MisalignedCaptionsNameTheRow) {
  auto row = sample_row("bad-7");
  row.caption_lengths = {5};
  const auto path = temp_file("meta_bad.csv");
  write_metadata_csv(path, std::vector<MetaRow>{sample_row("ok"), row});
  try {
    read_metadata_csv(path);
    FAIL() << "expected RowError";
  } catch (const RowError& e) {
    EXPECT_EQ(e.row_id(), "bad-7");
  }
  std::filesystem::remove(path);
}

TEST(Metadata, RangeChecks) {
  auto row = sample_row("t");
  row.quality_tier = 6;
  EXPECT_THROW(validate_row(row), RowError);
  row = sample_row("t");
  row.episodic_bucket = 0;
  EXPECT_THROW(validate_row(row), RowError);
  row = sample_row("t");
  row.sha256 = "xyz";
  EXPECT_THROW(validate_row(row), RowError);
}

TEST(Dedup, ExactKeepsFirstAndIsIdempotent) {
  const std::vector<MetaRow> rows = {sample_row("1", 'a'), sample_row("2", 'b'), sample_row("3", 'a')};
  const auto once = exact_dedup(rows);
  ASSERT_EQ(once.size(), 2u);
  EXPECT_EQ(once[0].id, "1");
  EXPECT_EQ(once[1].id, "2");
  EXPECT_EQ(exact_dedup(once).size(), once.size());
}

TEST(Dedup, NearKeepsHigherResolution) {
  const std::vector<PhashRow> rows = {{"lo", "00000000000000f0", 100, 100, 0.9},
                                      {"hi", "00000000000000f1", 200, 200, 0.1},
                                      {"far", "ffffffffffffff00", 50, 50, 0.5}};
  const auto kept = near_dedup(rows, 4);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].id, "hi");
  EXPECT_EQ(kept[1].id, "far");
  EXPECT_EQ(near_dedup(kept, 4).size(), 2u);
}

TEST(Dedup, RadiusZeroIsExactMatch) {
  const std::vector<PhashRow> rows = {{"a", "0000000000000001", 10, 10, 0},
                                      {"b", "0000000000000001", 10, 10, 1},
                                      {"c", "0000000000000003", 10, 10, 2}};
  const auto kept = near_dedup(rows, 0);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].id, "b");
}

TEST(Dedup, SingleLinkageChains) {
  // a-b and b-c are within 1 bit; a-c are 2 apart yet share a cluster.
  const std::vector<PhashRow> rows = {{"a", "0000000000000000", 10, 10, 0},
                                      {"b", "0000000000000001", 10, 10, 0},
                                      {"c", "0000000000000003", 10, 10, 0}};
  const auto kept = near_dedup(rows, 1);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].id, "c");
}

TEST(Dedup, MalformedHashNamesRow) {
  const std::vector<PhashRow> rows = {{"ok", "0000000000000000", 1, 1, 0}, {"broken", "zz", 1, 1, 0}};
  try {
    near_dedup(rows, 2);
    FAIL() << "expected RowError";
  } catch (const RowError& e) {
    EXPECT_EQ(e.row_id(), "broken");
  }
  auto row = sample_row("s");
  row.sha256 = "nothex";
  EXPECT_THROW(exact_dedup(std::vector<MetaRow>{row}), RowError);
}

TEST(Phash, ConstantImageIsZero) {
  const std::vector<double> flat(64 * 48, 137.0);
  EXPECT_EQ(phash(flat, 64, 48), 0u);
}

TEST(Phash, BrightnessShiftAndDeterminism) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto px = random_image(40 + trial, 64, rng);
    const auto h = phash(px, 40 + trial, 64);
    EXPECT_EQ(h, phash(px, 40 + trial, 64));
    for (auto& v : px) v += 1.0;
    EXPECT_EQ(h, phash(px, 40 + trial, 64));
  }
}

TEST(Phash, IndependentImagesNearHalfBits) {
  Rng rng(11);
  double total = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_image(32, 32, rng), b = random_image(32, 32, rng);
    total += std::popcount(phash(a, 32, 32) ^ phash(b, 32, 32));
  }
  const double mean = total / 1000;
  EXPECT_GE(mean, 24.0);
  EXPECT_LE(mean, 40.0);
}

TEST(Phash, TooSmallRejected) {
  const std::vector<double> px(7 * 20, 0.0);
  EXPECT_THROW(phash(px, 7, 20), ShapeError);
}

TEST(Phash, HexRoundTrip) {
  EXPECT_EQ(parse_phash("x", format_phash(0x0123456789abcdefULL)), 0x0123456789abcdefULL);
  EXPECT_EQ(format_phash(1), "0000000000000001");
}

TEST(Captions, Thresholds) {
  EXPECT_EQ(caption_route(0.70), CaptionAction::Preserve);
  EXPECT_EQ(caption_route(0.65), CaptionAction::Refine);
  EXPECT_EQ(caption_route(0.30), CaptionAction::Refine);
  EXPECT_EQ(caption_route(0.2999), CaptionAction::Synthesize);
  EXPECT_EQ(caption_route(0.10), CaptionAction::Synthesize);
  bool clamped = false;
  EXPECT_EQ(caption_route(1.7, &clamped), CaptionAction::Preserve);
  EXPECT_TRUE(clamped);
  EXPECT_EQ(caption_route(-0.2, &clamped), CaptionAction::Synthesize);
  EXPECT_TRUE(clamped);
}

TEST(SystemPrompt, SourceAndQualityBands) {
  auto row = sample_row("p");
  const auto high = derive_system_prompt(row);
  EXPECT_NE(high.find("photorealistic, ultra-high-quality"), std::string::npos);
  EXPECT_EQ(high, derive_system_prompt(row));
  row.quality_tier = 2;
  const auto general = derive_system_prompt(row);
  EXPECT_EQ(general.find("ultra-high-quality"), std::string::npos);
  EXPECT_NE(general.find("realistic"), std::string::npos);
  row.media_source = "telescope";
  bool fallback = false;
  derive_system_prompt(row, &fallback);
  EXPECT_TRUE(fallback);
  std::set<std::string> distinct;
  for (const char* src : {"real", "diffusion-synthetic", "illustration", "text-render"})
    for (int tier : {2, 5}) {
      row.media_source = src;
      row.quality_tier = tier;
      distinct.insert(derive_system_prompt(row));
    }
  EXPECT_EQ(distinct.size(), 8u);
}

TEST(Fallback, AlwaysFailingUsesPlaceholders) {
  FallbackLoader loader([](const MetaRow&) { return std::optional<Image>{}; }, 0.05);
  const Crop crop{32, 16};
  for (int i = 0; i < 10; ++i) {
    const auto res = loader.load(sample_row(std::to_string(i)), crop);
    EXPECT_FALSE(res.success);
    EXPECT_EQ(res.image.w, 32);
    EXPECT_EQ(res.image.h, 16);
    EXPECT_EQ(res.image.pixels.size(), 32u * 16u * 3u);
  }
  EXPECT_DOUBLE_EQ(loader.end_batch(1), 1.0);
  ASSERT_EQ(loader.alerts().size(), 1u);
  EXPECT_EQ(loader.alerts()[0].step, 1);
}

TEST(Fallback, NoFailuresNoAlert) {
  FallbackLoader loader([](const MetaRow& r) {
    return std::optional<Image>{Image{r.width / 10, r.height / 10, 3, std::vector<float>(64 * 48 * 3, 0.25f)}};
  });
  for (int i = 0; i < 20; ++i) EXPECT_TRUE(loader.load(sample_row("r"), {16, 16}).success);
  EXPECT_DOUBLE_EQ(loader.end_batch(0), 0.0);
  EXPECT_TRUE(loader.alerts().empty());
}

TEST(Fallback, MeasuredFailureRateAndRefresh) {
  Rng rng(12);
  FallbackLoader loader(
      [&](const MetaRow&) -> std::optional<Image> {
        if (rng.uniform() < 0.1) return std::nullopt;
        return Image{8, 8, 1, std::vector<float>(64, 0.9f)};
      },
      0.5, 1, 1);
  std::int64_t failed = 0;
  bool refreshed_placeholder = false;
  for (int i = 0; i < 10000; ++i) {
    const auto res = loader.load(sample_row("m"), {8, 8});
    if (!res.success) {
      ++failed;
      refreshed_placeholder |= res.image.pixels[0] == 0.9f;
    }
    if (i % 100 == 99) loader.end_batch(i / 100);
  }
  const double frac = static_cast<double>(failed) / 10000;
  EXPECT_GE(frac, 0.08);
  EXPECT_LE(frac, 0.12);
  EXPECT_TRUE(refreshed_placeholder);
  EXPECT_EQ(loader.metrics().size(), 100u);
  const auto path = temp_file("metrics.csv");
  loader.write_metrics_csv(path);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "step,placeholder_fraction");
  std::filesystem::remove(path);
}

TEST(Fallback, FitToCropCoversAndCenters) {
  Image img{4, 2, 1, {0, 1, 2, 3, 0, 1, 2, 3}};
  const auto out = fit_to_crop(img, {2, 2});
  ASSERT_EQ(out.pixels.size(), 4u);
  EXPECT_FLOAT_EQ(out.pixels[0], 1.0f);
  EXPECT_FLOAT_EQ(out.pixels[1], 2.0f);
}

TEST(Pgm, ReadsP5) {
  const auto path = temp_file("img.pgm");
  {
    std::ofstream os(path, std::ios::binary);
    os << "P5\n3 2\n255\n";
    const unsigned char px[6] = {0, 10, 20, 30, 40, 255};
    os.write(reinterpret_cast<const char*>(px), 6);
  }
  const auto img = read_pgm(path);
  EXPECT_EQ(img.w, 3);
  EXPECT_EQ(img.h, 2);
  EXPECT_FLOAT_EQ(img.pixels[5], 255.0f);
  std::filesystem::remove(path);
}
