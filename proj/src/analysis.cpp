#include "nimg/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "nimg/errors.hpp"

namespace nimg {

namespace {

bool selected(std::span<const int> set, int v) { return set.empty() || std::find(set.begin(), set.end(), v) != set.end(); }

void check_record(const RouteRecord& r) {
  if (r.seq != r.grid_h * r.grid_w) throw ShapeError("route record grid does not cover its sequence");
  if (static_cast<std::int64_t>(r.top_indices.size()) != r.experts * r.capacity ||
      static_cast<std::int64_t>(r.logits.size()) != r.seq * r.experts)
    throw ShapeError("route record arrays do not match (S, E, capacity)");
}

void check_grid(const Map2D& m, const RouteRecord& r) {
  if (m.h != r.grid_h || m.w != r.grid_w) throw ShapeError("route records disagree on the token grid");
}

std::int64_t dominant(const RouteRecord& r, std::int64_t s) {
  const auto row = r.logits.begin() + s * r.experts;
  return std::max_element(row, row + r.experts) - row;  // first maximum
}

}  // namespace

Map2D allocation_counts(std::span<const RouteRecord> records, std::span<const int> layers, std::span<const int> steps) {
  Map2D m;
  bool any = false;
  for (const auto& r : records) {
    if (!selected(layers, r.layer) || !selected(steps, r.step)) continue;
    check_record(r);
    if (!any) m = Map2D{r.grid_h, r.grid_w, std::vector<double>(static_cast<std::size_t>(r.seq), 0.0)};
    check_grid(m, r);
    any = true;
    for (auto idx : r.top_indices) {
      if (idx < 0 || idx >= r.seq) throw IndexError("route record selects token " + std::to_string(idx));
      m.v[static_cast<std::size_t>(idx)] += 1.0;
    }
  }
  if (!any) throw EmptySelection("no routing records match the requested layers and steps");
  return m;
}

Map2D allocation_map(std::span<const RouteRecord> records, std::span<const int> layers, std::span<const int> steps) {
  Map2D m = allocation_counts(records, layers, steps);
  const double mx = *std::max_element(m.v.begin(), m.v.end());
  if (mx > 0)
    for (auto& x : m.v) x /= mx;
  return m;
}

Map2D diversity_map(std::span<const RouteRecord> records, int layer) {
  std::vector<std::set<std::int64_t>> seen;
  Map2D m;
  for (const auto& r : records) {
    if (r.layer != layer) continue;
    check_record(r);
    if (seen.empty()) {
      m = Map2D{r.grid_h, r.grid_w, {}};
      seen.resize(static_cast<std::size_t>(r.seq));
    }
    check_grid(m, r);
    for (std::int64_t s = 0; s < r.seq; ++s) seen[static_cast<std::size_t>(s)].insert(dominant(r, s));
  }
  if (seen.empty()) throw EmptySelection("no routing records at layer " + std::to_string(layer));
  for (const auto& s : seen) m.v.push_back(static_cast<double>(s.size()));
  return m;
}

std::vector<int> timestep_slice_steps(int T, int n) {
  if (T < 1 || n < 1) throw ConfigError("timestep slices need T >= 1 and n >= 1");
  if (T == 50 && n == 10) return {0, 5, 11, 17, 22, 27, 33, 38, 44, 49};
  if (n == 1) return {0};
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (T - 1) / (n - 1))));
  return out;
}

std::vector<Map2D> timestep_slices(std::span<const RouteRecord> records, int layer, int n_slices) {
  std::set<int> steps;
  for (const auto& r : records)
    if (r.layer == layer) steps.insert(r.step);
  if (steps.empty()) throw EmptySelection("no routing records at layer " + std::to_string(layer));
  const int T = *steps.rbegin() + 1;
  std::vector<Map2D> out;
  const int layers[] = {layer};
  for (int step : timestep_slice_steps(T, n_slices)) {
    if (!steps.contains(step)) throw MissingRecord(step);
    const int one[] = {step};
    out.push_back(allocation_map(records, layers, one));
  }
  return out;
}

Map2D upsample_bilinear(const Map2D& map, std::int64_t H, std::int64_t W) {
  if (map.h < 1 || map.w < 1 || H < 1 || W < 1) throw ShapeError("upsample_bilinear needs non-empty sizes");
  Map2D out{H, W, std::vector<double>(static_cast<std::size_t>(H * W))};
  const auto coord = [](std::int64_t i, std::int64_t in, std::int64_t outn, std::int64_t& i0, std::int64_t& i1,
                        double& f) {
    double x = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    x = std::max(x, 0.0);
    i0 = std::min(static_cast<std::int64_t>(x), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    f = x - static_cast<double>(i0);
  };
  for (std::int64_t r = 0; r < H; ++r) {
    std::int64_t y0, y1;
    double fy;
    coord(r, map.h, H, y0, y1, fy);
    for (std::int64_t c = 0; c < W; ++c) {
      std::int64_t x0, x1;
      double fx;
      coord(c, map.w, W, x0, x1, fx);
      const double top = map.at(y0, x0) + fx * (map.at(y0, x1) - map.at(y0, x0));
      const double bot = map.at(y1, x0) + fx * (map.at(y1, x1) - map.at(y1, x0));
      out.v[static_cast<std::size_t>(r * W + c)] = top + fy * (bot - top);
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Map2D& map, double lo, double hi) {
  if (!(hi > lo)) throw ConfigError("write_pgm needs hi > lo");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "P5\n" << map.w << ' ' << map.h << "\n255\n";
  std::vector<unsigned char> px(map.v.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double u = std::clamp((map.v[i] - lo) / (hi - lo), 0.0, 1.0);
    px[i] = static_cast<unsigned char>(std::lround(255.0 * u));
  }
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw FormatError("failed writing " + path.string());
}

void write_map_csv(const std::filesystem::path& path, const Map2D& map) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  char buf[32];
  for (std::int64_t r = 0; r < map.h; ++r) {
    for (std::int64_t c = 0; c < map.w; ++c) {
      const auto res = std::to_chars(buf, buf + sizeof buf, map.at(r, c));
      if (c) os << ',';
      os.write(buf, res.ptr - buf);
    }
    os << '\n';
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

Map2D read_map_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  Map2D m;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::int64_t cols = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p <= end) {
      double x;
      const auto res = std::from_chars(p, end, x);
      if (res.ec != std::errc()) throw FormatError(path.string() + ": bad number on row " + std::to_string(m.h));
      m.v.push_back(x);
      ++cols;
      p = res.ptr + 1;
      if (res.ptr == end) break;
    }
    if (m.h == 0) m.w = cols;
    if (cols != m.w) throw FormatError(path.string() + ": ragged rows");
    ++m.h;
  }
  return m;
}

void save_route_records(const std::filesystem::path& path, std::span<const RouteRecord> records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  for (const auto& r : records) {
    const nlohmann::json j = {{"layer", r.layer},       {"step", r.step},         {"seq", r.seq},
                              {"experts", r.experts},   {"capacity", r.capacity}, {"grid_h", r.grid_h},
                              {"grid_w", r.grid_w},     {"logits", r.logits},     {"top_indices", r.top_indices}};
    os << j.dump() << '\n';
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

std::vector<RouteRecord> load_route_records(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<RouteRecord> out;
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RouteRecord r;
      j.at("layer").get_to(r.layer);
      j.at("step").get_to(r.step);
      j.at("seq").get_to(r.seq);
      j.at("experts").get_to(r.experts);
      j.at("capacity").get_to(r.capacity);
      j.at("grid_h").get_to(r.grid_h);
      j.at("grid_w").get_to(r.grid_w);
      j.at("logits").get_to(r.logits);
      j.at("top_indices").get_to(r.top_indices);
      check_record(r);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace nimg
