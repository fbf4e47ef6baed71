// nimg: command-line driver for the toy training, sampling, merging and
// analysis pipeline. Exit codes: 0 success, 1 validation, 2 runtime.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "nimg/analysis.hpp"
#include "nimg/config.hpp"
#include "nimg/databucket.hpp"
#include "nimg/epsim.hpp"
#include "nimg/errors.hpp"
#include "nimg/trainer.hpp"

namespace fs = std::filesystem;
using namespace nimg;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string stage;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (!c.stage.empty()) cfg.train.stage_schedule = "0:" + std::string(stage_name(parse_stage(c.stage)));
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c, const char* fallback) {
  const fs::path p = c.out.empty() ? fs::path(fallback) : fs::path(c.out);
  fs::create_directories(p);
  return p;
}

void add_common(CLI::App* sub, Common& c, bool with_stage) {
  sub->add_option("--config", c.config, "INI run config")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Seed override");
  sub->add_option("--out", c.out, "Output directory");
  if (with_stage)
    sub->add_option("--stage", c.stage, "Resolution stage")->check(CLI::IsMember({"s256", "s512", "s1024"}));
}

// ---- train ----

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve(c);
  TrainHooks hooks;
  hooks.out_dir = out_dir(c, "run");
  hooks.quiet = false;
  const auto r = train(cfg, hooks);
  std::cout << "initial eval rf " << r.initial_eval << " final eval rf " << r.final_eval << " ratio "
            << r.final_eval / r.initial_eval << '\n';
  save_checkpoint(*hooks.out_dir / "final.nimg", r.model.params(),
                  cfg.train.f64_checkpoints ? Dtype::F64 : Dtype::F32);
  return kOk;
}

// ---- sample ----

struct SampleArgs {
  std::string checkpoint;
  std::optional<std::string> prompt;
  std::optional<std::int64_t> steps;
  std::optional<double> cfg_scale;
  bool capture = false;
};

Map2D channel_mean(const Tensor& latent) {
  const auto C = latent.dim(1), H = latent.dim(2), W = latent.dim(3);
  Map2D m{H, W, std::vector<double>(static_cast<std::size_t>(H * W), 0.0)};
  for (std::int64_t ch = 0; ch < C; ++ch)
    for (std::int64_t i = 0; i < H * W; ++i) m.v[static_cast<std::size_t>(i)] += latent.at(ch * H * W + i) / C;
  return m;
}

int cmd_sample(const Common& c, const SampleArgs& a) {
  RunConfig cfg = resolve(c);
  if (a.prompt) cfg.sample.prompt = *a.prompt;
  if (a.steps) cfg.sample.steps = *a.steps;
  if (a.cfg_scale) cfg.sample.cfg_scale = *a.cfg_scale;
  cfg.validate();
  const StageId stage = c.stage.empty() ? StageId::S256 : parse_stage(c.stage);
  const fs::path dir = out_dir(c, "sample");

  Model model(cfg.model, derive_seed(cfg.train.seed, 1));
  if (!a.checkpoint.empty()) load_into(model, load_checkpoint(a.checkpoint));
  else std::cerr << "warning: no --checkpoint given, sampling from an untrained model\n";

  std::vector<RouteRecord> records;
  const auto res = sample(model, cfg.sample.prompt, stage, cfg.sample.steps, cfg.sample.cfg_scale,
                          cfg.train.seed, a.capture ? &records : nullptr);
  write_run_config(dir / "config.ini", cfg);

  const Map2D img = channel_mean(res.latent);
  const auto [lo, hi] = std::minmax_element(img.v.begin(), img.v.end());
  write_pgm(dir / "sample.pgm", upsample_bilinear(img, img.h * 8, img.w * 8), *lo, *hi > *lo ? *hi : *lo + 1.0);
  {
    std::ofstream os(dir / "latent.csv");
    os << "index,value\n";
    for (std::int64_t i = 0; i < res.latent.numel(); ++i) os << i << ',' << res.latent.at(i) << '\n';
  }
  if (a.capture) save_route_records(dir / "routing.jsonl", records);
  std::cout << "prompt \"" << cfg.sample.prompt << "\" stage " << stage_name(stage) << " steps " << cfg.sample.steps
            << " cfg " << cfg.sample.cfg_scale << " text_kv_computes " << res.text_kv_computes << '\n';
  if (a.capture) std::cout << records.size() << " routing records -> " << (dir / "routing.jsonl").string() << '\n';
  return kOk;
}

// ---- merge ----

struct MergeArgs {
  std::string checkpoint_dir;
  std::string profile = "invsqrt";
  std::int64_t window = 16;
  double beta = 0.9;
};

int cmd_merge(const Common& c, const MergeArgs& a) {
  MergeSpec spec{parse_merge_profile(a.profile), a.window, a.beta};
  if (spec.window < 1) throw ConfigError("--window must be positive");
  if (!(spec.beta > 0.0 && spec.beta < 1.0)) throw ConfigError("--beta must lie in (0, 1)");

  const std::regex pat(R"(ckpt_(\d+)\.nimg)");
  std::vector<std::pair<std::int64_t, fs::path>> found;
  for (const auto& e : fs::directory_iterator(a.checkpoint_dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pat)) found.emplace_back(std::stoll(m[1].str()), e.path());
  }
  std::sort(found.begin(), found.end());
  if (found.empty()) throw ConfigError("no ckpt_<step>.nimg files in " + a.checkpoint_dir);

  CheckpointSet set;
  for (const auto& [step, path] : found) {
    set.steps.push_back(step);
    set.snapshots.push_back(load_checkpoint(path));
  }
  const ParamStore merged = merge_checkpoints(set, spec);
  const fs::path dir = out_dir(c, "merge");
  save_checkpoint(dir / "merged.nimg", merged, Dtype::F64);

  const auto cw = merge_weights(spec);
  const auto w = effective_lr_profile(cw);
  const std::size_t first = set.steps.size() - cw.size();
  std::ofstream os(dir / "merge_report.csv");
  os << "index,step,c_j,w_j\n";
  char buf[128];
  double sum = 0.0;
  for (std::size_t j = 0; j < cw.size(); ++j) {
    std::snprintf(buf, sizeof buf, "%zu,%lld,%.17g,%.17g\n", j, static_cast<long long>(set.steps[first + j]), cw[j],
                  w[j]);
    os << buf;
    sum += cw[j];
  }
  std::cout << "merged " << cw.size() << " of " << set.steps.size() << " checkpoints with "
            << merge_profile_name(spec.profile) << " weights (sum c_j = " << sum << ") -> "
            << (dir / "merged.nimg").string() << '\n';
  return kOk;
}

// ---- bucket-plan ----

std::int64_t base_res(StageId s) {
  switch (s) {
    case StageId::S256: return 256;
    case StageId::S512: return 512;
    case StageId::S1024: return 1024;
  }
  return 256;
}

int cmd_bucket_plan(const Common& c, const std::vector<std::string>& images) {
  const RunConfig cfg = resolve(c);
  const StageId stage = c.stage.empty() ? StageId::S256 : parse_stage(c.stage);
  const auto plan = enumerate_crops(base_res(stage), stage_tokens(stage), cfg.bucket.ar_max, cfg.bucket.stride);

  std::ostringstream table;
  table << "width,height,tokens,aspect\n";
  for (const auto& cr : plan.crops)
    table << cr.w << ',' << cr.h << ',' << (cr.w / plan.stride) * (cr.h / plan.stride) << ','
          << static_cast<double>(cr.w) / static_cast<double>(cr.h) << '\n';
  std::cout << table.str();
  if (!c.out.empty()) {
    const fs::path dir = out_dir(c, ".");
    std::ofstream(dir / "bucket_plan.csv") << table.str();
    write_run_config(dir / "config.ini", cfg);
  }

  const std::regex wh(R"((\d+)x(\d+))");
  for (const auto& s : images) {
    std::smatch m;
    if (!std::regex_match(s, m, wh)) throw ConfigError("--assign expects WxH, got '" + s + "'");
    const auto w = std::stoll(m[1].str()), h = std::stoll(m[2].str());
    const Crop cr = assign_bucket(w, h, plan);
    std::cout << "assign " << w << 'x' << h << " -> " << cr.w << 'x' << cr.h << " retained "
              << retained_fraction(w, h, cr) << '\n';
  }
  return kOk;
}

// ---- epsim-check ----

struct EpArgs {
  std::vector<std::int64_t> devices;
  std::vector<std::int64_t> experts;
  bool threaded = false;
  double tol = 1e-6;
};

int cmd_epsim_check(const Common& c, const EpArgs& a) {
  std::vector<std::pair<std::int64_t, std::int64_t>> meshes;
  if (a.devices.empty() && a.experts.empty()) {
    meshes = {{1, 4}, {2, 4}, {4, 4}, {4, 8}};
  } else {
    if (a.devices.size() != a.experts.size()) throw ConfigError("--devices and --experts must pair up");
    for (std::size_t i = 0; i < a.devices.size(); ++i) meshes.emplace_back(a.devices[i], a.experts[i]);
  }
  const std::uint64_t seed = c.seed.value_or(0);
  Trace trace;
  bool ok = true;
  for (const auto& [R, E] : meshes) {
    const auto rep = ep_self_check(R, E, derive_seed(seed, static_cast<std::uint64_t>(R * 1000 + E)), a.threaded,
                                   &trace);
    const bool pass = rep.passed(a.tol);
    ok &= pass;
    std::cout << (pass ? "PASS" : "FAIL") << " R=" << R << " E=" << E << " max_abs_diff=" << rep.max_abs_diff
              << " perm_round_trip=" << rep.perm_round_trip << " multiset=" << rep.multiset_conserved
              << " counts=" << rep.counts_conserved << '\n';
  }
  if (!c.out.empty()) write_trace_csv(out_dir(c, ".") / "trace.csv", trace);
  return ok ? kOk : kRuntime;
}

// ---- analyze ----

struct AnalyzeArgs {
  std::string routing;
  std::optional<int> layer;
  int slices = 10;
  int scale = 8;
};

int cmd_analyze(const Common& c, const AnalyzeArgs& a) {
  const auto records = load_route_records(a.routing);
  if (records.empty()) throw EmptySelection("no routing records in " + a.routing);
  const int layer = a.layer.value_or(records.front().layer);
  const fs::path dir = out_dir(c, "analysis");
  const int layers[] = {layer};

  const Map2D alloc = allocation_map(records, layers);
  write_pgm(dir / "allocation.pgm", upsample_bilinear(alloc, alloc.h * a.scale, alloc.w * a.scale));
  write_map_csv(dir / "allocation.csv", alloc);

  const Map2D div = diversity_map(records, layer);
  write_map_csv(dir / "diversity.csv", div);
  const double dmax = *std::max_element(div.v.begin(), div.v.end());
  write_pgm(dir / "diversity.pgm", upsample_bilinear(div, div.h * a.scale, div.w * a.scale), 0.0,
            std::max(dmax, 1.0));

  int steps = 0;
  for (const auto& r : records)
    if (r.layer == layer) steps = std::max(steps, r.step + 1);
  const auto slice_steps = timestep_slice_steps(steps, std::min(a.slices, steps));
  const auto maps = timestep_slices(records, layer, std::min(a.slices, steps));
  for (std::size_t i = 0; i < maps.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "slice_%02zu_step_%03d.pgm", i, slice_steps[i]);
    write_pgm(dir / name, upsample_bilinear(maps[i], maps[i].h * a.scale, maps[i].w * a.scale));
  }
  std::cout << "layer " << layer << ": " << steps << " steps, " << maps.size() << " slices -> " << dir.string()
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy MoE diffusion transformer: train, sample, merge and analyze"};
  app.require_subcommand(1);

  Common common;
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic latents");
  add_common(train_cmd, common, true);

  SampleArgs sargs;
  auto* sample_cmd = app.add_subcommand("sample", "Euler sampling with classifier-free guidance");
  add_common(sample_cmd, common, true);
  sample_cmd->add_option("--checkpoint", sargs.checkpoint, "Checkpoint to load")->check(CLI::ExistingFile);
  sample_cmd->add_option("--prompt", sargs.prompt, "Caption, e.g. \"bright-left checker\"");
  sample_cmd->add_option("--steps", sargs.steps, "Integration steps");
  sample_cmd->add_option("--cfg-scale", sargs.cfg_scale, "Guidance scale");
  sample_cmd->add_flag("--capture-routing", sargs.capture, "Write routing.jsonl for analyze");

  MergeArgs margs;
  auto* merge_cmd = app.add_subcommand("merge", "Merge the last checkpoints of a run");
  add_common(merge_cmd, common, false);
  merge_cmd->add_option("--checkpoints", margs.checkpoint_dir, "Directory of ckpt_<step>.nimg")
      ->required()
      ->check(CLI::ExistingDirectory);
  merge_cmd->add_option("--merge-profile", margs.profile, "Weight profile")
      ->check(CLI::IsMember({"geometric", "invsqrt", "mean"}));
  merge_cmd->add_option("--window", margs.window, "Number of checkpoints merged");
  merge_cmd->add_option("--beta", margs.beta, "EMA decay for the geometric profile");

  std::vector<std::string> assign;
  auto* bucket_cmd = app.add_subcommand("bucket-plan", "Print the crop buckets of a stage");
  add_common(bucket_cmd, common, true);
  bucket_cmd->add_option("--assign", assign, "Image sizes WxH to assign");

  EpArgs eargs;
  auto* ep_cmd = app.add_subcommand("epsim-check", "Expert-parallel equivalence check");
  add_common(ep_cmd, common, false);
  ep_cmd->add_option("--devices", eargs.devices, "Device counts R");
  ep_cmd->add_option("--experts", eargs.experts, "Expert counts E, one per R");
  ep_cmd->add_flag("--threaded", eargs.threaded, "One thread per device");
  ep_cmd->add_option("--tol", eargs.tol, "Absolute tolerance");

  AnalyzeArgs aargs;
  auto* an_cmd = app.add_subcommand("analyze", "Allocation and diversity maps from captured routing");
  add_common(an_cmd, common, false);
  an_cmd->add_option("--routing", aargs.routing, "routing.jsonl from sample --capture-routing")
      ->required()
      ->check(CLI::ExistingFile);
  an_cmd->add_option("--layer", aargs.layer, "MoE layer (default: first recorded)");
  an_cmd->add_option("--slices", aargs.slices, "Timestep slices");
  an_cmd->add_option("--scale", aargs.scale, "PGM upsampling factor")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*sample_cmd) return cmd_sample(common, sargs);
    if (*merge_cmd) return cmd_merge(common, margs);
    if (*bucket_cmd) return cmd_bucket_plan(common, assign);
    if (*ep_cmd) return cmd_epsim_check(common, eargs);
    if (*an_cmd) return cmd_analyze(common, aargs);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kRuntime;
}
