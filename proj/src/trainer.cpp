#include "nimg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "nimg/errors.hpp"

namespace nimg {

namespace {

constexpr std::size_t kCaptionTokens = 2;
constexpr double kLatentNoise = 0.05;

double brightness_value(std::size_t kind, double y, double x) {
  switch (kind) {
    case 0: return 1.0 - 2.0 * x;  // bright-left
    case 1: return 2.0 * x - 1.0;  // bright-right
    case 2: return 1.0 - 2.0 * y;  // bright-top
    default: return 2.0 * y - 1.0;  // bright-bottom
  }
}

double pattern_value(std::size_t kind, std::int64_t i, std::int64_t j, std::int64_t side) {
  const std::int64_t period = std::max<std::int64_t>(side / 4, 1);
  switch (kind) {
    case 0: return (i / period) % 2 ? 1.0 : -1.0;                   // stripes-horizontal
    case 1: return (j / period) % 2 ? 1.0 : -1.0;                   // stripes-vertical
    case 2: return ((i / period) + (j / period)) % 2 ? 1.0 : -1.0;  // checker
    default: {                                                       // rings
      const double c = 0.5 * static_cast<double>(side - 1);
      const double r = std::hypot(static_cast<double>(i) - c, static_cast<double>(j) - c);
      return static_cast<std::int64_t>(r / static_cast<double>(period)) % 2 ? 1.0 : -1.0;
    }
  }
}

// Per-channel mixing weights of the ramp and the pattern.
double ramp_weight(std::int64_t c) { return c % 2 ? -0.5 : 1.0; }
double pattern_weight(std::int64_t c) { return c % 3 == 2 ? -0.75 : 0.5 + 0.25 * static_cast<double>(c % 2); }

std::vector<double> render(std::size_t b, std::size_t p, std::int64_t channels, std::int64_t side) {
  std::vector<double> out(static_cast<std::size_t>(channels * side * side));
  const double denom = static_cast<double>(std::max<std::int64_t>(side - 1, 1));
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < side; ++i)
      for (std::int64_t j = 0; j < side; ++j)
        out[static_cast<std::size_t>((c * side + i) * side + j)] =
            ramp_weight(c) * brightness_value(b, static_cast<double>(i) / denom, static_cast<double>(j) / denom) +
            pattern_weight(c) * pattern_value(p, i, j, side);
  return out;
}

std::size_t attribute_index(const std::vector<std::string>& list, const std::string& word) {
  for (std::size_t i = 0; i < list.size(); ++i)
    if (list[i] == word) return i;
  throw ConfigError("unknown caption attribute '" + word + "'");
}

StageId stage_at(const std::vector<StageSwitch>& schedule, std::int64_t step) {
  StageId s = schedule.front().stage;
  for (const auto& sw : schedule)
    if (sw.step <= step) s = sw.stage;
  return s;
}


}  // namespace

std::int64_t latent_side(StageId stage) {
  switch (stage) {
    case StageId::S256: return 8;
    case StageId::S512: return 16;
    case StageId::S1024: return 32;
  }
  return 8;
}

const std::vector<std::string>& brightness_attributes() {
  static const std::vector<std::string> v = {"bright-left", "bright-right", "bright-top", "bright-bottom"};
  return v;
}

const std::vector<std::string>& pattern_attributes() {
  static const std::vector<std::string> v = {"stripes-horizontal", "stripes-vertical", "checker", "rings"};
  return v;
}

SyntheticSample synthetic_sample(std::int64_t channels, std::int64_t side, Rng& rng) {
  const auto b = static_cast<std::size_t>(rng.index(brightness_attributes().size()));
  const auto p = static_cast<std::size_t>(rng.index(pattern_attributes().size()));
  SyntheticSample s{render(b, p, channels, side), brightness_attributes()[b] + " " + pattern_attributes()[p]};
  for (auto& v : s.latent) v += kLatentNoise * rng.normal();
  return s;
}

std::vector<double> render_caption(const std::string& caption, std::int64_t channels, std::int64_t side) {
  const auto tokens = tokenize(caption);
  if (tokens.size() != kCaptionTokens) throw ConfigError("caption '" + caption + "' needs a brightness and a pattern word");
  return render(attribute_index(brightness_attributes(), tokens[0]), attribute_index(pattern_attributes(), tokens[1]),
                channels, side);
}

std::vector<std::string> null_tokens(std::size_t len) { return std::vector<std::string>(std::max<std::size_t>(len, 1), kNullToken); }

std::vector<std::string> prompt_tokens(const std::string& prompt) {
  auto tokens = tokenize(prompt);
  return tokens.empty() ? null_tokens(kCaptionTokens) : tokens;
}

double eval_rf_loss(const Model& model, StageId stage, std::int64_t n, std::uint64_t seed, const LossConfig& loss) {
  NoGradGuard no_grad;
  const auto& mc = model.config();
  const std::int64_t C = mc.latent_channels, side = latent_side(stage);
  Rng rng(seed);
  std::vector<double> x0, eps, t;
  std::vector<std::vector<std::string>> prompts;
  const auto tokens = (side / mc.patch) * (side / mc.patch);
  for (std::int64_t i = 0; i < n; ++i) {
    auto s = synthetic_sample(C, side, rng);
    x0.insert(x0.end(), s.latent.begin(), s.latent.end());
    prompts.push_back(tokenize(s.caption));
    for (std::int64_t k = 0; k < C * side * side; ++k) eps.push_back(rng.normal());
    t.push_back(draw_timestep(tokens, rng, loss).t);
  }
  const Tensor X0({n, C, side, side}, x0), EPS({n, C, side, side}, eps), T({n}, t);
  const TextContext ctx = precompute_text_kv(model, prompts);
  const auto fr = model_forward(model, interpolate(X0, EPS, T), T, ctx, {stage, 0, nullptr});
  return rf_loss(fr.velocity, X0, EPS).item();
}

std::string loss_csv_header() { return "step,stage,lr,rf_loss,z_loss,wavelet_loss,total_loss,eval_rf_loss"; }

std::string loss_csv_line(const LossRow& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << stage_name(r.stage) << ',' << r.lr << ',' << r.rf << ',' << r.z << ',' << r.wavelet << ','
     << r.total << ',';
  if (r.eval_rf) os << *r.eval_rf;
  return os.str();
}

std::string capacity_log_line(const Model& model, StageId stage, std::int64_t step) {
  std::ostringstream os;
  os << "step " << step << " stage " << stage_name(stage) << " capacity";
  for (int l = 0; l < model.config().n_layers; ++l) {
    if (!model.config().is_moe_layer(l)) continue;
    char buf[32];
    std::snprintf(buf, sizeof buf, " L%d=%.1f", l, model.router_config(l, stage).capacity_factor);
    os << buf;
  }
  return os.str();
}

TrainResult train(const RunConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const auto schedule = cfg.train.schedule();
  const auto seed = cfg.train.seed;
  TrainResult result{{}, 0.0, 0.0, {}, {}, Model(cfg.model, derive_seed(seed, 1))};
  Model& model = result.model;
  ParamStore& params = model.params();
  Optimizer opt(build_groups(params, cfg.optim), cfg.optim);
  Rng data_rng(derive_seed(seed, 2)), noise_rng(derive_seed(seed, 3)), time_rng(derive_seed(seed, 4)),
      drop_rng(derive_seed(seed, 5));
  const auto eval_seed = derive_seed(seed, 6);
  const StageId eval_stage = schedule.front().stage;
  const auto& mc = cfg.model;
  const std::int64_t C = mc.latent_channels;

  std::optional<std::ofstream> loss_csv;
  if (hooks.out_dir) {
    std::filesystem::create_directories(*hooks.out_dir);
    write_run_config(*hooks.out_dir / "config.ini", cfg);
    loss_csv.emplace(*hooks.out_dir / "loss.csv", std::ios::trunc);
    *loss_csv << loss_csv_header() << '\n';
  }
  const auto log = [&](const std::string& line) {
    result.stage_log.push_back(line);
    if (!hooks.quiet) std::cout << line << '\n';
  };

  result.initial_eval = eval_rf_loss(model, eval_stage, cfg.train.eval_size, eval_seed, cfg.loss);
  StageId stage = stage_at(schedule, 0);
  log(capacity_log_line(model, stage, 0));

  for (std::int64_t step = 0; step < cfg.train.steps; ++step) {
    const StageId now = stage_at(schedule, step);
    if (now != stage) {
      stage = now;
      log(capacity_log_line(model, stage, step));
    }
    const std::int64_t B = cfg.train.batch_for(stage), side = latent_side(stage);
    const std::int64_t tokens = (side / mc.patch) * (side / mc.patch);
    std::vector<double> x0, eps, t;
    std::vector<std::vector<std::string>> prompts;
    for (std::int64_t b = 0; b < B; ++b) {
      auto s = synthetic_sample(C, side, data_rng);
      x0.insert(x0.end(), s.latent.begin(), s.latent.end());
      prompts.push_back(drop_rng.uniform() < cfg.train.cfg_dropout ? null_tokens(kCaptionTokens) : tokenize(s.caption));
      for (std::int64_t k = 0; k < C * side * side; ++k) eps.push_back(noise_rng.normal());
      t.push_back(draw_timestep(tokens, time_rng, cfg.loss).t);
    }
    const Tensor X0({B, C, side, side}, x0), EPS({B, C, side, side}, eps), T({B}, t);

    LossRow row;
    row.step = step;
    row.stage = stage;
    {
      Tape::Scope tape;
      const TextContext ctx = precompute_text_kv(model, prompts);
      const auto fr = model_forward(model, interpolate(X0, EPS, T), T, ctx, {stage, static_cast<int>(step), nullptr});
      Tensor v = fr.velocity;
      if (!fr.router_logits.empty()) {
        Tensor zsum = z_loss(fr.router_logits.front());
        for (std::size_t l = 1; l < fr.router_logits.size(); ++l) zsum = ops::add(zsum, z_loss(fr.router_logits[l]));
        row.z = zsum.item();
        v = ops::add_aux_loss(v, zsum, cfg.loss.lambda_z);
      }
      const Tensor rf = rf_loss(v, X0, EPS);
      Tensor wav;
      if (cfg.loss.wavelet_weight(stage) > 0.0) {
        wav = wavelet_loss(ops::add(v, EPS), X0, cfg.loss.alpha_hf);
        row.wavelet = wav.item();
      }
      const Tensor total = total_loss(rf, wav, cfg.loss, stage);
      row.rf = rf.item();
      row.total = total.item();
      backward(total);
    }
    for (int l = 0; l < mc.n_layers; ++l)
      if (mc.is_moe_layer(l)) ortho_update(model.param(block_prefix(l) + "moe.router.gate"), cfg.loss.lambda_ortho);
    row.lr = wsm_lr(step, cfg.train.warmup, cfg.optim.lr);
    opt.step(params, row.lr);
    params.zero_grad();

    const bool last = step + 1 == cfg.train.steps;
    if (last || (cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0))
      row.eval_rf = eval_rf_loss(model, eval_stage, cfg.train.eval_size, eval_seed, cfg.loss);
    if (last) result.final_eval = *row.eval_rf;
    if (hooks.out_dir && cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0) {
      const auto path = *hooks.out_dir / ("ckpt_" + std::to_string(step + 1) + ".nimg");
      save_checkpoint(path, params, cfg.train.f64_checkpoints ? Dtype::F64 : Dtype::F32);
      result.checkpoints.push_back(path);
    }
    if (loss_csv) *loss_csv << loss_csv_line(row) << '\n';
    if (!hooks.quiet && (last || step % 10 == 0))
      std::cout << "step " << step << " rf " << row.rf << (row.eval_rf ? " eval " + std::to_string(*row.eval_rf) : "")
                << '\n';
    if (hooks.on_step) hooks.on_step(step + 1, params);
    result.rows.push_back(row);
  }
  if (cfg.train.steps == 0) result.final_eval = result.initial_eval;
  if (hooks.out_dir) {
    std::ofstream os(*hooks.out_dir / "stages.log", std::ios::trunc);
    for (const auto& line : result.stage_log) os << line << '\n';
  }
  return result;
}

void load_into(Model& model, const ParamStore& snapshot) {
  ParamStore& params = model.params();
  if (snapshot.size() != params.size())
    throw CorruptCheckpoint("checkpoint holds " + std::to_string(snapshot.size()) + " tensors, model has " +
                            std::to_string(params.size()));
  for (const auto& [name, t] : snapshot.items()) {
    if (!params.contains(name)) throw CorruptCheckpoint("checkpoint tensor '" + name + "' is not a model parameter");
    Tensor& p = params.at(name);
    if (p.shape() != t.shape())
      throw CorruptCheckpoint("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                              shape_str(p.shape()));
    std::copy(t.data().begin(), t.data().end(), p.data_mut().begin());
  }
}

SampleResult sample(const Model& model, const std::string& prompt, StageId stage, std::int64_t steps,
                    double cfg_scale, std::uint64_t seed, std::vector<RouteRecord>* capture) {
  if (steps < 1) throw ConfigError("sample needs at least one step");
  NoGradGuard no_grad;
  const auto& mc = model.config();
  const std::int64_t C = mc.latent_channels, side = latent_side(stage), n = C * side * side;
  const auto cond = prompt_tokens(prompt);
  const auto before = text_kv_compute_count();
  const TextContext ctx = precompute_text_kv(model, {cond, null_tokens(cond.size())});

  Rng rng(seed);
  std::vector<double> z(static_cast<std::size_t>(n));
  for (auto& v : z) v = rng.normal();
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::int64_t i = 0; i < steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    std::vector<double> pair(z);
    pair.insert(pair.end(), z.begin(), z.end());
    const auto fr = model_forward(model, Tensor({2, C, side, side}, pair), Tensor({2}, {t, t}), ctx,
                                  {stage, static_cast<int>(i), capture});
    const auto v = fr.velocity.data();
    for (std::int64_t k = 0; k < n; ++k) {
      const double vc = v[static_cast<std::size_t>(k)], vu = v[static_cast<std::size_t>(n + k)];
      z[static_cast<std::size_t>(k)] = store(z[static_cast<std::size_t>(k)] + dt * (vu + cfg_scale * (vc - vu)));
    }
  }
  return {Tensor({1, C, side, side}, z), text_kv_compute_count() - before};
}

}  // namespace nimg
