#include "nimg/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "nimg/errors.hpp"

namespace nimg {

namespace {

namespace pt = boost::property_tree;

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string to_text(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string to_text(std::int64_t v) { return std::to_string(v); }
std::string to_text(std::uint64_t v) { return std::to_string(v); }
std::string to_text(int v) { return std::to_string(v); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::string& v) { return v; }

template <typename T>
T parse_value(const std::string& s) {
  if constexpr (std::is_same_v<T, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("expected true or false, got '" + s + "'");
  } else {
    T v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("cannot parse '" + s + "'");
    return v;
  }
}

template <typename Owner, typename T>
Field field(std::string section, std::string key, Owner RunConfig::*owner, T Owner::*member) {
  return {std::move(section), std::move(key), [=](const RunConfig& c) { return to_text((c.*owner).*member); },
          [=](RunConfig& c, const std::string& s) { (c.*owner).*member = parse_value<T>(s); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using R = RunConfig;
    return std::vector<Field>{
        field("model", "n_layers", &R::model, &ModelConfig::n_layers),
        field("model", "d_model", &R::model, &ModelConfig::d_model),
        field("model", "n_q_heads", &R::model, &ModelConfig::n_q_heads),
        field("model", "n_kv_heads", &R::model, &ModelConfig::n_kv_heads),
        field("model", "head_dim", &R::model, &ModelConfig::head_dim),
        field("model", "n_experts", &R::model, &ModelConfig::n_experts),
        field("model", "expert_hidden", &R::model, &ModelConfig::expert_hidden),
        field("model", "shared_hidden", &R::model, &ModelConfig::shared_hidden),
        field("model", "dense_hidden", &R::model, &ModelConfig::dense_hidden),
        field("model", "dense_layers", &R::model, &ModelConfig::dense_layers),
        field("model", "allow_fewer_dense", &R::model, &ModelConfig::allow_fewer_dense),
        field("model", "latent_channels", &R::model, &ModelConfig::latent_channels),
        field("model", "patch", &R::model, &ModelConfig::patch),
        field("model", "gate_scale", &R::model, &ModelConfig::gate_scale),
        field("model", "gate_eps", &R::model, &ModelConfig::gate_eps),
        field("model", "init_std", &R::model, &ModelConfig::init_std),
        field("model", "router_init_std", &R::model, &ModelConfig::router_init_std),
        field("loss", "lambda_z", &R::loss, &LossConfig::lambda_z),
        field("loss", "lambda_ortho", &R::loss, &LossConfig::lambda_ortho),
        field("loss", "lambda_wavelet", &R::loss, &LossConfig::lambda_wavelet),
        field("loss", "alpha_hf", &R::loss, &LossConfig::alpha_hf),
        field("loss", "uniform_mix", &R::loss, &LossConfig::uniform_mix),
        field("loss", "sigma_shift", &R::loss, &LossConfig::sigma_shift),
        field("loss", "mu_lo", &R::loss, &LossConfig::mu_lo),
        field("loss", "mu_hi", &R::loss, &LossConfig::mu_hi),
        field("loss", "n_lo", &R::loss, &LossConfig::n_lo),
        field("loss", "n_hi", &R::loss, &LossConfig::n_hi),
        field("optim", "lr", &R::optim, &OptimConfig::lr),
        field("optim", "weight_decay", &R::optim, &OptimConfig::weight_decay),
        field("optim", "momentum", &R::optim, &OptimConfig::momentum),
        field("optim", "beta1", &R::optim, &OptimConfig::beta1),
        field("optim", "beta2", &R::optim, &OptimConfig::beta2),
        field("optim", "eps", &R::optim, &OptimConfig::eps),
        field("optim", "ns_steps", &R::optim, &OptimConfig::ns_steps),
        field("train", "steps", &R::train, &TrainConfig::steps),
        field("train", "seed", &R::train, &TrainConfig::seed),
        field("train", "warmup", &R::train, &TrainConfig::warmup),
        field("train", "checkpoint_every", &R::train, &TrainConfig::checkpoint_every),
        field("train", "stage_schedule", &R::train, &TrainConfig::stage_schedule),
        field("train", "batch_s256", &R::train, &TrainConfig::batch_s256),
        field("train", "batch_s512", &R::train, &TrainConfig::batch_s512),
        field("train", "batch_s1024", &R::train, &TrainConfig::batch_s1024),
        field("train", "cfg_dropout", &R::train, &TrainConfig::cfg_dropout),
        field("train", "eval_every", &R::train, &TrainConfig::eval_every),
        field("train", "eval_size", &R::train, &TrainConfig::eval_size),
        field("train", "f64_checkpoints", &R::train, &TrainConfig::f64_checkpoints),
        field("sample", "steps", &R::sample, &SampleConfig::steps),
        field("sample", "cfg_scale", &R::sample, &SampleConfig::cfg_scale),
        field("sample", "prompt", &R::sample, &SampleConfig::prompt),
        field("bucket", "ar_max", &R::bucket, &BucketConfig::ar_max),
        field("bucket", "stride", &R::bucket, &BucketConfig::stride),
    };
  }();
  return table;
}

}  // namespace

std::vector<StageSwitch> TrainConfig::schedule() const {
  std::vector<StageSwitch> out;
  std::stringstream ss(stage_schedule);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("stage_schedule entry '" + item + "' is not step:stage");
    StageSwitch sw;
    sw.step = parse_value<std::int64_t>(item.substr(0, colon));
    sw.stage = parse_stage(item.substr(colon + 1));
    if (!out.empty() && sw.step <= out.back().step) throw ConfigError("stage_schedule steps must increase");
    out.push_back(sw);
  }
  if (out.empty() || out.front().step != 0) throw ConfigError("stage_schedule must start at step 0");
  return out;
}

std::int64_t TrainConfig::batch_for(StageId stage) const {
  switch (stage) {
    case StageId::S256: return batch_s256;
    case StageId::S512: return batch_s512;
    case StageId::S1024: return batch_s1024;
  }
  return batch_s256;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  optim.validate();
  if (train.steps < 0 || train.warmup < 0 || train.checkpoint_every < 0 || train.eval_every < 0)
    throw ConfigError("train step counts must be >= 0");
  if (train.batch_s256 < 1 || train.batch_s512 < 1 || train.batch_s1024 < 1) throw ConfigError("stage batches must be >= 1");
  if (train.eval_size < 1) throw ConfigError("eval_size must be >= 1");
  if (!(train.cfg_dropout >= 0.0 && train.cfg_dropout <= 1.0)) throw ConfigError("cfg_dropout must be in [0, 1]");
  train.schedule();
  if (sample.steps < 1) throw ConfigError("sample steps must be >= 1");
  if (!(bucket.ar_max >= 1.0) || bucket.stride < 1) throw ConfigError("bucket ar_max must be >= 1 and stride >= 1");
}

RunConfig parse_run_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  std::set<std::string> sections;
  for (const auto& f : fields()) sections.insert(f.section);
  for (const auto& [section, body] : tree) {
    if (!sections.contains(section)) throw ConfigError("config: unknown section [" + section + "]");
    if (!body.data().empty() && body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const Field* match = nullptr;
      for (const auto& f : fields())
        if (f.section == section && f.key == key) match = &f;
      if (!match) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      try {
        match->set(cfg, value.data());
      } catch (const ConfigError& e) {
        throw ConfigError("config: " + section + "." + key + ": " + e.what());
      }
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

void write_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << dump_run_config(cfg);
}

}  // namespace nimg
