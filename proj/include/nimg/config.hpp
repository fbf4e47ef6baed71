#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nimg/backbone.hpp"
#include "nimg/objective.hpp"
#include "nimg/optim.hpp"

namespace nimg {

struct StageSwitch {
  std::int64_t step = 0;
  StageId stage = StageId::S256;
};

struct TrainConfig {
  std::int64_t steps = 200;
  std::uint64_t seed = 0;
  std::int64_t warmup = 10;
  std::int64_t checkpoint_every = 50;  // 0 disables checkpoints
  // "step:stage" pairs, e.g. "0:s256,100:s512"; the first must start at step 0.
  std::string stage_schedule = "0:s256";
  // Toy analogs of the 4096 / 1024 / 256 stage batches, scaled by 1/256.
  std::int64_t batch_s256 = 16;
  std::int64_t batch_s512 = 4;
  std::int64_t batch_s1024 = 1;
  double cfg_dropout = 0.1;
  std::int64_t eval_every = 25;
  std::int64_t eval_size = 16;
  bool f64_checkpoints = false;

  std::vector<StageSwitch> schedule() const;
  std::int64_t batch_for(StageId stage) const;
};

struct SampleConfig {
  std::int64_t steps = 50;
  double cfg_scale = 8.0;
  std::string prompt = "bright-left stripes-horizontal";
};

struct BucketConfig {
  double ar_max = 2.0;
  std::int64_t stride = 16;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  TrainConfig train;
  SampleConfig sample;
  BucketConfig bucket;

  // Toy-scale learning rate; OptimConfig keeps the full-scale 1e-4 default.
  RunConfig() { optim.lr = 3e-3; }
  void validate() const;
};

// INI file with [model], [loss], [optim], [train], [sample], [bucket]
// sections. Unknown sections or keys and unparsable values raise ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& text);
// Every key with its resolved value, in the same format.
std::string dump_run_config(const RunConfig& cfg);
void write_run_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace nimg
