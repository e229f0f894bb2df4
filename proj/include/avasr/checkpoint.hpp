#pragma once

#include <string>
#include <vector>

#include "avasr/config.hpp"
#include "avasr/train.hpp"

namespace avasr {

// KV <-> config conversions shared by the CLI, checkpoints, and tests.
AVASRConfig model_config_from_kv(const KV& kv);
void model_config_to_kv(const AVASRConfig& c, KV& kv);
TrainConfig train_config_from_kv(const KV& kv);
void train_config_to_kv(const TrainConfig& c, KV& kv);

// Single binary archive: version byte, scalar width, RNG seed, step/epoch
// counters, config echo text, named parameter tensors (name -> shape ->
// little-endian payload), optimizer state. Writes go to a temp file renamed
// into place.
void save_checkpoint(const std::string& path, const AVASRModel& model,
                     const TrainState& state, uint64_t seed,
                     const std::string& config_echo);

struct LoadedCheckpoint {
  AVASRConfig config;  // parsed back out of the echo
  std::string config_echo;
  TrainState state;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor>> params;
};

LoadedCheckpoint read_checkpoint(const std::string& path);

// Builds a model from the checkpoint's config and installs its parameters;
// shape or name disagreements raise IoError.
AVASRModel restore_model(const LoadedCheckpoint& ckpt);

// Parses the model-config keys embedded in a config echo.
AVASRConfig model_config_from_echo(const std::string& echo);

}  // namespace avasr
