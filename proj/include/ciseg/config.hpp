#pragma once

#include <string>

#include "ciseg/trainer.hpp"

namespace ciseg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// JSON experiment document. Unknown keys anywhere are rejected. The hash
// covers the experiment identity (protocol, seeds, model, weights, schedule)
// but not where outputs land or how many worker threads run.
struct ExperimentConfig {
  int schema_version = 1;
  std::string protocol_name = "6-2 (3 steps)";
  std::string setting = "overlapped";
  std::string mode = "semantic";
  uint64_t seed = 0;
  uint64_t class_order_seed = 0;
  int steps_iterations = 2000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int eval_interval = 200;
  int train_size = 512;
  int test_size = 64;
  int image_size = 64;
  int instances_min = 1;
  int instances_max = 4;
  int threads = 0;
  bool record_wall_clock = false;
  ModelConfig model;  // image_h/w follow image_size
  AblationFlags ablations;
  LossWeights loss_weights;
  CostWeights cost_weights;
  std::vector<int> pod_scales = {1, 2};
  std::string output_dir = "runs/default";
  std::string dataset_cache;
  bool plots = true;

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  std::string to_json_text() const;  // canonical, includes defaults
  std::string hash() const;          // 16 hex chars over the identity subset

  TrainConfig to_train_config() const;
};

}  // namespace ciseg
