#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ciseg/data.hpp"
#include "ciseg/episode.hpp"
#include "ciseg/metrics.hpp"
#include "ciseg/model.hpp"
#include "ciseg/query_queue.hpp"

namespace ciseg {

struct TrainConfig {
  Protocol protocol;
  TaskMode mode = TaskMode::kSemantic;
  ModelConfig model;
  int steps_iterations = 2000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  uint64_t seed = 0;
  AblationFlags ablations;
  LossWeights loss_weights;
  CostWeights cost_weights;
  std::vector<int> pod_scales = {1, 2};
  int eval_interval = 200;
  int train_size = 512;
  int test_size = 64;
  int instances_min = 1, instances_max = 4;
  int threads = 0;  // 0 = hardware concurrency (capped)
  bool record_wall_clock = false;
  std::string out_dir;       // empty disables all file output
  std::string config_hash;

  void validate() const;
};

// Immutable end-of-step copy of the model and queue; the distillation target
// for the following step.
struct TeacherSnapshot {
  Model<float> model;
  QueryQueue<float> queue;
  int step_index = 0;

  TeacherSnapshot(const Model<float>& m, const QueryQueue<float>& q, int step)
      : model(m), queue(q), step_index(step) {}
  uint64_t checksum() const;
};

struct TrainResult {
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<QueryQueue<float>> queue;
  std::vector<MetricsRecord> metrics;       // every evaluation record
  std::vector<MetricsRecord> end_of_step;   // final record of each step
  int64_t frozen_assignment_violations = 0; // matches that referenced frozen queries
  std::vector<int64_t> param_count_per_step;
};

TrainResult train_continual(const TrainConfig& config, const std::string& resume_checkpoint = "");

// Evaluation over the step's test split; pure given (model, queue, config).
MetricsRecord evaluate_model(const Model<float>& model, const QueryQueue<float>& queue,
                             const TrainConfig& config, int step, int iteration, int threads);

int64_t total_param_count(const Model<float>& model, const QueryQueue<float>& queue);

int resolve_threads(int requested);

}  // namespace ciseg
