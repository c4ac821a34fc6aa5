#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ciseg/matching.hpp"
#include "ciseg/query_queue.hpp"

namespace ciseg {

// Shape vocabulary. Class ids index this list.
inline constexpr int kVocabularySize = 10;
const char* shape_name(int class_id);

struct ShapeInstance {
  int class_id = -1;
  double cx = 0, cy = 0;    // center, pixels
  double size = 0;          // characteristic radius, pixels
  double rotation = 0;      // radians
  double fill = 0;          // base intensity in (0,1]
  std::vector<uint8_t> visible_mask;  // H*W after occlusion by later instances
  int visible_pixels = 0;
};

// One rendered sample with complete ground truth. Instances are stored in
// draw order; visible masks are pairwise disjoint and, together with the
// background, partition the canvas.
struct ShapeScene {
  int height = 0, width = 0;
  std::vector<uint8_t> image;  // planar RGB, 3*H*W, 0..255
  std::vector<ShapeInstance> instances;
};

// Deterministic given seed. Degenerate instances (fewer than 16 visible
// pixels, before or after occlusion) are re-drawn; more than 100 re-draws for
// one scene is an error.
ShapeScene generate_scene(uint64_t seed, const std::vector<int>& class_pool,
                          std::pair<int, int> instance_count_range, int height, int width);

// Step-specific view of a scene: everything outside step_classes is
// background.
struct StepTarget {
  TaskMode mode = TaskMode::kSemantic;
  int height = 0, width = 0;
  std::vector<uint8_t> semantic;        // H*W labels, 255 = background
  std::vector<MaskTarget> targets;      // matching/supervision targets
};

StepTarget relabel_for_step(const ShapeScene& scene, const std::vector<int>& step_classes,
                            TaskMode mode);

// ----------------------------------------------------------------- protocol

enum class Setting { kOverlapped, kDisjoint };

inline const char* to_string(Setting s) {
  return s == Setting::kOverlapped ? "overlapped" : "disjoint";
}

struct Protocol {
  std::string name;
  int base_classes = 0;
  int increment = 0;
  int steps = 0;
  Setting setting = Setting::kOverlapped;
  uint64_t class_order_seed = 0;
  std::vector<int> class_order;               // seeded permutation of the vocabulary
  std::vector<std::vector<int>> step_classes; // classes introduced per step

  std::vector<int> classes_through(int step) const;
  int total_classes() const;
};

// Accepts "B-I (k steps)" and the explicit form "a-b-c"; a trailing "-0"
// means a single base step.
Protocol build_protocol(const std::string& name, Setting setting = Setting::kOverlapped,
                        uint64_t class_order_seed = 0, int vocabulary = kVocabularySize);

// ------------------------------------------------------------------ sampling

enum class Split { kTrain, kTest };

struct DatasetSpec {
  const Protocol* protocol = nullptr;
  int step = 0;
  Split split = Split::kTrain;
  TaskMode mode = TaskMode::kSemantic;
  uint64_t seed = 0;
  int height = 64, width = 64;
  int instances_min = 1, instances_max = 4;
};

struct Sample {
  ShapeScene scene;
  StepTarget target;  // train: labels over C_t; test: labels over C_{0:t}
};

// Pure function of (spec, index): safe to call from any thread, in any order.
Sample dataset_sample(const DatasetSpec& spec, int index);

// --------------------------------------------------------------- disk cache

struct CacheManifest {
  std::string protocol_name;
  std::string setting;
  std::string mode;
  uint64_t seed = 0;
  int train_size = 0, test_size = 0;
  int height = 0, width = 0;
  int steps = 0;
};

// One binary file per (step, split) plus manifest.json. Regeneration from the
// same parameters is byte-identical.
void write_dataset_cache(const std::string& dir, const Protocol& protocol, TaskMode mode,
                         uint64_t seed, int train_size, int test_size, int height, int width);
CacheManifest read_cache_manifest(const std::string& dir);
std::vector<ShapeScene> read_cache_split(const std::string& dir, int step, Split split);

}  // namespace ciseg
