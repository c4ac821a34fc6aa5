#pragma once

#include <memory>
#include <string>

#include "ciseg/model.hpp"
#include "ciseg/query_queue.hpp"

namespace ciseg {

// Versioned binary container: 8-byte magic, u32 format version, u64 metadata
// length, JSON metadata (config hash, step, model config, queue layout,
// tensor directory), then the named parameter blobs as little-endian float32
// in directory order, and a trailing CRC32 over everything before it.
// save -> load -> save is byte-identical.

struct LoadedCheckpoint {
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<QueryQueue<float>> queue;
  int step = 0;
  TaskMode mode = TaskMode::kSemantic;
  std::string config_hash;
};

void checkpoint_save(const std::string& path, const Model<float>& model,
                     const QueryQueue<float>& queue, int step, TaskMode mode,
                     const std::string& config_hash);

LoadedCheckpoint checkpoint_load(const std::string& path);

}  // namespace ciseg
