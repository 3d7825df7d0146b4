#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vpt/tensor.hpp"

namespace vptlab {

// On-disk model format: magic "VPTC", a version integer, a textual header
// mapping tensor names to shapes and payload offsets, then raw little-endian
// float32 data. Tensors are written in sorted name order so that
// save -> load -> save is byte-identical.
struct CheckpointData {
  std::map<std::string, std::string> meta;  // config keys, flat k=v
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// FNV-1a over the file bytes; used in run manifests.
uint64_t file_hash(const std::string& path);

}  // namespace vptlab
