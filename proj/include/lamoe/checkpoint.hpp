#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lamoe/tensor.hpp"

namespace lamoe {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Checkpoint layout: magic "LSMT0001", then per parameter: name length
/// (u32 LE), UTF-8 name, rank (u32 LE), extents (u32 LE each), raw 64-bit
/// little-endian floats. No compression.
void write_checkpoint(const std::string& path, const NamedTensors& params);

NamedTensors read_checkpoint(const std::string& path);

/// Copies checkpoint values into matching destination tensors; every
/// destination must be present in the file with an identical shape.
void load_checkpoint_into(const std::string& path, NamedTensors& params);

}  // namespace lamoe
