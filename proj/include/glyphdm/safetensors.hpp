#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/types.h>

namespace glyphdm {

/// Named tensors plus string metadata, stored in the safetensors layout:
/// u64 LE header size, JSON header (name -> dtype/shape/data_offsets), raw blob.
struct TensorFile {
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

/// Tensors are written as little-endian float32 in name order.
void write_safetensors(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

/// Reads F32, F16, BF16 and F64 entries; every tensor is returned as float32.
TensorFile read_safetensors(const std::filesystem::path& path);

}  // namespace glyphdm
