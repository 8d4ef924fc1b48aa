#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "glyphdm/denoiser.hpp"
#include "glyphdm/schedule.hpp"

namespace glyphdm {

inline constexpr const char* kCheckpointFormat = "glyphdm-checkpoint";
inline constexpr const char* kOptimizerPrefix = "optimizer.";

/// JSON header stored with the weights (under safetensors __metadata__.header).
struct CheckpointHeader {
  UNetConfig unet;
  nlohmann::json schedule;
  std::string encoder_hash;
  int epoch = 0;  // completed epochs
  int64_t global_step = 0;
  std::uint64_t seed = 0;
  nlohmann::json training = nlohmann::json::object();
  nlohmann::json optimizer = nlohmann::json::object();

  nlohmann::json to_json() const;
  static CheckpointHeader from_json(const nlohmann::json& j);
};

/// Model parameters are stored under their layer names; `extra` tensors (e.g.
/// optimizer moments) must use names starting with "optimizer.".
void save_checkpoint(const std::filesystem::path& path, UNetImpl& model, const CheckpointHeader& header,
                     const std::map<std::string, torch::Tensor>& extra = {});

struct LoadedCheckpoint {
  UNet model{nullptr};
  CheckpointHeader header;
  NoiseSchedule schedule;
  std::map<std::string, torch::Tensor> extra;
  std::string file_hash;  // sha256 of the checkpoint file
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Copies named tensors into `model`. Names or shapes that disagree with the
/// model (or a header config that differs from the model's) are rejected.
void load_weights(UNetImpl& model, const std::map<std::string, torch::Tensor>& tensors,
                  const UNetConfig* header_config = nullptr);

/// Layer names and shapes as a JSON manifest, for loaders in other languages.
nlohmann::json layer_manifest(UNetImpl& model);

}  // namespace glyphdm
