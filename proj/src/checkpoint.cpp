#include "glyphdm/checkpoint.hpp"

#include <set>
#include <stdexcept>

#include "glyphdm/hash.hpp"
#include "glyphdm/safetensors.hpp"

namespace glyphdm {

using nlohmann::json;

json CheckpointHeader::to_json() const {
  return {{"format", kCheckpointFormat}, {"version", 1},           {"unet", unet.to_json()},
          {"schedule", schedule},        {"encoder_hash", encoder_hash}, {"epoch", epoch},
          {"global_step", global_step},  {"seed", seed},           {"training", training},
          {"optimizer", optimizer}};
}

CheckpointHeader CheckpointHeader::from_json(const json& j) {
  if (j.value("format", std::string()) != kCheckpointFormat) {
    throw std::invalid_argument("not a glyphdm checkpoint header");
  }
  CheckpointHeader h;
  h.unet = UNetConfig::from_json(j.at("unet"));
  h.schedule = j.at("schedule");
  h.encoder_hash = j.value("encoder_hash", std::string());
  h.epoch = j.value("epoch", 0);
  h.global_step = j.value("global_step", int64_t{0});
  h.seed = j.value("seed", std::uint64_t{0});
  h.training = j.value("training", json::object());
  h.optimizer = j.value("optimizer", json::object());
  return h;
}

void save_checkpoint(const std::filesystem::path& path, UNetImpl& model, const CheckpointHeader& header,
                     const std::map<std::string, torch::Tensor>& extra) {
  if (!(header.unet == model.config())) throw std::invalid_argument("save_checkpoint: header config != model config");
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  for (const auto& item : model.named_parameters()) tensors.emplace_back(item.key(), item.value());
  for (const auto& [name, t] : extra) {
    if (name.rfind(kOptimizerPrefix, 0) != 0) {
      throw std::invalid_argument("save_checkpoint: extra tensor names must start with optimizer.");
    }
    tensors.emplace_back(name, t);
  }
  write_safetensors(path, tensors, {{"header", header.to_json().dump()}});
}

void load_weights(UNetImpl& model, const std::map<std::string, torch::Tensor>& tensors,
                  const UNetConfig* header_config) {
  if (header_config != nullptr && !(*header_config == model.config())) {
    throw std::invalid_argument("checkpoint config does not match model config: " + header_config->to_json().dump() +
                                " vs " + model.config().to_json().dump());
  }
  torch::NoGradGuard no_grad;
  std::set<std::string> seen;
  auto params = model.named_parameters();
  for (const auto& [name, t] : tensors) {
    if (name.rfind(kOptimizerPrefix, 0) == 0) continue;
    auto* p = params.find(name);
    if (p == nullptr) throw std::invalid_argument("checkpoint tensor " + name + " has no matching layer");
    if (!p->sizes().equals(t.sizes())) throw std::invalid_argument("checkpoint tensor " + name + " has wrong shape");
    p->copy_(t);
    seen.insert(name);
  }
  for (const auto& item : params) {
    if (!seen.count(item.key())) throw std::invalid_argument("checkpoint lacks layer " + item.key());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto file = read_safetensors(path);
  const auto it = file.metadata.find("header");
  if (it == file.metadata.end()) throw std::invalid_argument("checkpoint has no header: " + path.string());
  LoadedCheckpoint out;
  out.header = CheckpointHeader::from_json(json::parse(it->second));
  out.schedule = NoiseSchedule::from_json(out.header.schedule);
  out.model = UNet(out.header.unet);
  load_weights(*out.model, file.tensors, &out.header.unet);
  out.model->eval();
  for (auto& [name, t] : file.tensors) {
    if (name.rfind(kOptimizerPrefix, 0) == 0) out.extra.emplace(name, t);
  }
  out.file_hash = sha256_file(path);
  return out;
}

json layer_manifest(UNetImpl& model) {
  json layers = json::array();
  for (const auto& item : model.named_parameters()) {
    layers.push_back({{"name", item.key()}, {"shape", item.value().sizes().vec()}});
  }
  return layers;
}

}  // namespace glyphdm
