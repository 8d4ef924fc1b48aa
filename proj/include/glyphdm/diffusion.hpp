#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "glyphdm/checkpoint.hpp"
#include "glyphdm/dataset.hpp"
#include "glyphdm/denoiser.hpp"
#include "glyphdm/schedule.hpp"
#include "glyphdm/text_encoder.hpp"

namespace glyphdm {

struct TrainingConfig {
  int batch_size = 256;
  double learning_rate = 2e-4;
  double lr_decay_factor = 0.9;  // applied every `lr_decay_every` epochs
  int lr_decay_every = 10;
  int epochs = 400;
  int T_train = kTrainSteps;
  double beta_start = kBetaStart;
  double beta_end = kBetaEnd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  int64_t max_steps = 0;  // 0: no limit
  int keep_checkpoints = 0;  // per-epoch files retained; 0 keeps all
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
};

/// Learning rate in effect during 0-based `epoch`.
double learning_rate_at(const TrainingConfig& cfg, int epoch);

/// eps_theta(x_t, t) with the conditioning already bound; `t` is int64 (B), 1-based.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t)>;

NoisePredictor bind_model(UNetImpl& model, const Conditioning& cond);

struct LossSample {
  torch::Tensor loss;  // scalar
  torch::Tensor t;
  torch::Tensor eps;
  torch::Tensor x_t;
};

/// t ~ U{1..T}, eps ~ N(0, I) per image, x_t = q_sample(x0, t, eps), loss = mean((eps - eps_hat)^2).
LossSample training_loss(const torch::Tensor& x0, const NoisePredictor& model, const NoiseSchedule& schedule,
                         at::Generator& t_gen, at::Generator& eps_gen);

class NonFiniteLoss : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Adam moments keyed "optimizer.exp_avg.<param>" / "optimizer.exp_avg_sq.<param>".
std::map<std::string, torch::Tensor> adam_state(torch::optim::Adam& opt, torch::nn::Module& model);
void load_adam_state(torch::optim::Adam& opt, torch::nn::Module& model,
                     const std::map<std::string, torch::Tensor>& state, int64_t steps);

/// In-memory training pairs (font, letter) with their glyph and embeddings.
struct TrainingSet {
  torch::Tensor images;          // (N, 1, 32, 32) in [-1, 1]
  std::vector<int> font_of;      // per pair
  std::vector<int> letter_of;    // per pair, 0..25
  std::vector<std::string> font_ids;
  std::vector<std::string> sentences;                  // per font
  std::vector<EmbeddingSequence> font_impressions;     // per font
  std::vector<EmbeddingSequence> letter_embeddings;    // 26
  std::string encoder_hash;

  int64_t size() const { return images.size(0); }
  Conditioning conditioning(const torch::Tensor& index) const;
  std::string describe(int64_t pair) const;

  static TrainingSet from_manifest(const Manifest& manifest, const TextEncoder& encoder,
                                   const std::string& split = "train");
  /// Fonts given as keyword lists and 26 glyphs each.
  static TrainingSet from_fonts(const std::vector<std::string>& font_ids,
                                const std::vector<std::vector<std::string>>& keywords,
                                const std::vector<std::array<GlyphImage, kNumLetters>>& glyphs,
                                const TextEncoder& encoder);
};

struct StepRecord {
  int epoch = 0;
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// Single-writer training state: model, Adam moments and counters. All
/// randomness is derived from `config.seed` per (stream, epoch), so resuming at
/// an epoch boundary replays exactly what an uninterrupted run would do.
class Trainer {
public:
  Trainer(TrainingConfig config, UNetConfig unet, std::shared_ptr<const TrainingSet> data);

  /// Runs one epoch (or until max_steps / `should_stop`); returns per-step records.
  /// An interrupted epoch does not advance `epoch()`.
  std::vector<StepRecord> run_epoch(const std::function<bool()>& should_stop = {});
  double train_step(const torch::Tensor& batch_index, at::Generator& t_gen, at::Generator& eps_gen, double lr);

  int epoch() const { return epoch_; }
  int64_t global_step() const { return global_step_; }
  bool finished() const;
  UNetImpl& model() { return *model_; }
  UNet model_handle() const { return model_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const TrainingConfig& config() const { return config_; }

  void save(const std::filesystem::path& path);
  /// Restores model, optimizer and counters; the checkpoint must match this trainer's configs.
  void resume(const std::filesystem::path& path);

private:
  TrainingConfig config_;
  NoiseSchedule schedule_;
  std::shared_ptr<const TrainingSet> data_;
  UNet model_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  int epoch_ = 0;
  int64_t global_step_ = 0;
};

struct TrainOutcome {
  std::filesystem::path last_checkpoint;
  int epochs_completed = 0;
  int64_t steps = 0;
  double last_loss = 0.0;
  bool interrupted = false;
};

/// Epoch loop over the manifest's train split: per-epoch checkpoints
/// (`checkpoint-eNNNN.safetensors`, atomically replaced `latest.safetensors`)
/// and `loss.csv` (epoch,step,lr,loss). Resumes from `resume_from` when given.
TrainOutcome train(const TrainingConfig& config, const UNetConfig& unet, const Manifest& manifest,
                   const TextEncoder& encoder, const std::filesystem::path& out_dir,
                   const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                   const std::atomic<bool>* stop_flag = nullptr);

// --- samplers -----------------------------------------------------------------

struct SamplerConfig {
  std::string method = "ddim";  // "ddim" or "ddpm"
  int steps = 100;
  double eta = 0.0;
  std::uint64_t seed = 0;

  void validate(int T) const;
};

/// Uniform-stride subsequence {T/steps, 2T/steps, ..., T}; `steps` must divide T.
std::vector<int> ddim_timesteps(int T, int steps);

/// x_{t_prev} = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - s^2) eps_hat + s z, with
/// s = eta sqrt((1 - ab_prev)/(1 - ab_t)) sqrt(1 - ab_t/ab_prev). x0_hat is clipped to
/// [-1, 1] each step and eps_hat re-derived from it.
torch::Tensor ddim_loop(torch::Tensor x_T, const NoisePredictor& model, const NoiseSchedule& schedule, int steps,
                        double eta, at::Generator* gen);

/// Ancestral chain t = T..1 with posterior mean from eps_hat and sigma_t =
/// sigma_scale * sqrt(posterior variance); no noise at t = 1. Returns the unclamped x_0.
torch::Tensor ddpm_loop(torch::Tensor x_T, const NoisePredictor& model, const NoiseSchedule& schedule,
                        at::Generator& gen, double sigma_scale = 1.0);

class SamplingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// n images for one conditioning pair: x_T ~ N(0, I) from `seed`, clamped to [-1, 1].
torch::Tensor sample_ddpm(int n, const ConditioningPair& cond, UNetImpl& model, const NoiseSchedule& schedule,
                          std::uint64_t seed);
torch::Tensor sample_ddim(int n, const ConditioningPair& cond, UNetImpl& model, const NoiseSchedule& schedule,
                          int steps, double eta, std::uint64_t seed);

/// Clamps to [-1, 1] and maps to 8-bit: round((x + 1) * 127.5).
std::vector<GrayImage> to_gray_images(const torch::Tensor& images);

/// Letters x variants generation used by the CLI, the service and evaluation.
/// Variant i draws its starting noise from seed + i, shared by every letter of
/// that variant; the impression sentence is encoded once.
class GlyphSampler {
public:
  GlyphSampler(UNet model, NoiseSchedule schedule, std::shared_ptr<const TextEncoder> encoder);

  /// Returns (n_variants, |letters|, 1, 32, 32) in [-1, 1].
  torch::Tensor generate(const std::string& letters, const std::string& sentence, const SamplerConfig& sampler,
                         int n_variants = 1) const;

  const NoiseSchedule& schedule() const { return schedule_; }
  const TextEncoder& encoder() const { return *encoder_; }

private:
  UNet model_;
  NoiseSchedule schedule_;
  std::shared_ptr<const TextEncoder> encoder_;
  std::array<EmbeddingSequence, kNumLetters> letters_;
};

}  // namespace glyphdm
