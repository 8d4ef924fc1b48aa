#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

namespace glyphdm {

struct UNetConfig {
  int base_channels = 64;
  std::array<int, 4> channel_multipliers = {1, 2, 4, 4};
  int res_blocks = 2;  // per encoder/decoder stage
  int attention_heads = 4;
  int time_embed_dim = 256;
  int text_dim = 768;
  int image_size = 32;

  /// Default channel plan at the given width; time embedding is 4x base width.
  static UNetConfig with_base(int base_channels, int text_dim);

  int stage_channels(int stage) const { return base_channels * channel_multipliers.at(static_cast<std::size_t>(stage)); }
  void validate() const;
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
  bool operator==(const UNetConfig&) const = default;
};

/// Batched conditioning pair. Masks are bool, true on real (non-padding) tokens.
struct Conditioning {
  torch::Tensor impressions;      // (B, L_imp, D)
  torch::Tensor impression_mask;  // (B, L_imp)
  torch::Tensor letters;          // (B, 3, D)
  torch::Tensor letter_mask;      // (B, 3)

  int64_t batch() const { return impressions.size(0); }
  Conditioning to(torch::ScalarType dtype) const;
  /// Rows `index` (int64, shape (N)) of every member.
  Conditioning select(const torch::Tensor& index) const;
};

/// Records (qualified layer name, output shape) for each layer a forward pass runs.
struct ForwardTrace {
  std::vector<std::pair<std::string, std::vector<int64_t>>> events;
  void record(const std::string& name, const torch::Tensor& out) { events.emplace_back(name, out.sizes().vec()); }
};

/// Sinusoidal encoding of integer steps: [sin(t f_i), cos(t f_i)], f_i = 10000^(-i / (dim/2)).
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

/// Largest divisor of `channels` that is at most min(32, channels / 4).
int group_count(int channels);

class ResBlockImpl : public torch::nn::Module {
public:
  ResBlockImpl(int in_channels, int out_channels, int time_embed_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear time_proj{nullptr};
  torch::nn::Conv2d shortcut{nullptr};  // 1x1 when channel count changes
};
TORCH_MODULE(ResBlock);

/// Multi-head attention from spatial tokens (queries) to a context sequence,
/// with pre-normalized queries, masked padding keys and a residual add.
class CrossAttentionImpl : public torch::nn::Module {
public:
  CrossAttentionImpl(int channels, int context_dim, int heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, const torch::Tensor& mask);

  int heads;
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, proj_out{nullptr};
};
TORCH_MODULE(CrossAttention);

class SelfAttentionImpl : public torch::nn::Module {
public:
  SelfAttentionImpl(int channels, int heads);
  torch::Tensor forward(const torch::Tensor& x);

  int heads;
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_qkv{nullptr}, proj_out{nullptr};
};
TORCH_MODULE(SelfAttention);

/// (B, H, N, dh) x (B, H, M, dh) -> (B, H, N, dh); `key_mask` (B, M) bool or undefined.
torch::Tensor multi_head_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                   const torch::Tensor& key_mask);

/// ResBlocks -> CrossAttn-IMP -> CrossAttn-LET -> stride-2 conv.
class EncoderStageImpl : public torch::nn::Module {
public:
  EncoderStageImpl(int in_channels, int out_channels, int res_blocks, const UNetConfig& cfg);
  /// Returns {skip (pre-downsample), downsampled}.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& temb,
                                                  const Conditioning& cond, ForwardTrace* trace,
                                                  const std::string& prefix);

  torch::nn::ModuleList res{nullptr};
  CrossAttention cross_attn_imp{nullptr}, cross_attn_let{nullptr};
  torch::nn::Conv2d down{nullptr};
};
TORCH_MODULE(EncoderStage);

/// ResBlock -> SelfAttn -> CrossAttn-IMP -> CrossAttn-LET -> ResBlock.
class BottleneckImpl : public torch::nn::Module {
public:
  BottleneckImpl(int channels, const UNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb, const Conditioning& cond,
                        ForwardTrace* trace, const std::string& prefix);

  ResBlock res0{nullptr};
  SelfAttention self_attn{nullptr};
  CrossAttention cross_attn_imp{nullptr}, cross_attn_let{nullptr};
  ResBlock res1{nullptr};
};
TORCH_MODULE(Bottleneck);

/// Stride-2 transposed conv -> concat mirrored skip -> ResBlocks -> CrossAttn-IMP -> CrossAttn-LET.
class DecoderStageImpl : public torch::nn::Module {
public:
  DecoderStageImpl(int in_channels, int skip_channels, int out_channels, int res_blocks, const UNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip, const torch::Tensor& temb,
                        const Conditioning& cond, ForwardTrace* trace, const std::string& prefix);

  torch::nn::ConvTranspose2d up{nullptr};
  torch::nn::ModuleList res{nullptr};
  CrossAttention cross_attn_imp{nullptr}, cross_attn_let{nullptr};
};
TORCH_MODULE(DecoderStage);

/// Noise predictor eps_theta(x_t, t, [c_let, c_imp]).
class UNetImpl : public torch::nn::Module {
public:
  explicit UNetImpl(const UNetConfig& cfg);

  /// x: (B, 1, S, S); t: int64 (B) with 1-based steps; returns (B, 1, S, S).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const Conditioning& cond,
                        ForwardTrace* trace = nullptr);

  const UNetConfig& config() const { return cfg_; }

  torch::nn::Conv2d stem{nullptr};
  torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
  torch::nn::ModuleList encoder{nullptr};
  Bottleneck bottleneck{nullptr};
  torch::nn::ModuleList decoder{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
  torch::nn::Conv2d out_conv{nullptr};

private:
  void check_inputs(const torch::Tensor& x, const torch::Tensor& t, const Conditioning& cond) const;
  UNetConfig cfg_;
};
TORCH_MODULE(UNet);

/// Closed-form parameter count of the architecture described by `cfg`.
int64_t parameter_count(const UNetConfig& cfg);
int64_t parameter_count(torch::nn::Module& module);

/// Seeded init: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, norms (1, 0);
/// ResBlock conv2, attention proj_out and out_conv start at zero.
void initialize_weights(UNetImpl& model, std::uint64_t seed);

}  // namespace glyphdm
