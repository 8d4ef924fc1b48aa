#include "glyphdm/denoiser.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "glyphdm/rng.hpp"

namespace glyphdm {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

UNetConfig UNetConfig::with_base(int base_channels, int text_dim) {
  UNetConfig cfg;
  cfg.base_channels = base_channels;
  cfg.time_embed_dim = 4 * base_channels;
  cfg.text_dim = text_dim;
  return cfg;
}

void UNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("UNetConfig: " + m); };
  if (base_channels <= 0) fail("base_channels must be positive");
  for (int m : channel_multipliers) {
    if (m <= 0) fail("channel multipliers must be positive");
  }
  if (res_blocks < 1) fail("res_blocks must be >= 1");
  if (attention_heads <= 0) fail("attention_heads must be positive");
  for (int s = 0; s < 4; ++s) {
    if (stage_channels(s) % attention_heads != 0) fail("stage channels must be divisible by attention_heads");
  }
  if (time_embed_dim <= 0 || time_embed_dim % 2 != 0) fail("time_embed_dim must be positive and even");
  if (text_dim <= 0) fail("text_dim must be positive");
  if (image_size <= 0 || image_size % 16 != 0) fail("image_size must be a positive multiple of 16");
}

nlohmann::json UNetConfig::to_json() const {
  return {{"base_channels", base_channels}, {"channel_multipliers", channel_multipliers},
          {"res_blocks", res_blocks},       {"attention_heads", attention_heads},
          {"time_embed_dim", time_embed_dim}, {"text_dim", text_dim},
          {"image_size", image_size}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  const auto mult = j.at("channel_multipliers").get<std::vector<int>>();
  if (mult.size() != 4) throw std::invalid_argument("UNetConfig: channel_multipliers must have 4 entries");
  std::copy(mult.begin(), mult.end(), c.channel_multipliers.begin());
  c.res_blocks = j.value("res_blocks", 2);
  c.attention_heads = j.value("attention_heads", 4);
  c.time_embed_dim = j.value("time_embed_dim", 4 * c.base_channels);
  c.text_dim = j.at("text_dim").get<int>();
  c.image_size = j.value("image_size", 32);
  c.validate();
  return c;
}

Conditioning Conditioning::to(torch::ScalarType dtype) const {
  return {impressions.to(dtype), impression_mask, letters.to(dtype), letter_mask};
}

Conditioning Conditioning::select(const torch::Tensor& index) const {
  return {impressions.index_select(0, index), impression_mask.index_select(0, index),
          letters.index_select(0, index), letter_mask.index_select(0, index)};
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be positive and even");
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / half);
  auto args = t.to(torch::kFloat64).reshape({-1, 1}) * freqs.reshape({1, -1});
  return torch::cat({torch::sin(args), torch::cos(args)}, 1).to(torch::kFloat32);
}

int group_count(int channels) {
  // One channel per group would normalise away each channel's spatial mean,
  // leaving the net blind to the image's DC level.
  for (int g = std::min(32, channels / 4); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

namespace {

nn::GroupNorm group_norm(int channels) { return nn::GroupNorm(nn::GroupNormOptions(group_count(channels), channels)); }

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

std::string describe(const torch::Tensor& t) {
  std::string s = "(";
  for (int64_t i = 0; i < t.dim(); ++i) s += (i ? ", " : "") + std::to_string(t.size(i));
  return s + ")";
}

void record(ForwardTrace* trace, const std::string& name, const torch::Tensor& out) {
  if (trace != nullptr) trace->record(name, out);
}

template <typename Fn>
auto stage_guard(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const c10::Error& e) {
    throw std::invalid_argument("shape mismatch in " + stage + ": " + e.what_without_backtrace());
  }
}

}  // namespace

// --- ResBlock ---------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int time_embed_dim) {
  norm1 = register_module("norm1", group_norm(in_channels));
  conv1 = register_module("conv1", conv3x3(in_channels, out_channels));
  time_proj = register_module("time_proj", nn::Linear(time_embed_dim, out_channels));
  norm2 = register_module("norm2", group_norm(out_channels));
  conv2 = register_module("conv2", conv3x3(out_channels, out_channels));
  if (in_channels != out_channels) {
    shortcut = register_module("shortcut", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(F::silu(norm1(x)));
  h = h + time_proj(F::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(F::silu(norm2(h)));
  return (shortcut ? shortcut(x) : x) + h;
}

// --- attention ----------------------------------------------------------------

torch::Tensor multi_head_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                   const torch::Tensor& key_mask) {
  // Boolean masks mean "may attend"; masked keys get -inf logits inside the fused kernel.
  std::optional<torch::Tensor> attn_mask;
  if (key_mask.defined()) attn_mask = key_mask.unsqueeze(1).unsqueeze(1);
  return at::scaled_dot_product_attention(q, k, v, attn_mask);
}

namespace {

torch::Tensor split_heads(const torch::Tensor& x, int heads) {
  const auto b = x.size(0), n = x.size(1), c = x.size(2);
  return x.view({b, n, heads, c / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
  const auto b = x.size(0), h = x.size(1), n = x.size(2), d = x.size(3);
  return x.transpose(1, 2).reshape({b, n, h * d});
}

}  // namespace

CrossAttentionImpl::CrossAttentionImpl(int channels, int context_dim, int heads_) : heads(heads_) {
  norm = register_module("norm", group_norm(channels));
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, channels).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, channels).bias(false)));
  proj_out = register_module("proj_out", nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                          const torch::Tensor& mask) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (context.dim() != 3 || context.size(0) != b || context.size(2) != to_k->options.in_features()) {
    throw std::invalid_argument("cross-attention context must be (B, L, " +
                                std::to_string(to_k->options.in_features()) + "), got " + describe(context));
  }
  if (mask.dim() != 2 || mask.size(0) != b || mask.size(1) != context.size(1)) {
    throw std::invalid_argument("cross-attention mask must be (B, L), got " + describe(mask));
  }
  if (!mask.any(1).all().item<bool>()) throw std::invalid_argument("cross-attention context is fully masked");

  auto tokens = norm(x).flatten(2).transpose(1, 2);
  const auto ctx = context.masked_fill(mask.logical_not().unsqueeze(-1), 0.0);
  auto q = split_heads(to_q(tokens), heads);
  auto k = split_heads(to_k(ctx), heads);
  auto v = split_heads(to_v(ctx), heads);
  auto o = proj_out(merge_heads(multi_head_attention(q, k, v, mask)));
  return x + o.transpose(1, 2).reshape({b, c, h, w});
}

SelfAttentionImpl::SelfAttentionImpl(int channels, int heads_) : heads(heads_) {
  norm = register_module("norm", group_norm(channels));
  to_qkv = register_module("to_qkv", nn::Linear(nn::LinearOptions(channels, 3 * channels).bias(false)));
  proj_out = register_module("proj_out", nn::Linear(channels, channels));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = norm(x).flatten(2).transpose(1, 2);
  auto qkv = to_qkv(tokens).chunk(3, -1);
  auto o = multi_head_attention(split_heads(qkv[0], heads), split_heads(qkv[1], heads), split_heads(qkv[2], heads),
                                torch::Tensor());
  o = proj_out(merge_heads(o));
  return x + o.transpose(1, 2).reshape({b, c, h, w});
}

// --- stages -------------------------------------------------------------------

EncoderStageImpl::EncoderStageImpl(int in_channels, int out_channels, int res_blocks, const UNetConfig& cfg) {
  res = register_module("res", nn::ModuleList());
  for (int i = 0; i < res_blocks; ++i) {
    res->push_back(ResBlock(i == 0 ? in_channels : out_channels, out_channels, cfg.time_embed_dim));
  }
  cross_attn_imp = register_module("cross_attn_imp", CrossAttention(out_channels, cfg.text_dim, cfg.attention_heads));
  cross_attn_let = register_module("cross_attn_let", CrossAttention(out_channels, cfg.text_dim, cfg.attention_heads));
  down = register_module("down", conv3x3(out_channels, out_channels, 2));
}

std::pair<torch::Tensor, torch::Tensor> EncoderStageImpl::forward(const torch::Tensor& x, const torch::Tensor& temb,
                                                                  const Conditioning& cond, ForwardTrace* trace,
                                                                  const std::string& prefix) {
  auto h = x;
  for (std::size_t i = 0; i < res->size(); ++i) {
    h = res[i]->as<ResBlock>()->forward(h, temb);
    record(trace, prefix + ".res." + std::to_string(i), h);
  }
  h = cross_attn_imp(h, cond.impressions, cond.impression_mask);
  record(trace, prefix + ".cross_attn_imp", h);
  h = cross_attn_let(h, cond.letters, cond.letter_mask);
  record(trace, prefix + ".cross_attn_let", h);
  auto d = down(h);
  record(trace, prefix + ".down", d);
  return {h, d};
}

BottleneckImpl::BottleneckImpl(int channels, const UNetConfig& cfg) {
  res0 = register_module("res0", ResBlock(channels, channels, cfg.time_embed_dim));
  self_attn = register_module("self_attn", SelfAttention(channels, cfg.attention_heads));
  cross_attn_imp = register_module("cross_attn_imp", CrossAttention(channels, cfg.text_dim, cfg.attention_heads));
  cross_attn_let = register_module("cross_attn_let", CrossAttention(channels, cfg.text_dim, cfg.attention_heads));
  res1 = register_module("res1", ResBlock(channels, channels, cfg.time_embed_dim));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x, const torch::Tensor& temb, const Conditioning& cond,
                                      ForwardTrace* trace, const std::string& prefix) {
  auto h = res0(x, temb);
  record(trace, prefix + ".res0", h);
  h = self_attn(h);
  record(trace, prefix + ".self_attn", h);
  h = cross_attn_imp(h, cond.impressions, cond.impression_mask);
  record(trace, prefix + ".cross_attn_imp", h);
  h = cross_attn_let(h, cond.letters, cond.letter_mask);
  record(trace, prefix + ".cross_attn_let", h);
  h = res1(h, temb);
  record(trace, prefix + ".res1", h);
  return h;
}

DecoderStageImpl::DecoderStageImpl(int in_channels, int skip_channels, int out_channels, int res_blocks,
                                   const UNetConfig& cfg) {
  up = register_module("up", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in_channels, out_channels, 4)
                                                     .stride(2)
                                                     .padding(1)));
  res = register_module("res", nn::ModuleList());
  for (int i = 0; i < res_blocks; ++i) {
    res->push_back(ResBlock(i == 0 ? out_channels + skip_channels : out_channels, out_channels, cfg.time_embed_dim));
  }
  cross_attn_imp = register_module("cross_attn_imp", CrossAttention(out_channels, cfg.text_dim, cfg.attention_heads));
  cross_attn_let = register_module("cross_attn_let", CrossAttention(out_channels, cfg.text_dim, cfg.attention_heads));
}

torch::Tensor DecoderStageImpl::forward(const torch::Tensor& x, const torch::Tensor& skip, const torch::Tensor& temb,
                                        const Conditioning& cond, ForwardTrace* trace, const std::string& prefix) {
  auto h = up(x);
  record(trace, prefix + ".up", h);
  h = torch::cat({h, skip}, 1);
  for (std::size_t i = 0; i < res->size(); ++i) {
    h = res[i]->as<ResBlock>()->forward(h, temb);
    record(trace, prefix + ".res." + std::to_string(i), h);
  }
  h = cross_attn_imp(h, cond.impressions, cond.impression_mask);
  record(trace, prefix + ".cross_attn_imp", h);
  h = cross_attn_let(h, cond.letters, cond.letter_mask);
  record(trace, prefix + ".cross_attn_let", h);
  return h;
}

// --- U-Net --------------------------------------------------------------------

UNetImpl::UNetImpl(const UNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int b = cfg_.base_channels;
  stem = register_module("stem", conv3x3(1, b));
  time_fc1 = register_module("time_fc1", nn::Linear(cfg_.time_embed_dim, cfg_.time_embed_dim));
  time_fc2 = register_module("time_fc2", nn::Linear(cfg_.time_embed_dim, cfg_.time_embed_dim));

  encoder = register_module("encoder", nn::ModuleList());
  int prev = b;
  for (int s = 0; s < 4; ++s) {
    encoder->push_back(EncoderStage(prev, cfg_.stage_channels(s), cfg_.res_blocks, cfg_));
    prev = cfg_.stage_channels(s);
  }
  bottleneck = register_module("bottleneck", Bottleneck(prev, cfg_));

  // decoder[0] runs first (deepest); it mirrors encoder stage 3.
  decoder = register_module("decoder", nn::ModuleList());
  for (int s = 3; s >= 0; --s) {
    const int c = cfg_.stage_channels(s);
    decoder->push_back(DecoderStage(prev, c, c, cfg_.res_blocks, cfg_));
    prev = c;
  }
  out_norm = register_module("out_norm", group_norm(prev));
  out_conv = register_module("out_conv", conv3x3(prev, 1));
}

void UNetImpl::check_inputs(const torch::Tensor& x, const torch::Tensor& t, const Conditioning& cond) const {
  const int s = cfg_.image_size;
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != s || x.size(3) != s) {
    throw std::invalid_argument("shape mismatch in input: expected (B, 1, " + std::to_string(s) + ", " +
                                std::to_string(s) + "), got " + describe(x));
  }
  const auto batch = x.size(0);
  if (t.dim() != 1 || t.size(0) != batch) {
    throw std::invalid_argument("shape mismatch in time embedding: t must be (" + std::to_string(batch) + "), got " +
                                describe(t));
  }
  auto check_seq = [&](const torch::Tensor& seq, const torch::Tensor& mask, const char* what) {
    if (!seq.defined() || seq.dim() != 3 || seq.size(0) != batch || seq.size(2) != cfg_.text_dim) {
      throw std::invalid_argument(std::string("shape mismatch in ") + what + ": expected (" + std::to_string(batch) +
                                  ", L, " + std::to_string(cfg_.text_dim) + "), got " +
                                  (seq.defined() ? describe(seq) : std::string("undefined")));
    }
    if (!mask.defined() || mask.dim() != 2 || mask.size(0) != batch || mask.size(1) != seq.size(1)) {
      throw std::invalid_argument(std::string("shape mismatch in ") + what + " mask");
    }
  };
  check_seq(cond.impressions, cond.impression_mask, "impression embeddings (cross_attn_imp)");
  check_seq(cond.letters, cond.letter_mask, "letter embeddings (cross_attn_let)");
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const Conditioning& cond,
                                ForwardTrace* trace) {
  check_inputs(x, t, cond);
  auto temb = timestep_embedding(t, cfg_.time_embed_dim).to(x.dtype());
  temb = time_fc2(F::silu(time_fc1(temb)));

  auto h = stem(x);
  record(trace, "stem", h);
  std::vector<torch::Tensor> skips;
  for (std::size_t s = 0; s < encoder->size(); ++s) {
    const std::string name = "encoder." + std::to_string(s);
    auto [skip, down] = stage_guard(name, [&] { return encoder[s]->as<EncoderStage>()->forward(h, temb, cond, trace, name); });
    skips.push_back(skip);
    h = down;
  }
  h = stage_guard("bottleneck", [&] { return bottleneck->forward(h, temb, cond, trace, "bottleneck"); });
  for (std::size_t d = 0; d < decoder->size(); ++d) {
    const std::string name = "decoder." + std::to_string(d);
    const auto& skip = skips[skips.size() - 1 - d];
    h = stage_guard(name, [&] { return decoder[d]->as<DecoderStage>()->forward(h, skip, temb, cond, trace, name); });
  }
  auto out = out_conv(F::silu(out_norm(h)));
  record(trace, "out_conv", out);
  return out;
}

// --- parameter accounting / init ---------------------------------------------

namespace {

int64_t conv_params(int64_t in, int64_t out, int64_t k) { return in * out * k * k + out; }
int64_t linear_params(int64_t in, int64_t out, bool bias = true) { return in * out + (bias ? out : 0); }
int64_t norm_params(int64_t c) { return 2 * c; }

int64_t resblock_params(int64_t in, int64_t out, int64_t te) {
  return norm_params(in) + conv_params(in, out, 3) + linear_params(te, out) + norm_params(out) +
         conv_params(out, out, 3) + (in != out ? conv_params(in, out, 1) : 0);
}

int64_t cross_attn_params(int64_t c, int64_t d) {
  return norm_params(c) + linear_params(c, c, false) + 2 * linear_params(d, c, false) + linear_params(c, c);
}

int64_t self_attn_params(int64_t c) { return norm_params(c) + linear_params(c, 3 * c, false) + linear_params(c, c); }

}  // namespace

int64_t parameter_count(const UNetConfig& cfg) {
  cfg.validate();
  const int64_t te = cfg.time_embed_dim;
  const int64_t d = cfg.text_dim;
  int64_t total = conv_params(1, cfg.base_channels, 3) + 2 * linear_params(te, te);
  int64_t prev = cfg.base_channels;
  for (int s = 0; s < 4; ++s) {
    const int64_t c = cfg.stage_channels(s);
    for (int r = 0; r < cfg.res_blocks; ++r) total += resblock_params(r == 0 ? prev : c, c, te);
    total += 2 * cross_attn_params(c, d) + conv_params(c, c, 3);
    prev = c;
  }
  total += 2 * resblock_params(prev, prev, te) + self_attn_params(prev) + 2 * cross_attn_params(prev, d);
  for (int s = 3; s >= 0; --s) {
    const int64_t c = cfg.stage_channels(s);
    total += prev * c * 16 + c;  // transposed conv, kernel 4
    for (int r = 0; r < cfg.res_blocks; ++r) total += resblock_params(r == 0 ? 2 * c : c, c, te);
    total += 2 * cross_attn_params(c, d);
    prev = c;
  }
  total += norm_params(prev) + conv_params(prev, 1, 3);
  return total;
}

int64_t parameter_count(torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool zero_initialized(const std::string& name) {
  return name.find("conv2.") != std::string::npos || name.find("proj_out.") != std::string::npos ||
         name.rfind("out_conv.", 0) == 0;
}

}  // namespace

void initialize_weights(UNetImpl& model, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(derive_seed(seed, "init"));
  for (auto& item : model.named_parameters()) {
    const auto& name = item.key();
    auto& p = item.value();
    if (zero_initialized(name)) {
      p.zero_();
    } else if (name.find("norm") != std::string::npos) {
      ends_with(name, ".weight") ? p.fill_(1.0) : p.zero_();
    } else if (ends_with(name, ".bias")) {
      p.zero_();
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.numel() / p.size(0)));
      p.copy_(torch::rand(p.sizes(), gen, p.options()) * (2.0 * bound) - bound);
    }
  }
}

}  // namespace glyphdm
