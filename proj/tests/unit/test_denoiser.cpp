#include <gtest/gtest.h>

#include <cmath>

#include <torch/torch.h>

#include "glyphdm/denoiser.hpp"
#include "glyphdm/rng.hpp"

using namespace glyphdm;

namespace {

Conditioning random_cond(int64_t b, int64_t imp_len, int64_t dim, at::Generator& gen) {
  Conditioning c;
  c.impressions = torch::randn({b, imp_len, dim}, gen);
  c.impression_mask = torch::ones({b, imp_len}, torch::kBool);
  c.letters = torch::randn({b, 3, dim}, gen);
  c.letter_mask = torch::ones({b, 3}, torch::kBool);
  return c;
}

UNetConfig tiny(int base = 8, int text_dim = 16) {
  auto c = UNetConfig::with_base(base, text_dim);
  c.res_blocks = 1;
  return c;
}

/// Replaces every parameter with small random values so no path is zero-initialised.
void randomize(torch::nn::Module& m, std::uint64_t seed) {
  torch::NoGradGuard g;
  auto gen = make_generator(seed);
  for (auto& p : m.parameters()) p.copy_(torch::randn(p.sizes(), gen, p.options()) * 0.2);
}

}  // namespace

TEST(TimestepEmbedding, HandComputedTable) {
  const auto e = timestep_embedding(torch::tensor({1, 2}, torch::kLong), 8);
  const double expected[2][8] = {
      {0.8414709848, 0.0998334166, 0.0099998333, 0.0009999998, 0.5403023059, 0.9950041653, 0.9999500004, 0.9999995000},
      {0.9092974268, 0.1986693308, 0.0199986667, 0.0019999987, -0.4161468365, 0.9800665778, 0.9998000067, 0.9999980000}};
  for (int r = 0; r < 2; ++r)
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(e[r][i].item<double>(), expected[r][i], 1e-7) << r << "," << i;
  const auto far = timestep_embedding(torch::tensor({1, 1000}, torch::kLong), 64);
  EXPECT_GT((far[0] - far[1]).abs().max().item<double>(), 0.1);
  EXPECT_TRUE(torch::equal(timestep_embedding(torch::tensor({5}), 16), timestep_embedding(torch::tensor({5}), 16)));
}

TEST(GroupNorm, GroupCounts) {
  EXPECT_EQ(group_count(8), 2);
  EXPECT_EQ(group_count(16), 4);
  EXPECT_EQ(group_count(32), 8);
  EXPECT_EQ(group_count(64), 16);
  EXPECT_EQ(group_count(48), 12);
  EXPECT_EQ(group_count(128), 32);
  EXPECT_EQ(group_count(256), 32);
  EXPECT_EQ(group_count(3), 1);
}

TEST(ResBlock, ZeroInitIsShortcut) {
  UNet model(tiny());
  initialize_weights(*model, 1);
  auto gen = make_generator(2);
  auto block = model->encoder[1]->as<EncoderStage>()->res[0]->as<ResBlock>();  // 8 -> 16 channels
  const auto x = torch::randn({2, 8, 16, 16}, gen);
  const auto temb = torch::randn({2, model->config().time_embed_dim}, gen);
  torch::NoGradGuard g;
  EXPECT_TRUE(torch::allclose(block->forward(x, temb), block->shortcut(x), 1e-6, 1e-6));
  auto same = model->encoder[0]->as<EncoderStage>()->res[0]->as<ResBlock>();
  const auto y = torch::randn({2, 8, 32, 32}, gen);
  EXPECT_TRUE(torch::equal(same->forward(y, temb), y));
}

TEST(ResBlock, FiniteDifferenceGradientWrtTimeEmbedding) {
  ResBlock block(4, 4, 8);
  block->to(torch::kFloat64);
  randomize(*block, 3);
  auto gen = make_generator(4);
  const auto x = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64);
  const auto w = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64);
  auto temb = torch::randn({1, 8}, gen, torch::kFloat64).requires_grad_(true);
  (block->forward(x, temb) * w).sum().backward();
  const auto analytic = temb.grad().clone();
  torch::NoGradGuard g;
  const double h = 1e-6;
  for (int i = 0; i < 8; ++i) {
    auto tp = temb.detach().clone(), tm = temb.detach().clone();
    tp[0][i] += h;
    tm[0][i] -= h;
    const double num = ((block->forward(x, tp) * w).sum() - (block->forward(x, tm) * w).sum()).item<double>() / (2 * h);
    const double ana = analytic[0][i].item<double>();
    EXPECT_LE(std::abs(num - ana), 1e-4 * std::max(std::abs(ana), 1e-6)) << "component " << i;
  }
}

TEST(ResBlock, KeepsSpatialSizeAtEveryStage) {
  ResBlock block(8, 16, 32);
  auto gen = make_generator(5);
  for (int s : {32, 16, 8, 4, 2}) {
    const auto out = block->forward(torch::randn({1, 8, s, s}, gen), torch::randn({1, 32}, gen));
    EXPECT_EQ(out.sizes(), (std::vector<int64_t>{1, 16, s, s}));
  }
}

TEST(CrossAttention, AcceptsAnyContextLength) {
  CrossAttention attn(16, 12, 4);
  auto gen = make_generator(6);
  const auto x = torch::randn({2, 16, 4, 4}, gen);
  for (int64_t len : {1, 512}) {
    const auto out = attn->forward(x, torch::randn({2, len, 12}, gen), torch::ones({2, len}, torch::kBool));
    EXPECT_EQ(out.sizes(), x.sizes());
  }
}

TEST(CrossAttention, MaskedPaddingIsIgnoredExactly) {
  CrossAttention attn(16, 12, 4);
  randomize(*attn, 7);
  auto gen = make_generator(8);
  const auto x = torch::randn({2, 16, 4, 4}, gen);
  auto ctx = torch::randn({2, 6, 12}, gen);
  auto mask = torch::ones({2, 6}, torch::kBool);
  mask.index_put_({0, torch::indexing::Slice(3)}, false);
  mask.index_put_({1, 5}, false);
  torch::NoGradGuard g;
  const auto ref = attn->forward(x, ctx, mask);
  auto noisy = ctx.clone();
  noisy.masked_scatter_(mask.logical_not().unsqueeze(-1).expand_as(noisy), torch::randn({4 * 12}, gen) * 100);
  EXPECT_TRUE(torch::equal(attn->forward(x, noisy, mask), ref));
  // Longer padding changes nothing but summation order.
  const auto longer = torch::cat({ctx, torch::randn({2, 10, 12}, gen)}, 1);
  const auto longer_mask = torch::cat({mask, torch::zeros({2, 10}, torch::kBool)}, 1);
  EXPECT_TRUE(torch::allclose(attn->forward(x, longer, longer_mask), ref, 1e-6, 1e-6));
}

TEST(CrossAttention, DuplicatedContextIsUnchanged) {
  CrossAttention attn(16, 12, 4);
  randomize(*attn, 9);
  auto gen = make_generator(10);
  const auto x = torch::randn({1, 16, 4, 4}, gen);
  const auto ctx = torch::randn({1, 5, 12}, gen);
  const auto mask = torch::ones({1, 5}, torch::kBool);
  torch::NoGradGuard g;
  const auto once = attn->forward(x, ctx, mask);
  const auto twice = attn->forward(x, ctx.repeat_interleave(2, 1), mask.repeat_interleave(2, 1));
  EXPECT_TRUE(torch::allclose(once, twice, 1e-5, 1e-5));
}

TEST(CrossAttention, FullyMaskedContextIsAnError) {
  CrossAttention attn(16, 12, 4);
  auto gen = make_generator(11);
  EXPECT_THROW(attn->forward(torch::randn({1, 16, 2, 2}, gen), torch::randn({1, 3, 12}, gen),
                             torch::zeros({1, 3}, torch::kBool)),
               std::invalid_argument);
}

TEST(SelfAttention, PermutationEquivariant) {
  SelfAttention attn(16, 4);
  randomize(*attn, 12);
  auto gen = make_generator(13);
  const auto x = torch::randn({2, 16, 3, 3}, gen);
  const auto perm = torch::randperm(9, gen);
  auto permute = [&](const torch::Tensor& t) { return t.flatten(2).index_select(2, perm).reshape(t.sizes()); };
  torch::NoGradGuard g;
  EXPECT_TRUE(torch::allclose(attn->forward(permute(x)), permute(attn->forward(x)), 1e-5, 1e-5));
}

TEST(SelfAttention, SingleTokenIsValuePath) {
  SelfAttention attn(8, 4);
  randomize(*attn, 14);
  auto gen = make_generator(15);
  const auto x = torch::randn({2, 8, 1, 1}, gen);
  torch::NoGradGuard g;
  const auto tokens = attn->norm(x).flatten(2).transpose(1, 2);
  const auto v = attn->to_qkv(tokens).chunk(3, -1)[2];
  const auto expected = x + attn->proj_out(v).transpose(1, 2).reshape(x.sizes());
  EXPECT_TRUE(torch::allclose(attn->forward(x), expected, 1e-6, 1e-6));
}

TEST(UNet, ShapesForEveryImpressionLength) {
  UNet model(tiny());
  initialize_weights(*model, 1);
  randomize(*model, 16);
  auto gen = make_generator(17);
  for (int64_t len : {1, 37, 512}) {
    const auto cond = random_cond(2, len, 16, gen);
    const auto out = model->forward(torch::randn({2, 1, 32, 32}, gen), torch::tensor({1, 1000}), cond);
    EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, 1, 32, 32})) << "length " << len;
  }
}

TEST(UNet, StageShapesAndAttentionOrder) {
  UNet model(tiny());
  auto gen = make_generator(18);
  ForwardTrace trace;
  model->forward(torch::randn({1, 1, 32, 32}, gen), torch::tensor({5}), random_cond(1, 4, 16, gen), &trace);
  std::map<std::string, std::vector<int64_t>> shapes(trace.events.begin(), trace.events.end());
  const int sizes[] = {32, 16, 8, 4};
  for (int s = 0; s < 4; ++s) {
    const auto p = "encoder." + std::to_string(s);
    EXPECT_EQ(shapes.at(p + ".cross_attn_let")[2], sizes[s]);
    EXPECT_EQ(shapes.at(p + ".down")[2], sizes[s] / 2);
  }
  EXPECT_EQ(shapes.at("bottleneck.self_attn")[2], 2);
  for (int d = 0; d < 4; ++d) EXPECT_EQ(shapes.at("decoder." + std::to_string(d) + ".cross_attn_let")[2], sizes[3 - d]);
  EXPECT_EQ(shapes.at("out_conv"), (std::vector<int64_t>{1, 1, 32, 32}));

  // IMP attention runs immediately before LET attention at all nine insertion points.
  int pairs = 0;
  for (std::size_t i = 0; i + 1 < trace.events.size(); ++i) {
    const auto& name = trace.events[i].first;
    if (name.size() > 15 && name.ends_with(".cross_attn_imp")) {
      const auto prefix = name.substr(0, name.size() - 15);
      EXPECT_EQ(trace.events[i + 1].first, prefix + ".cross_attn_let");
      ++pairs;
    }
    EXPECT_FALSE(name.ends_with(".cross_attn_let") && i > 0 && !trace.events[i - 1].first.ends_with(".cross_attn_imp"));
  }
  EXPECT_EQ(pairs, 9);
}

TEST(UNet, BatchIndependenceAndDeterminism) {
  UNet model(tiny());
  initialize_weights(*model, 1);
  randomize(*model, 19);
  model->eval();
  auto gen = make_generator(20);
  const auto x = torch::randn({3, 1, 32, 32}, gen);
  const auto t = torch::tensor({3, 400, 999});
  const auto cond = random_cond(3, 7, 16, gen);
  torch::NoGradGuard g;
  const auto batched = model->forward(x, t, cond);
  for (int64_t i = 0; i < 3; ++i) {
    const auto idx = torch::tensor({i});
    const auto single = model->forward(x.index_select(0, idx), t.index_select(0, idx), cond.select(idx));
    EXPECT_TRUE(torch::allclose(single[0], batched[i], 1e-5, 1e-5));
  }
  EXPECT_TRUE(torch::equal(model->forward(x, t, cond), batched));
}

TEST(UNet, MismatchedInputsNameTheStage) {
  UNet model(tiny());
  auto gen = make_generator(21);
  try {
    model->forward(torch::randn({1, 1, 28, 28}, gen), torch::tensor({1}), random_cond(1, 2, 16, gen));
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("input"), std::string::npos);
  }
  try {
    model->forward(torch::randn({1, 1, 32, 32}, gen), torch::tensor({1}), random_cond(1, 2, 12, gen));
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("impression"), std::string::npos) << e.what();
  }
}

TEST(UNet, ParameterCountFormula) {
  for (int base : {8, 16, 64}) {
    for (int res : {1, 2}) {
      auto cfg = UNetConfig::with_base(base, 24);
      cfg.res_blocks = res;
      UNet model(cfg);
      EXPECT_EQ(parameter_count(cfg), parameter_count(*model)) << "base " << base << " res " << res;
    }
  }
  EXPECT_LT(parameter_count(UNetConfig::with_base(16, 768)), parameter_count(UNetConfig::with_base(32, 768)));
}

TEST(UNet, InitialisationIsSeededAndZeroesOutput) {
  UNet a(tiny()), b(tiny());
  initialize_weights(*a, 5);
  initialize_weights(*b, 5);
  auto pa = a->named_parameters(), pb = b->named_parameters();
  for (const auto& p : pa) EXPECT_TRUE(torch::equal(p.value(), pb[p.key()])) << p.key();
  EXPECT_EQ(a->out_conv->weight.abs().sum().item<double>(), 0.0);
  auto gen = make_generator(22);
  const auto out = a->forward(torch::randn({1, 1, 32, 32}, gen), torch::tensor({10}), random_cond(1, 3, 16, gen));
  EXPECT_EQ(out.abs().max().item<double>(), 0.0);
}
