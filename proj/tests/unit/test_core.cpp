#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include <torch/torch.h>

#include "glyphdm/hash.hpp"
#include "glyphdm/image.hpp"
#include "glyphdm/rng.hpp"
#include "glyphdm/safetensors.hpp"
#include "support.hpp"

using namespace glyphdm;
using glyphdm::testing::TempDir;

TEST(Rng, DerivedSeedsSeparateStreamsAndIndices) {
  std::set<std::uint64_t> seen;
  for (const char* s : {"init", "t_draws", "eps_draws", "batch_order"})
    for (std::uint64_t i = 0; i < 10; ++i) seen.insert(derive_seed(7, s, i));
  EXPECT_EQ(seen.size(), 40u);
  EXPECT_EQ(derive_seed(7, "init", 3), derive_seed(7, "init", 3));
  EXPECT_NE(derive_seed(7, "init"), derive_seed(8, "init"));
}

TEST(Rng, SplitmixReferenceValues) {
  // Published splitmix64 outputs for a zero-initialised state.
  StableRng rng(0);
  EXPECT_EQ(rng.next(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng.next(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(rng.next(), 0x06C45D188009454FULL);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  StableRng rng(42);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[rng.below(7)];
  for (int h : hits) EXPECT_GT(h, 800);
  EXPECT_THROW(rng.below(0), std::invalid_argument);
}

TEST(Rng, GeneratorsAreReproducible) {
  auto a = make_generator(5), b = make_generator(5);
  EXPECT_TRUE(torch::equal(torch::randn({16}, a), torch::randn({16}, b)));
}

TEST(Hash, KnownDigests) {
  EXPECT_EQ(sha256_hex(std::string_view("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex(std::string_view("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  TempDir dir("hash");
  std::ofstream(dir / "f.txt", std::ios::binary) << "abc";
  EXPECT_EQ(sha256_file(dir / "f.txt"), sha256_hex(std::string_view("abc")));
}

TEST(Safetensors, RoundTripPreservesValuesShapesAndMetadata) {
  TempDir dir("st");
  auto a = torch::randn({3, 4});
  auto b = torch::arange(5, torch::kFloat32);
  write_safetensors(dir / "x.safetensors", {{"b", b}, {"a.w", a}}, {{"k", "v"}});
  auto f = read_safetensors(dir / "x.safetensors");
  ASSERT_EQ(f.tensors.size(), 2u);
  EXPECT_TRUE(torch::equal(f.tensors.at("a.w"), a));
  EXPECT_TRUE(torch::equal(f.tensors.at("b"), b));
  EXPECT_EQ(f.metadata.at("k"), "v");
  // Header length is the first 8 bytes and must keep the blob 8-byte aligned.
  std::ifstream in(dir / "x.safetensors", std::ios::binary);
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  EXPECT_EQ(n % 8, 0u);
}

TEST(Safetensors, ReadsFilesWrittenByOtherTools) {
  auto f = read_safetensors(glyphdm::testing::fixture_dir() / "tiny_bert" / "model.safetensors");
  EXPECT_EQ(f.tensors.at("embeddings.word_embeddings.weight").size(1), 32);
}

TEST(Safetensors, TruncatedFileIsRejected) {
  TempDir dir("st-bad");
  write_safetensors(dir / "x.safetensors", {{"a", torch::ones({64})}});
  std::filesystem::resize_file(dir / "x.safetensors", std::filesystem::file_size(dir / "x.safetensors") - 8);
  EXPECT_ANY_THROW(read_safetensors(dir / "x.safetensors"));
}

TEST(Image, PngRoundTripAndPnmVariants) {
  TempDir dir("img");
  GrayImage img(5, 3);
  for (int i = 0; i < 15; ++i) img.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i * 17);
  write_png(dir / "a.png", img);
  EXPECT_EQ(read_image(dir / "a.png").pixels, img.pixels);

  std::ofstream(dir / "b.pgm") << "P2\n# comment\n2 2\n255\n0 64\n128 255\n";
  EXPECT_EQ(read_image(dir / "b.pgm").pixels, (std::vector<std::uint8_t>{0, 64, 128, 255}));
  {
    std::ofstream p6(dir / "c.ppm", std::ios::binary);
    p6 << "P6\n1 1\n255\n";
    p6.put(static_cast<char>(255)).put(0).put(0);
  }
  // Rec. 601 luma of pure red: 0.299 * 255.
  EXPECT_EQ(read_image(dir / "c.ppm").pixels[0], 76);
  std::ofstream(dir / "bad.png") << "not an image";
  EXPECT_THROW(read_image(dir / "bad.png"), ImageError);
}

TEST(Image, InkBounds) {
  GrayImage img(10, 8);
  img.at(2, 3) = 0;
  img.at(6, 5) = 127;
  img.at(8, 7) = 128;  // at the threshold: paper
  const auto b = ink_bounds(img);
  EXPECT_EQ(b.x0, 2);
  EXPECT_EQ(b.y0, 3);
  EXPECT_EQ(b.width(), 5);
  EXPECT_EQ(b.height(), 3);
  EXPECT_EQ(ink_bounds(GrayImage(4, 4)).width(), 0);
}

namespace {

torch::Tensor torch_resize(const std::vector<float>& src, int sw, int sh, int dw, int dh, bool antialias) {
  auto t = torch::from_blob(const_cast<float*>(src.data()), {1, 1, sh, sw}, torch::kFloat32).clone();
  namespace F = torch::nn::functional;
  return F::interpolate(t, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{dh, dw})
                               .mode(torch::kBilinear)
                               .align_corners(false)
                               .antialias(antialias))
      .reshape({-1});
}

}  // namespace

TEST(Image, ResizeMatchesTorchInterpolate) {
  auto gen = make_generator(3);
  for (auto [sw, sh, dw, dh] : std::vector<std::array<int, 4>>{{96, 96, 32, 32}, {50, 50, 32, 32}, {17, 17, 32, 32},
                                                               {64, 40, 32, 20}, {32, 32, 32, 32}}) {
    const auto r = torch::rand({sh * sw}, gen) * 2 - 1;
    std::vector<float> src(r.data_ptr<float>(), r.data_ptr<float>() + r.numel());
    for (bool aa : {true, false}) {
      const auto mine = resize_bilinear(src, sw, sh, dw, dh, aa);
      const auto ref = torch_resize(src, sw, sh, dw, dh, aa);
      ASSERT_EQ(static_cast<int64_t>(mine.size()), ref.numel());
      const auto diff = (torch::from_blob(const_cast<float*>(mine.data()), {ref.numel()}) - ref).abs().max().item<float>();
      EXPECT_LT(diff, 1e-5) << sw << "x" << sh << " -> " << dw << "x" << dh << " antialias=" << aa;
    }
  }
}
