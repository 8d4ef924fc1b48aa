#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "glyphdm/safetensors.hpp"
#include "glyphdm/text_encoder.hpp"
#include "support.hpp"

using namespace glyphdm;
using glyphdm::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path bert_dir() { return glyphdm::testing::fixture_dir() / "tiny_bert"; }

const json& expected() {
  static const json j = [] {
    std::ifstream in(bert_dir() / "expected.json");
    return json::parse(in);
  }();
  return j;
}

torch::Tensor to_tensor(const std::vector<double>& v, std::vector<int64_t> shape) {
  return torch::tensor(v, torch::kFloat64).reshape(shape).to(torch::kFloat32);
}

}  // namespace

TEST(Tokenizer, MatchesReferenceTokenizer) {
  const auto tok = WordPieceTokenizer::from_file(bert_dir() / "vocab.txt");
  for (const auto& c : expected()["cases"]) {
    const auto text = c["text"].get<std::string>();
    EXPECT_EQ(tok.tokenize(text), c["tokens"].get<std::vector<std::string>>()) << text;
    EXPECT_EQ(tok.encode(text, 512), c["ids"].get<std::vector<int64_t>>()) << text;
  }
}

TEST(Tokenizer, TruncationKeepsSeparator) {
  const auto tok = WordPieceTokenizer::from_file(bert_dir() / "vocab.txt");
  std::string text;
  for (int i = 0; i < 40; ++i) text += "heavy ";
  EXPECT_EQ(tok.encode(text, 16), expected()["truncated_16"].get<std::vector<int64_t>>());
  EXPECT_EQ(tok.encode("heavy", 3).size(), 3u);
}

TEST(Bert, HiddenStatesMatchReference) {
  const auto enc = BertTextEncoder::load(bert_dir());
  EXPECT_EQ(enc->dim(), 32);
  for (const auto& c : expected()["cases"]) {
    const auto text = c["text"].get<std::string>();
    const auto seq = enc->encode(text, 512, SequenceKind::impression);
    const auto ref = to_tensor(c["hidden"].get<std::vector<double>>(), {-1, 32});
    ASSERT_EQ(seq.vectors.sizes(), ref.sizes()) << text;
    EXPECT_LT((seq.vectors - ref).abs().max().item<float>(), 1e-4) << text;
    EXPECT_TRUE(seq.mask.all().item<bool>());
  }
}

TEST(Bert, PaddedBatchMatchesReference) {
  const auto enc = BertTextEncoder::load(bert_dir());
  const auto raw = read_safetensors(bert_dir() / "model.safetensors").tensors;
  const auto cfg_file = [&] {
    std::ifstream in(bert_dir() / "config.json");
    return json::parse(in);
  }();
  BertModel model(BertConfig::from_json(cfg_file), BertModel::normalize_names(raw));
  const auto p = expected()["padded"];
  auto rows = p["ids"].get<std::vector<std::vector<int64_t>>>();
  auto masks = p["mask"].get<std::vector<std::vector<int64_t>>>();
  const int64_t len = static_cast<int64_t>(rows[0].size());
  auto id_t = torch::empty({2, len}, torch::kLong);
  auto mask_t = torch::empty({2, len}, torch::kBool);
  for (int r = 0; r < 2; ++r)
    for (int64_t i = 0; i < len; ++i) {
      id_t[r][i] = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)];
      mask_t[r][i] = masks[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)] != 0;
    }
  const auto out = model.forward(id_t, mask_t);
  const auto ref = to_tensor(p["hidden"].get<std::vector<double>>(), {2, len, 32});
  // Only real tokens are compared; padded positions carry no meaning.
  const auto m = mask_t.unsqueeze(-1).expand_as(out);
  EXPECT_LT((out - ref).abs().masked_select(m).max().item<float>(), 1e-4);
}

TEST(Bert, LegacyAndPrefixedNamesLoad) {
  auto raw = read_safetensors(bert_dir() / "model.safetensors").tensors;
  std::map<std::string, torch::Tensor> legacy;
  for (const auto& [k, v] : raw) {
    auto name = "bert." + k;
    if (name.ends_with("LayerNorm.weight")) name.replace(name.size() - 6, 6, "gamma");
    if (name.ends_with("LayerNorm.bias")) name.replace(name.size() - 4, 4, "beta");
    legacy[name] = v;
  }
  const auto a = BertModel::normalize_names(raw), b = BertModel::normalize_names(legacy);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [k, v] : a) EXPECT_TRUE(torch::equal(v, b.at(k))) << k;
}

TEST(Bert, MissingWeightIsReported) {
  TempDir dir("bert-missing");
  for (const char* f : {"config.json", "vocab.txt"}) fs::copy_file(bert_dir() / f, dir / f);
  auto raw = read_safetensors(bert_dir() / "model.safetensors").tensors;
  raw.erase("encoder.layer.1.output.dense.weight");
  std::vector<std::pair<std::string, torch::Tensor>> list(raw.begin(), raw.end());
  write_safetensors(dir / "model.safetensors", list);
  try {
    BertTextEncoder::load(dir.path());
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.layer.1.output.dense.weight"), std::string::npos) << e.what();
  }
}

TEST(TextEncoder, LetterAndImpressionContracts) {
  const auto enc = BertTextEncoder::load(bert_dir());
  const auto a = enc->embed_letter('A'), b = enc->embed_letter('B');
  EXPECT_EQ(a.length(), 3);
  EXPECT_EQ(a.kind, SequenceKind::letter);
  EXPECT_FALSE(torch::equal(a.vectors, b.vectors));
  EXPECT_THROW(enc->embed_letter('a'), std::invalid_argument);
  EXPECT_THROW(enc->embed_impressions(""), std::invalid_argument);

  std::string longest;
  for (int i = 0; i < 600; ++i) longest += "ink, ";
  // The fixture's position table holds 64 entries, so that caps the 512 budget.
  const auto seq = enc->embed_impressions(longest);
  EXPECT_EQ(seq.length(), 64);
  EXPECT_TRUE(torch::equal(enc->embed_impressions("retro, ink, wed").vectors,
                           enc->embed_impressions("retro, ink, wed").vectors));
}

TEST(TextEncoder, CollatePadsWithMaskedZeros) {
  const auto enc = BertTextEncoder::load(bert_dir());
  const auto s1 = enc->embed_impressions("retro"), s2 = enc->embed_impressions("retro, ink, wed");
  const auto l = enc->embed_letter('Q');
  const auto c = collate({&s1, &s2}, {&l, &l});
  EXPECT_EQ(c.impressions.sizes(), (std::vector<int64_t>{2, s2.length(), 32}));
  EXPECT_EQ(c.impression_mask[0].sum().item<int64_t>(), s1.length());
  EXPECT_EQ(c.impressions[0].slice(0, s1.length()).abs().sum().item<float>(), 0.0f);
  EXPECT_TRUE(torch::equal(c.letters[1], l.vectors));
}

TEST(DeskEncoder, SeededAndVocabularyAware) {
  TempDir dir("desk");
  write_desk_encoder(dir / "a", 3, {"heavy", "light"});
  write_desk_encoder(dir / "b", 3, {"heavy", "light"});
  write_desk_encoder(dir / "c", 4, {"heavy", "light"});
  EXPECT_EQ(encoder_checkpoint_hash(dir / "a"), encoder_checkpoint_hash(dir / "b"));
  EXPECT_NE(encoder_checkpoint_hash(dir / "a"), encoder_checkpoint_hash(dir / "c"));
  const auto enc = BertTextEncoder::load(dir / "a");
  EXPECT_EQ(enc->tokenizer().tokenize("Heavy, light"), (std::vector<std::string>{"heavy", ",", "light"}));
  EXPECT_EQ(enc->tokenizer().tokenize("hex"), (std::vector<std::string>{"h", "##e", "##x"}));
  EXPECT_EQ(enc->dim(), 64);
}

TEST(EmbeddingCache, PersistsAndKeysOnEncoderHash) {
  TempDir dir("cache");
  const auto enc = BertTextEncoder::load(bert_dir());
  const auto seq = enc->embed_impressions("retro, ink");
  {
    EmbeddingCache cache(dir.path());
    EXPECT_FALSE(cache.get("h1", SequenceKind::impression, "retro, ink"));
    cache.put("h1", SequenceKind::impression, "retro, ink", seq);
    EXPECT_EQ(cache.size(), 1u);
  }
  EmbeddingCache reopened(dir.path());
  const auto hit = reopened.get("h1", SequenceKind::impression, "retro, ink");
  ASSERT_TRUE(hit);
  EXPECT_TRUE(torch::equal(hit->vectors, seq.vectors));
  EXPECT_TRUE(torch::equal(hit->mask, seq.mask));
  EXPECT_FALSE(reopened.get("h2", SequenceKind::impression, "retro, ink"));
  EXPECT_FALSE(reopened.get("h1", SequenceKind::letter, "retro, ink"));
  EXPECT_NE(EmbeddingCache::key("h1", SequenceKind::letter, "A"), EmbeddingCache::key("h1", SequenceKind::impression, "A"));
}

TEST(EmbeddingCache, CachedEncoderIsTransparentUnderConcurrency) {
  TempDir dir("cache-conc");
  const auto inner = BertTextEncoder::load(bert_dir());
  auto cache = std::make_shared<EmbeddingCache>(dir.path());
  CachedTextEncoder cached(inner, cache);
  const std::vector<std::string> sentences = {"retro", "ink, wed", "heavy, bold", "cute, game"};
  std::vector<std::thread> threads;
  std::atomic<int> mismatches{0};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int r = 0; r < 5; ++r) {
        const auto& s = sentences[static_cast<std::size_t>((t + r) % 4)];
        if (!torch::equal(cached.embed_impressions(s).vectors, inner->embed_impressions(s).vectors)) ++mismatches;
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(mismatches.load(), 0);
  EXPECT_EQ(cache->size(), 4u);
  EXPECT_EQ(cached.checkpoint_hash(), inner->checkpoint_hash());
}

// Needs real pretrained weights: set GLYPHDM_BERT_DIR to a bert-base-uncased directory.
TEST(PretrainedEncoder, SynonymProbe) {
  const char* dir = std::getenv("GLYPHDM_BERT_DIR");
  if (dir == nullptr || *dir == '\0') GTEST_SKIP() << "GLYPHDM_BERT_DIR not set";
  const auto enc = BertTextEncoder::load(dir);
  auto pooled = [&](const std::string& w) { return enc->embed_impressions(w).vectors.slice(0, 1, -1).mean(0); };
  const auto c = pooled("cumbersome"), h = pooled("heavy"), l = pooled("light");
  const auto cos = [](const torch::Tensor& a, const torch::Tensor& b) {
    return (a.dot(b) / (a.norm() * b.norm())).item<double>();
  };
  EXPECT_GT(cos(c, h), cos(c, l));
  EXPECT_FALSE(torch::equal(enc->embed_letter('A').vectors, enc->embed_letter('B').vectors));
}
