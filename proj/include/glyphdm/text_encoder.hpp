#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/types.h>

#include "glyphdm/denoiser.hpp"

namespace glyphdm {

inline constexpr int kLetterSequenceLength = 3;      // [CLS] letter [SEP]
inline constexpr int kImpressionSequenceBudget = 512;

enum class SequenceKind { letter, impression };

struct EmbeddingSequence {
  torch::Tensor vectors;  // (L, D) float32
  torch::Tensor mask;     // (L) bool, true on real tokens
  SequenceKind kind = SequenceKind::impression;

  int64_t length() const { return vectors.size(0); }
  int64_t dim() const { return vectors.size(1); }
};

struct ConditioningPair {
  EmbeddingSequence letter;
  EmbeddingSequence impressions;
  std::string encoder_hash;
};

/// Pads each group to its longest member (zeros, mask false) and stacks into a batch.
Conditioning collate(const std::vector<const EmbeddingSequence*>& impressions,
                     const std::vector<const EmbeddingSequence*>& letters);

// --- tokenizer ----------------------------------------------------------------

/// Uncased BERT tokenization: text cleanup, lowercasing, accent folding for
/// Latin letters, punctuation and CJK splitting, then greedy longest-match WordPiece.
class WordPieceTokenizer {
public:
  explicit WordPieceTokenizer(std::vector<std::string> vocab);
  static WordPieceTokenizer from_file(const std::filesystem::path& vocab_txt);

  std::vector<std::string> basic_tokenize(std::string_view text) const;
  std::vector<std::string> wordpiece(const std::string& word) const;
  std::vector<std::string> tokenize(std::string_view text) const;

  /// [CLS] pieces [SEP], right-truncated so the total length is at most `budget`.
  std::vector<int64_t> encode(std::string_view text, int budget) const;

  int64_t id(const std::string& token) const;
  const std::string& token(int64_t id) const { return vocab_.at(static_cast<std::size_t>(id)); }
  int64_t vocab_size() const { return static_cast<int64_t>(vocab_.size()); }
  int64_t cls_id() const { return cls_; }
  int64_t sep_id() const { return sep_; }
  int64_t unk_id() const { return unk_; }
  int64_t pad_id() const { return pad_; }

private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int64_t> ids_;
  int64_t cls_ = 0, sep_ = 0, unk_ = 0, pad_ = 0;
};

// --- encoder ------------------------------------------------------------------

struct BertConfig {
  int64_t vocab_size = 30522;
  int64_t hidden_size = 768;
  int64_t num_hidden_layers = 12;
  int64_t num_attention_heads = 12;
  int64_t intermediate_size = 3072;
  int64_t max_position_embeddings = 512;
  int64_t type_vocab_size = 2;
  double layer_norm_eps = 1e-12;

  static BertConfig from_json(const nlohmann::json& hf_config);
  nlohmann::json to_json() const;
};

/// Bidirectional transformer encoder returning final-layer hidden states.
/// Weights are frozen constants; forward never records gradients.
class BertModel {
public:
  BertModel(BertConfig config, std::map<std::string, torch::Tensor> weights);

  /// ids, mask: (B, L) int64 / bool -> (B, L, hidden) float32.
  torch::Tensor forward(const torch::Tensor& ids, const torch::Tensor& mask) const;
  const BertConfig& config() const { return config_; }

  /// Accepts Hugging Face names with or without the "bert." prefix and legacy LayerNorm gamma/beta.
  static std::map<std::string, torch::Tensor> normalize_names(const std::map<std::string, torch::Tensor>& raw);
  static std::vector<std::string> required_weights(const BertConfig& config);

private:
  const torch::Tensor& w(const std::string& name) const;
  BertConfig config_;
  std::map<std::string, torch::Tensor> weights_;
};

class TextEncoder {
public:
  virtual ~TextEncoder() = default;
  virtual EmbeddingSequence embed_letter(char letter) const = 0;
  virtual EmbeddingSequence embed_impressions(const std::string& sentence) const = 0;
  virtual int64_t dim() const = 0;
  virtual std::string checkpoint_hash() const = 0;

  ConditioningPair condition(char letter, const std::string& sentence) const;
};

class BertTextEncoder : public TextEncoder {
public:
  BertTextEncoder(WordPieceTokenizer tokenizer, BertModel model, std::string hash);

  /// Loads a Hugging Face checkpoint directory: config.json, vocab.txt, model.safetensors.
  static std::shared_ptr<BertTextEncoder> load(const std::filesystem::path& dir);

  EmbeddingSequence embed_letter(char letter) const override;
  EmbeddingSequence embed_impressions(const std::string& sentence) const override;
  int64_t dim() const override { return model_.config().hidden_size; }
  std::string checkpoint_hash() const override { return hash_; }

  const WordPieceTokenizer& tokenizer() const { return tokenizer_; }
  EmbeddingSequence encode(std::string_view text, int budget, SequenceKind kind) const;

private:
  WordPieceTokenizer tokenizer_;
  BertModel model_;
  std::string hash_;
};

/// Uncased vocabulary made of specials, ASCII punctuation, digits, letters and
/// their "##" continuations, plus `extra_words`.
std::vector<std::string> desk_vocabulary(const std::vector<std::string>& extra_words = {});

/// Writes a seeded random-init BERT checkpoint directory in Hugging Face layout.
void write_desk_encoder(const std::filesystem::path& dir, std::uint64_t seed,
                        const std::vector<std::string>& extra_words = {}, int64_t hidden_size = 64,
                        int64_t layers = 2, int64_t heads = 4);

/// Hash identifying a checkpoint directory's weights, vocabulary and config.
std::string encoder_checkpoint_hash(const std::filesystem::path& dir);

// --- cache --------------------------------------------------------------------

/// Content-addressed store: `<key>.f32` raw little-endian float32 (L x D) per
/// entry plus `index.json`. Keys are sha256(encoder hash, kind, text).
class EmbeddingCache {
public:
  explicit EmbeddingCache(std::filesystem::path dir);

  std::optional<EmbeddingSequence> get(const std::string& encoder_hash, SequenceKind kind,
                                       const std::string& text) const;
  void put(const std::string& encoder_hash, SequenceKind kind, const std::string& text,
           const EmbeddingSequence& seq);
  std::size_t size() const;

  static std::string key(const std::string& encoder_hash, SequenceKind kind, const std::string& text);

private:
  struct Entry {
    int64_t length = 0;
    int64_t dim = 0;
  };
  void flush_index() const;

  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, Entry> index_;
  std::map<std::string, nlohmann::json> meta_;
};

class CachedTextEncoder : public TextEncoder {
public:
  CachedTextEncoder(std::shared_ptr<const TextEncoder> inner, std::shared_ptr<EmbeddingCache> cache);

  EmbeddingSequence embed_letter(char letter) const override;
  EmbeddingSequence embed_impressions(const std::string& sentence) const override;
  int64_t dim() const override { return inner_->dim(); }
  std::string checkpoint_hash() const override { return inner_->checkpoint_hash(); }

private:
  std::shared_ptr<const TextEncoder> inner_;
  std::shared_ptr<EmbeddingCache> cache_;
};

}  // namespace glyphdm
