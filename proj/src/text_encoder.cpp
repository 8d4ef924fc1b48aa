#include "glyphdm/text_encoder.hpp"

#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "glyphdm/hash.hpp"
#include "glyphdm/rng.hpp"
#include "glyphdm/safetensors.hpp"

namespace glyphdm {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using nlohmann::json;

Conditioning collate(const std::vector<const EmbeddingSequence*>& impressions,
                     const std::vector<const EmbeddingSequence*>& letters) {
  if (impressions.size() != letters.size() || impressions.empty()) {
    throw std::invalid_argument("collate: need equally many (non-zero) impression and letter sequences");
  }
  auto stack = [](const std::vector<const EmbeddingSequence*>& seqs, torch::Tensor& vectors, torch::Tensor& mask) {
    int64_t max_len = 0;
    const int64_t dim = seqs.front()->dim();
    for (const auto* s : seqs) {
      if (s->dim() != dim) throw std::invalid_argument("collate: embedding dimensions differ");
      max_len = std::max(max_len, s->length());
    }
    const auto n = static_cast<int64_t>(seqs.size());
    vectors = torch::zeros({n, max_len, dim}, torch::kFloat32);
    mask = torch::zeros({n, max_len}, torch::kBool);
    for (int64_t i = 0; i < n; ++i) {
      const auto len = seqs[static_cast<std::size_t>(i)]->length();
      vectors[i].narrow(0, 0, len).copy_(seqs[static_cast<std::size_t>(i)]->vectors);
      mask[i].narrow(0, 0, len).copy_(seqs[static_cast<std::size_t>(i)]->mask);
    }
  };
  Conditioning c;
  stack(impressions, c.impressions, c.impression_mask);
  stack(letters, c.letters, c.letter_mask);
  return c;
}

// --- tokenizer ----------------------------------------------------------------

namespace {

std::vector<char32_t> utf8_decode(std::string_view s) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = 1;
    char32_t cp = c;
    if (c >= 0xF0) { len = 4; cp = c & 0x07; }
    else if (c >= 0xE0) { len = 3; cp = c & 0x0F; }
    else if (c >= 0xC0) { len = 2; cp = c & 0x1F; }
    else if (c >= 0x80) { out.push_back(0xFFFD); ++i; continue; }
    if (i + len > s.size()) { out.push_back(0xFFFD); break; }
    for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    out.push_back(cp);
    i += len;
  }
  return out;
}

void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_whitespace(char32_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == 0xA0 || c == 0x3000; }

bool is_control(char32_t c) {
  if (c == '\t' || c == '\n' || c == '\r') return false;
  return c < 0x20 || (c >= 0x7F && c < 0xA0);
}

bool is_punctuation(char32_t c) {
  if ((c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126)) return true;
  return (c >= 0x2000 && c <= 0x206F) || (c >= 0x3000 && c <= 0x303F) || c == 0xA1 || c == 0xA7 || c == 0xAB ||
         c == 0xB6 || c == 0xB7 || c == 0xBB || c == 0xBF;
}

bool is_cjk(char32_t c) {
  return (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0x3400 && c <= 0x4DBF) || (c >= 0x20000 && c <= 0x2A6DF) ||
         (c >= 0x2A700 && c <= 0x2B73F) || (c >= 0x2B740 && c <= 0x2B81F) || (c >= 0x2B820 && c <= 0x2CEAF) ||
         (c >= 0xF900 && c <= 0xFAFF) || (c >= 0x2F800 && c <= 0x2FA1F);
}

bool is_combining_mark(char32_t c) { return c >= 0x300 && c <= 0x36F; }

/// Lowercase + accent fold (lowercase, NFD, drop marks) for ASCII, Latin-1 and Latin Extended-A.
char32_t fold(char32_t c) {
  if (c >= 'A' && c <= 'Z') return c + 32;
  if (c < 0xC0 || c > 0x17F) return c;
  static const std::map<char32_t, char32_t> table = {
      {0xC0, 0x61}, {0xC1, 0x61}, {0xC2, 0x61}, {0xC3, 0x61}, {0xC4, 0x61}, {0xC5, 0x61},
      {0xC6, 0xE6}, {0xC7, 0x63}, {0xC8, 0x65}, {0xC9, 0x65}, {0xCA, 0x65}, {0xCB, 0x65},
      {0xCC, 0x69}, {0xCD, 0x69}, {0xCE, 0x69}, {0xCF, 0x69}, {0xD0, 0xF0}, {0xD1, 0x6E},
      {0xD2, 0x6F}, {0xD3, 0x6F}, {0xD4, 0x6F}, {0xD5, 0x6F}, {0xD6, 0x6F}, {0xD8, 0xF8},
      {0xD9, 0x75}, {0xDA, 0x75}, {0xDB, 0x75}, {0xDC, 0x75}, {0xDD, 0x79}, {0xDE, 0xFE},
      {0xE0, 0x61}, {0xE1, 0x61}, {0xE2, 0x61}, {0xE3, 0x61}, {0xE4, 0x61}, {0xE5, 0x61},
      {0xE7, 0x63}, {0xE8, 0x65}, {0xE9, 0x65}, {0xEA, 0x65}, {0xEB, 0x65}, {0xEC, 0x69},
      {0xED, 0x69}, {0xEE, 0x69}, {0xEF, 0x69}, {0xF1, 0x6E}, {0xF2, 0x6F}, {0xF3, 0x6F},
      {0xF4, 0x6F}, {0xF5, 0x6F}, {0xF6, 0x6F}, {0xF9, 0x75}, {0xFA, 0x75}, {0xFB, 0x75},
      {0xFC, 0x75}, {0xFD, 0x79}, {0xFF, 0x79}, {0x100, 0x61}, {0x101, 0x61}, {0x102, 0x61},
      {0x103, 0x61}, {0x104, 0x61}, {0x105, 0x61}, {0x106, 0x63}, {0x107, 0x63}, {0x108, 0x63},
      {0x109, 0x63}, {0x10A, 0x63}, {0x10B, 0x63}, {0x10C, 0x63}, {0x10D, 0x63}, {0x10E, 0x64},
      {0x10F, 0x64}, {0x110, 0x111}, {0x112, 0x65}, {0x113, 0x65}, {0x114, 0x65}, {0x115, 0x65},
      {0x116, 0x65}, {0x117, 0x65}, {0x118, 0x65}, {0x119, 0x65}, {0x11A, 0x65}, {0x11B, 0x65},
      {0x11C, 0x67}, {0x11D, 0x67}, {0x11E, 0x67}, {0x11F, 0x67}, {0x120, 0x67}, {0x121, 0x67},
      {0x122, 0x67}, {0x123, 0x67}, {0x124, 0x68}, {0x125, 0x68}, {0x126, 0x127}, {0x128, 0x69},
      {0x129, 0x69}, {0x12A, 0x69}, {0x12B, 0x69}, {0x12C, 0x69}, {0x12D, 0x69}, {0x12E, 0x69},
      {0x12F, 0x69}, {0x130, 0x69}, {0x132, 0x133}, {0x134, 0x6A}, {0x135, 0x6A}, {0x136, 0x6B},
      {0x137, 0x6B}, {0x139, 0x6C}, {0x13A, 0x6C}, {0x13B, 0x6C}, {0x13C, 0x6C}, {0x13D, 0x6C},
      {0x13E, 0x6C}, {0x13F, 0x140}, {0x141, 0x142}, {0x143, 0x6E}, {0x144, 0x6E}, {0x145, 0x6E},
      {0x146, 0x6E}, {0x147, 0x6E}, {0x148, 0x6E}, {0x14A, 0x14B}, {0x14C, 0x6F}, {0x14D, 0x6F},
      {0x14E, 0x6F}, {0x14F, 0x6F}, {0x150, 0x6F}, {0x151, 0x6F}, {0x152, 0x153}, {0x154, 0x72},
      {0x155, 0x72}, {0x156, 0x72}, {0x157, 0x72}, {0x158, 0x72}, {0x159, 0x72}, {0x15A, 0x73},
      {0x15B, 0x73}, {0x15C, 0x73}, {0x15D, 0x73}, {0x15E, 0x73}, {0x15F, 0x73}, {0x160, 0x73},
      {0x161, 0x73}, {0x162, 0x74}, {0x163, 0x74}, {0x164, 0x74}, {0x165, 0x74}, {0x166, 0x167},
      {0x168, 0x75}, {0x169, 0x75}, {0x16A, 0x75}, {0x16B, 0x75}, {0x16C, 0x75}, {0x16D, 0x75},
      {0x16E, 0x75}, {0x16F, 0x75}, {0x170, 0x75}, {0x171, 0x75}, {0x172, 0x75}, {0x173, 0x75},
      {0x174, 0x77}, {0x175, 0x77}, {0x176, 0x79}, {0x177, 0x79}, {0x178, 0x79}, {0x179, 0x7A},
      {0x17A, 0x7A}, {0x17B, 0x7A}, {0x17C, 0x7A}, {0x17D, 0x7A}, {0x17E, 0x7A}};
  const auto it = table.find(c);
  return it == table.end() ? c : it->second;
}

}  // namespace

WordPieceTokenizer::WordPieceTokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  for (std::size_t i = 0; i < vocab_.size(); ++i) ids_.emplace(vocab_[i], static_cast<int64_t>(i));
  auto need = [&](const char* t) {
    auto it = ids_.find(t);
    if (it == ids_.end()) throw std::invalid_argument(std::string("vocabulary lacks special token ") + t);
    return it->second;
  };
  cls_ = need("[CLS]");
  sep_ = need("[SEP]");
  unk_ = need("[UNK]");
  pad_ = need("[PAD]");
}

WordPieceTokenizer WordPieceTokenizer::from_file(const fs::path& vocab_txt) {
  std::ifstream in(vocab_txt);
  if (!in) throw std::runtime_error("cannot open vocabulary " + vocab_txt.string());
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    vocab.push_back(line);
  }
  return WordPieceTokenizer(std::move(vocab));
}

int64_t WordPieceTokenizer::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? unk_ : it->second;
}

std::vector<std::string> WordPieceTokenizer::basic_tokenize(std::string_view text) const {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char32_t c : utf8_decode(text)) {
    if (c == 0 || c == 0xFFFD || is_control(c)) continue;
    if (is_whitespace(c)) {
      flush();
      continue;
    }
    if (is_combining_mark(c)) continue;
    c = fold(c);
    if (is_punctuation(c) || is_cjk(c)) {
      flush();
      std::string single;
      utf8_append(single, c);
      tokens.push_back(std::move(single));
      continue;
    }
    utf8_append(current, c);
  }
  flush();
  return tokens;
}

std::vector<std::string> WordPieceTokenizer::wordpiece(const std::string& word) const {
  const auto chars = utf8_decode(word);
  if (chars.size() > 100) return {"[UNK]"};
  // Byte offsets of every code point so substrings stay valid UTF-8.
  std::vector<std::size_t> offsets;
  {
    std::size_t pos = 0;
    for (char32_t c : chars) {
      offsets.push_back(pos);
      std::string tmp;
      utf8_append(tmp, c);
      pos += tmp.size();
    }
    offsets.push_back(pos);
  }
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < chars.size()) {
    std::size_t end = chars.size();
    std::string match;
    while (start < end) {
      std::string sub = word.substr(offsets[start], offsets[end] - offsets[start]);
      if (start > 0) sub = "##" + sub;
      if (ids_.count(sub)) {
        match = std::move(sub);
        break;
      }
      --end;
    }
    if (match.empty()) return {"[UNK]"};
    pieces.push_back(std::move(match));
    start = end;
  }
  return pieces;
}

std::vector<std::string> WordPieceTokenizer::tokenize(std::string_view text) const {
  std::vector<std::string> out;
  for (const auto& word : basic_tokenize(text)) {
    auto pieces = wordpiece(word);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

std::vector<int64_t> WordPieceTokenizer::encode(std::string_view text, int budget) const {
  if (budget < 2) throw std::invalid_argument("encode: budget must leave room for [CLS] and [SEP]");
  std::vector<int64_t> ids{cls_};
  for (const auto& piece : tokenize(text)) {
    if (static_cast<int>(ids.size()) >= budget - 1) break;
    ids.push_back(id(piece));
  }
  ids.push_back(sep_);
  return ids;
}

// --- BERT -----------------------------------------------------------------------

BertConfig BertConfig::from_json(const json& j) {
  BertConfig c;
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.hidden_size = j.at("hidden_size").get<int64_t>();
  c.num_hidden_layers = j.at("num_hidden_layers").get<int64_t>();
  c.num_attention_heads = j.at("num_attention_heads").get<int64_t>();
  c.intermediate_size = j.at("intermediate_size").get<int64_t>();
  c.max_position_embeddings = j.value("max_position_embeddings", int64_t{512});
  c.type_vocab_size = j.value("type_vocab_size", int64_t{2});
  c.layer_norm_eps = j.value("layer_norm_eps", 1e-12);
  const auto act = j.value("hidden_act", std::string("gelu"));
  if (act != "gelu") throw std::invalid_argument("unsupported hidden_act: " + act);
  if (c.hidden_size % c.num_attention_heads != 0) {
    throw std::invalid_argument("hidden_size must be divisible by num_attention_heads");
  }
  return c;
}

json BertConfig::to_json() const {
  return {{"architectures", {"BertModel"}},
          {"model_type", "bert"},
          {"vocab_size", vocab_size},
          {"hidden_size", hidden_size},
          {"num_hidden_layers", num_hidden_layers},
          {"num_attention_heads", num_attention_heads},
          {"intermediate_size", intermediate_size},
          {"max_position_embeddings", max_position_embeddings},
          {"type_vocab_size", type_vocab_size},
          {"layer_norm_eps", layer_norm_eps},
          {"hidden_act", "gelu"},
          {"hidden_dropout_prob", 0.0},
          {"attention_probs_dropout_prob", 0.0},
          {"initializer_range", 0.02},
          {"pad_token_id", 0}};
}

std::vector<std::string> BertModel::required_weights(const BertConfig& config) {
  std::vector<std::string> names = {"embeddings.word_embeddings.weight", "embeddings.position_embeddings.weight",
                                    "embeddings.token_type_embeddings.weight", "embeddings.LayerNorm.weight",
                                    "embeddings.LayerNorm.bias"};
  for (int64_t l = 0; l < config.num_hidden_layers; ++l) {
    const std::string p = "encoder.layer." + std::to_string(l) + ".";
    for (const char* sub : {"attention.self.query", "attention.self.key", "attention.self.value",
                            "attention.output.dense", "attention.output.LayerNorm", "intermediate.dense",
                            "output.dense", "output.LayerNorm"}) {
      names.push_back(p + sub + ".weight");
      names.push_back(p + sub + ".bias");
    }
  }
  return names;
}

std::map<std::string, torch::Tensor> BertModel::normalize_names(const std::map<std::string, torch::Tensor>& raw) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& [name, t] : raw) {
    std::string n = name;
    if (n.rfind("bert.", 0) == 0) n = n.substr(5);
    auto replace_suffix = [&](const std::string& from, const std::string& to) {
      if (n.size() >= from.size() && n.compare(n.size() - from.size(), from.size(), from) == 0) {
        n = n.substr(0, n.size() - from.size()) + to;
      }
    };
    replace_suffix("LayerNorm.gamma", "LayerNorm.weight");
    replace_suffix("LayerNorm.beta", "LayerNorm.bias");
    out[n] = t;
  }
  return out;
}

BertModel::BertModel(BertConfig config, std::map<std::string, torch::Tensor> weights)
    : config_(config), weights_(normalize_names(weights)) {
  for (const auto& name : required_weights(config_)) {
    if (!weights_.count(name)) throw std::invalid_argument("BERT checkpoint lacks weight " + name);
  }
  const auto& word = w("embeddings.word_embeddings.weight");
  if (word.size(0) != config_.vocab_size || word.size(1) != config_.hidden_size) {
    throw std::invalid_argument("BERT word embedding shape disagrees with config");
  }
}

const torch::Tensor& BertModel::w(const std::string& name) const { return weights_.at(name); }

torch::Tensor BertModel::forward(const torch::Tensor& ids, const torch::Tensor& mask) const {
  torch::NoGradGuard no_grad;
  const auto batch = ids.size(0), len = ids.size(1);
  if (len > config_.max_position_embeddings) throw std::invalid_argument("sequence longer than position table");
  const auto hidden = config_.hidden_size;
  const auto heads = config_.num_attention_heads;
  const auto head_dim = hidden / heads;
  const double eps = config_.layer_norm_eps;

  auto layer_norm = [&](const torch::Tensor& x, const std::string& p) {
    return F::layer_norm(x, F::LayerNormFuncOptions({hidden}).weight(w(p + ".weight")).bias(w(p + ".bias")).eps(eps));
  };
  auto linear = [&](const torch::Tensor& x, const std::string& p) {
    return torch::linear(x, w(p + ".weight"), w(p + ".bias"));
  };

  auto h = w("embeddings.word_embeddings.weight").index_select(0, ids.reshape({-1})).view({batch, len, hidden});
  h = h + w("embeddings.position_embeddings.weight").narrow(0, 0, len).unsqueeze(0);
  h = h + w("embeddings.token_type_embeddings.weight")[0];
  h = layer_norm(h, "embeddings.LayerNorm");

  const auto additive = (1.0 - mask.to(torch::kFloat32)).view({batch, 1, 1, len}) *
                        std::numeric_limits<float>::lowest();
  auto split = [&](const torch::Tensor& x) { return x.view({batch, len, heads, head_dim}).transpose(1, 2); };
  for (int64_t l = 0; l < config_.num_hidden_layers; ++l) {
    const std::string p = "encoder.layer." + std::to_string(l) + ".";
    auto q = split(linear(h, p + "attention.self.query"));
    auto k = split(linear(h, p + "attention.self.key"));
    auto v = split(linear(h, p + "attention.self.value"));
    auto scores = torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(head_dim)) + additive;
    auto ctx = torch::matmul(torch::softmax(scores, -1), v).transpose(1, 2).reshape({batch, len, hidden});
    auto attn = layer_norm(linear(ctx, p + "attention.output.dense") + h, p + "attention.output.LayerNorm");
    auto inter = torch::gelu(linear(attn, p + "intermediate.dense"));
    h = layer_norm(linear(inter, p + "output.dense") + attn, p + "output.LayerNorm");
  }
  return h;
}

ConditioningPair TextEncoder::condition(char letter, const std::string& sentence) const {
  return {embed_letter(letter), embed_impressions(sentence), checkpoint_hash()};
}

BertTextEncoder::BertTextEncoder(WordPieceTokenizer tokenizer, BertModel model, std::string hash)
    : tokenizer_(std::move(tokenizer)), model_(std::move(model)), hash_(std::move(hash)) {
  if (tokenizer_.vocab_size() != model_.config().vocab_size) {
    throw std::invalid_argument("vocabulary size disagrees with BERT config");
  }
}

std::string encoder_checkpoint_hash(const fs::path& dir) {
  return sha256_hex(sha256_file(dir / "config.json") + sha256_file(dir / "vocab.txt") +
                    sha256_file(dir / "model.safetensors"));
}

std::shared_ptr<BertTextEncoder> BertTextEncoder::load(const fs::path& dir) {
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw std::runtime_error("text encoder checkpoint lacks config.json: " + dir.string());
  const auto config = BertConfig::from_json(json::parse(cfg_in));
  auto tokenizer = WordPieceTokenizer::from_file(dir / "vocab.txt");
  auto weights = read_safetensors(dir / "model.safetensors");
  return std::make_shared<BertTextEncoder>(std::move(tokenizer), BertModel(config, std::move(weights.tensors)),
                                           encoder_checkpoint_hash(dir));
}

EmbeddingSequence BertTextEncoder::encode(std::string_view text, int budget, SequenceKind kind) const {
  const auto ids = tokenizer_.encode(text, budget);
  const auto n = static_cast<int64_t>(ids.size());
  auto id_tensor = torch::from_blob(const_cast<int64_t*>(ids.data()), {1, n}, torch::kLong).clone();
  auto mask = torch::ones({1, n}, torch::kBool);
  auto hidden = model_.forward(id_tensor, mask);
  return {hidden[0].contiguous(), mask[0], kind};
}

EmbeddingSequence BertTextEncoder::embed_letter(char letter) const {
  if (letter < 'A' || letter > 'Z') {
    throw std::invalid_argument(std::string("embed_letter: expected A-Z, got '") + letter + "'");
  }
  auto seq = encode(std::string(1, letter), kLetterSequenceLength, SequenceKind::letter);
  if (seq.length() != kLetterSequenceLength) throw std::logic_error("letter sequence must have 3 positions");
  return seq;
}

EmbeddingSequence BertTextEncoder::embed_impressions(const std::string& sentence) const {
  if (sentence.empty()) throw std::invalid_argument("embed_impressions: empty sentence");
  // Smaller checkpoints have shorter position tables than the 512-token budget.
  const auto budget = std::min<int64_t>(kImpressionSequenceBudget, model_.config().max_position_embeddings);
  return encode(sentence, static_cast<int>(budget), SequenceKind::impression);
}

std::vector<std::string> desk_vocabulary(const std::vector<std::string>& extra_words) {
  std::vector<std::string> vocab = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  for (char c = 33; c < 127; ++c) {
    if (!(c >= 'A' && c <= 'Z')) vocab.emplace_back(1, c);
  }
  for (char c = '0'; c <= '9'; ++c) vocab.push_back(std::string("##") + c);
  for (char c = 'a'; c <= 'z'; ++c) vocab.push_back(std::string("##") + c);
  std::set<std::string> seen(vocab.begin(), vocab.end());
  for (const auto& w : extra_words) {
    if (!w.empty() && seen.insert(w).second) vocab.push_back(w);
  }
  return vocab;
}

void write_desk_encoder(const fs::path& dir, std::uint64_t seed, const std::vector<std::string>& extra_words,
                        int64_t hidden_size, int64_t layers, int64_t heads) {
  fs::create_directories(dir);
  const auto vocab = desk_vocabulary(extra_words);
  BertConfig cfg;
  cfg.vocab_size = static_cast<int64_t>(vocab.size());
  cfg.hidden_size = hidden_size;
  cfg.num_hidden_layers = layers;
  cfg.num_attention_heads = heads;
  cfg.intermediate_size = 4 * hidden_size;
  cfg.max_position_embeddings = kImpressionSequenceBudget;

  auto gen = make_generator(derive_seed(seed, "desk_encoder"));
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  auto normal = [&](std::vector<int64_t> shape) { return torch::randn(shape, gen, torch::kFloat32) * 0.02; };
  const auto h = cfg.hidden_size;
  tensors.emplace_back("embeddings.word_embeddings.weight", normal({cfg.vocab_size, h}));
  tensors.emplace_back("embeddings.position_embeddings.weight", normal({cfg.max_position_embeddings, h}));
  tensors.emplace_back("embeddings.token_type_embeddings.weight", normal({cfg.type_vocab_size, h}));
  tensors.emplace_back("embeddings.LayerNorm.weight", torch::ones({h}));
  tensors.emplace_back("embeddings.LayerNorm.bias", torch::zeros({h}));
  for (int64_t l = 0; l < cfg.num_hidden_layers; ++l) {
    const std::string p = "encoder.layer." + std::to_string(l) + ".";
    for (const char* sub : {"attention.self.query", "attention.self.key", "attention.self.value",
                            "attention.output.dense"}) {
      tensors.emplace_back(p + sub + ".weight", normal({h, h}));
      tensors.emplace_back(p + sub + ".bias", torch::zeros({h}));
    }
    tensors.emplace_back(p + "intermediate.dense.weight", normal({cfg.intermediate_size, h}));
    tensors.emplace_back(p + "intermediate.dense.bias", torch::zeros({cfg.intermediate_size}));
    tensors.emplace_back(p + "output.dense.weight", normal({h, cfg.intermediate_size}));
    tensors.emplace_back(p + "output.dense.bias", torch::zeros({h}));
    for (const char* ln : {"attention.output.LayerNorm", "output.LayerNorm"}) {
      tensors.emplace_back(p + ln + ".weight", torch::ones({h}));
      tensors.emplace_back(p + ln + ".bias", torch::zeros({h}));
    }
  }
  write_safetensors(dir / "model.safetensors", tensors, {{"format", "pt"}});
  std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << "\n";
  std::ofstream vocab_out(dir / "vocab.txt");
  for (const auto& t : vocab) vocab_out << t << "\n";
}

// --- cache --------------------------------------------------------------------

namespace {

const char* kind_name(SequenceKind k) { return k == SequenceKind::letter ? "letter" : "impression"; }

}  // namespace

EmbeddingCache::EmbeddingCache(fs::path dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
  std::ifstream in(dir_ / "index.json");
  if (!in) return;
  const auto doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.contains("entries")) return;
  for (const auto& [key, e] : doc.at("entries").items()) {
    index_[key] = Entry{e.at("length").get<int64_t>(), e.at("dim").get<int64_t>()};
    meta_[key] = e;
  }
}

std::string EmbeddingCache::key(const std::string& encoder_hash, SequenceKind kind, const std::string& text) {
  return sha256_hex(encoder_hash + '\0' + kind_name(kind) + '\0' + text);
}

std::optional<EmbeddingSequence> EmbeddingCache::get(const std::string& encoder_hash, SequenceKind kind,
                                                     const std::string& text) const {
  const auto k = key(encoder_hash, kind, text);
  std::shared_lock lock(mutex_);
  const auto it = index_.find(k);
  if (it == index_.end()) return std::nullopt;
  std::ifstream in(dir_ / (k + ".f32"), std::ios::binary);
  if (!in) return std::nullopt;
  auto vectors = torch::empty({it->second.length, it->second.dim}, torch::kFloat32);
  in.read(reinterpret_cast<char*>(vectors.data_ptr<float>()),
          static_cast<std::streamsize>(vectors.numel() * sizeof(float)));
  if (!in) return std::nullopt;
  return EmbeddingSequence{vectors, torch::ones({it->second.length}, torch::kBool), kind};
}

void EmbeddingCache::put(const std::string& encoder_hash, SequenceKind kind, const std::string& text,
                         const EmbeddingSequence& seq) {
  const auto k = key(encoder_hash, kind, text);
  const auto vectors = seq.vectors.to(torch::kFloat32).contiguous();
  std::unique_lock lock(mutex_);
  if (index_.count(k)) return;
  {
    const auto tmp = dir_ / (k + ".f32.tmp");
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(vectors.data_ptr<float>()),
              static_cast<std::streamsize>(vectors.numel() * sizeof(float)));
    if (!out) throw std::runtime_error("embedding cache write failed in " + dir_.string());
    out.close();
    fs::rename(tmp, dir_ / (k + ".f32"));
  }
  index_[k] = Entry{seq.length(), seq.dim()};
  meta_[k] = {{"length", seq.length()}, {"dim", seq.dim()}, {"kind", kind_name(kind)},
              {"encoder", encoder_hash}, {"text", text}};
  flush_index();
}

std::size_t EmbeddingCache::size() const {
  std::shared_lock lock(mutex_);
  return index_.size();
}

void EmbeddingCache::flush_index() const {
  json entries = json::object();
  for (const auto& [k, m] : meta_) entries[k] = m;
  const auto tmp = dir_ / "index.json.tmp";
  std::ofstream(tmp, std::ios::trunc) << json{{"entries", entries}}.dump(1) << "\n";
  fs::rename(tmp, dir_ / "index.json");
}

CachedTextEncoder::CachedTextEncoder(std::shared_ptr<const TextEncoder> inner, std::shared_ptr<EmbeddingCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

EmbeddingSequence CachedTextEncoder::embed_letter(char letter) const {
  const std::string text(1, letter);
  if (auto hit = cache_->get(checkpoint_hash(), SequenceKind::letter, text)) return *hit;
  auto seq = inner_->embed_letter(letter);
  cache_->put(checkpoint_hash(), SequenceKind::letter, text, seq);
  return seq;
}

EmbeddingSequence CachedTextEncoder::embed_impressions(const std::string& sentence) const {
  if (auto hit = cache_->get(checkpoint_hash(), SequenceKind::impression, sentence)) return *hit;
  auto seq = inner_->embed_impressions(sentence);
  cache_->put(checkpoint_hash(), SequenceKind::impression, sentence, seq);
  return seq;
}

}  // namespace glyphdm
