#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "glyphdm/dataset.hpp"
#include "glyphdm/diffusion.hpp"
#include "glyphdm/synthetic.hpp"
#include "glyphdm/text_encoder.hpp"

namespace glyphdm::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
  std::filesystem::path path_;
};

/// 26 canvases of `canvas` x `canvas` white pixels holding one black `w` x `h`
/// rectangle, plus tags.txt. `missing` skips that letter's file.
void write_rect_font(const std::filesystem::path& root, const std::string& id, const std::vector<std::string>& keywords,
                     int w, int h, int missing = -1, int canvas = 64);

struct RuleCorpus {
  std::vector<std::string> expected_survivors;  // sorted
  int total = 0;
};

/// Twelve fonts, each tripping at most one filter rule: keyword counts 4 and 5,
/// ink ratios 1.9, 2.0 and 2.5, a missing glyph, and plain passing fonts.
RuleCorpus write_rule_corpus(const std::filesystem::path& root);

/// Seeded desk encoder whose vocabulary holds `words`, written under `dir`.
std::shared_ptr<BertTextEncoder> make_desk_encoder(const std::filesystem::path& dir,
                                                   const std::vector<std::string>& words, std::uint64_t seed = 1);

/// `n` synthetic fonts with preprocessed glyphs, ready for training.
struct ToyFonts {
  std::vector<SyntheticFont> fonts;
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> keywords;
  std::vector<std::array<GlyphImage, kNumLetters>> glyphs;
  std::vector<std::string> vocabulary() const;
};
ToyFonts toy_fonts(int n, std::uint64_t seed);

/// Location of the tiny BERT reference fixture.
std::filesystem::path fixture_dir();

}  // namespace glyphdm::testing
