#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "glyphdm/image.hpp"

namespace glyphdm {

inline constexpr int kGlyphSize = 32;
inline constexpr int kNumLetters = 26;
inline constexpr int kMinKeywords = 5;
inline constexpr double kMaxAspectRatio = 2.0;

/// Index 0..25 of 'A'..'Z'; throws for anything else.
int letter_index(char letter);
char letter_at(int index);

/// Preprocessed glyph: 32x32 in [-1, 1] (ink -1, paper +1), plus the tight ink
/// box of the source raster it came from.
struct GlyphImage {
  std::vector<float> pixels = std::vector<float>(kGlyphSize * kGlyphSize, 1.0f);
  int source_width = 0;
  int source_height = 0;
};

/// One raw glyph of a corpus font. Pixels stay on disk; only the ink box is kept.
struct GlyphSource {
  std::filesystem::path path;
  int source_width = 0;
  int source_height = 0;
};

struct FontRecord {
  std::string font_id;
  std::array<GlyphSource, kNumLetters> glyphs;
  std::vector<std::string> keywords;
};

struct DatasetSplit {
  std::vector<std::string> train_fonts;
  std::vector<std::string> test_fonts;
  std::uint64_t seed = 0;
};

struct CorpusStats {
  std::int64_t n_images = 0;
  std::int64_t n_fonts = 0;
  std::int64_t n_unique_keywords = 0;
  std::int64_t keywords_per_font_min = 0;
  double keywords_per_font_avg = 0.0;
  std::int64_t keywords_per_font_max = 0;
};

/// Lowercases, trims, drops empties and duplicates (first occurrence wins).
std::vector<std::string> normalize_keywords(const std::vector<std::string>& raw);

/// Tag file parsing: comma-separated if the text contains a comma, else one keyword per line.
std::vector<std::string> parse_tag_text(const std::string& text);

/// Corpus layout: `root/<font_id>/<Letter>.<png|pgm|ppm|pnm>` plus `root/<font_id>/tags.txt`.
/// `tag_manifest` optionally supplies keywords for every font as a JSON object
/// mapping font_id to either a list of keywords or one comma-separated string.
/// Fonts with a missing or unreadable glyph or tag source are skipped with a warning.
std::vector<FontRecord> load_corpus(const std::filesystem::path& root,
                                    const std::optional<std::filesystem::path>& tag_manifest = std::nullopt,
                                    unsigned threads = 1);

/// Keeps fonts with at least 5 keywords whose every glyph has
/// ink width / ink height <= 2. Zero ink height rejects the font.
std::vector<FontRecord> filter_fonts(const std::vector<FontRecord>& fonts);

/// Grayscale -> pad to square about the center with paper white -> bilinear to
/// 32x32 -> linear map [0, 255] to [-1, 1].
GlyphImage preprocess_glyph(const GrayImage& raw);

std::string keywords_to_sentence(const std::vector<std::string>& keywords);

/// Seeded Fisher-Yates shuffle; first round(0.9 N) fonts train, the rest test.
DatasetSplit split_corpus(const std::vector<FontRecord>& fonts, std::uint64_t seed);
std::size_t train_count(std::size_t n_fonts);

CorpusStats compute_stats(const std::vector<FontRecord>& fonts);
CorpusStats compute_stats(const std::vector<std::vector<std::string>>& keyword_sets);

/// Table-style rows ("Train Set", "Test Set") with Images, Fonts, Imp. K., Min/Avg/Max.
std::string format_stats_table(const std::vector<std::pair<std::string, CorpusStats>>& rows);

GrayImage glyph_to_gray(const GlyphImage& glyph);
GlyphImage gray_to_glyph(const GrayImage& image);

// --- manifest -------------------------------------------------------------

struct ManifestFont {
  std::string font_id;
  std::string split;  // "train" or "test"
  std::vector<std::string> keywords;
  std::array<std::string, kNumLetters> glyph_files;  // relative to the manifest directory
};

struct Manifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::vector<ManifestFont> fonts;
  std::filesystem::path base_dir;  // not serialized; directory the manifest was read from

  std::vector<const ManifestFont*> fonts_in(const std::string& split) const;
  const ManifestFont* find(const std::string& font_id) const;
  GlyphImage load_glyph(const ManifestFont& font, int letter) const;
};

/// Serializes with sorted object keys so identical inputs yield identical bytes.
std::string manifest_to_json(const Manifest& manifest);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

struct BuildResult {
  Manifest manifest;
  CorpusStats train_stats;
  CorpusStats test_stats;
  std::size_t loaded_fonts = 0;
};

/// Full pipeline: load, filter, split, preprocess into `out/glyphs/<font>/<L>.png`,
/// then write `out/manifest.json` and `out/stats.txt`.
BuildResult build_dataset(const std::filesystem::path& root, const std::filesystem::path& out, std::uint64_t seed,
                          const std::optional<std::filesystem::path>& tag_manifest = std::nullopt,
                          unsigned threads = 1);

}  // namespace glyphdm
