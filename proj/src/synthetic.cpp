#include "glyphdm/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "glyphdm/dataset.hpp"
#include "glyphdm/rng.hpp"

namespace glyphdm {

namespace {

// Rows top to bottom, bit 4 is the leftmost column.
constexpr std::array<std::array<std::uint8_t, 7>, 26> kBitmap = {{
    {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // A
    {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
    {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E},
    {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E},
    {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F},
    {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
    {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F},
    {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
    {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E},
    {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
    {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11},
    {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
    {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11},
    {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11},
    {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},
    {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
    {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D},
    {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
    {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E},
    {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
    {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},
    {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
    {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A},
    {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
    {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04},
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F},  // Z
}};

bool cell_on(int letter, int col, int row) {
  if (col < 0 || col >= 5 || row < 0 || row >= 7) return false;
  return (kBitmap[static_cast<std::size_t>(letter)][static_cast<std::size_t>(row)] >> (4 - col)) & 1;
}

/// Ink test in grid units: a lit cell covers a square of side `weight` centred
/// on it, bridged to lit neighbours so strokes stay connected.
bool inked(int letter, double gx, double gy, double weight) {
  const int col = static_cast<int>(std::floor(gx)), row = static_cast<int>(std::floor(gy));
  const double fx = gx - col - 0.5, fy = gy - row - 0.5, h = weight / 2.0;
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      const int c = col + dc, r = row + dr;
      if (!cell_on(letter, c, r)) continue;
      const double x = fx - dc, y = fy - dr;  // offset from neighbour centre
      if (std::abs(x) <= h && std::abs(y) <= h) return true;
      // horizontal / vertical bridges towards lit neighbours
      if (cell_on(letter, c + 1, r) && x >= 0 && x <= 1 && std::abs(y) <= h) return true;
      if (cell_on(letter, c, r + 1) && y >= 0 && y <= 1 && std::abs(x) <= h) return true;
    }
  }
  return false;
}

}  // namespace

GrayImage render_synthetic_glyph(char letter, const GlyphStyle& style) {
  const int li = letter_index(letter);
  if (style.height < 8) throw std::invalid_argument("synthetic glyph height must be at least 8");
  const double cell = style.height / 9.0;  // 7 rows plus one cell of margin each side
  const int width = std::max(8, static_cast<int>(std::lround(cell * (5.0 * style.width + 2.0 + std::abs(style.slant) * 7.0))));
  GrayImage img(width, style.height);
  const double w = std::clamp(style.weight, 0.1, 1.0);
  const double x0 = cell * (1.0 + std::max(0.0, style.slant) * 7.0);
  constexpr int kSub = 4;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double py = y + (sy + 0.5) / kSub, px = x + (sx + 0.5) / kSub;
          const double gy = py / cell - 1.0;
          const double gx = (px - x0 + style.slant * gy * cell) / (cell * style.width);
          bool on = inked(li, gx, gy, w);
          if (on && style.outline) on = !inked(li, gx, gy, w * 0.45);
          hits += on;
        }
      }
      img.at(x, y) = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - hits / double(kSub * kSub))));
    }
  }
  return img;
}

std::vector<SyntheticFont> synthetic_fonts(int count, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("font count must be non-negative");
  std::vector<SyntheticFont> fonts;
  StableRng rng(derive_seed(seed, "synthetic_fonts"));
  const auto uniform = [&rng] { return static_cast<double>(rng.next() >> 11) / 9007199254740992.0; };
  static const std::array<const char*, 6> extra = {"retro", "ink", "game", "fashion", "elegant", "playful"};
  for (int i = 0; i < count; ++i) {
    SyntheticFont f;
    f.font_id = "synth-" + std::to_string(seed) + "-" + std::to_string(i);
    f.style.weight = 0.3 + 0.65 * uniform();
    f.style.slant = uniform() < 0.3 ? 0.15 + 0.2 * uniform() : 0.0;
    f.style.width = 0.7 + 0.7 * uniform();
    f.style.outline = uniform() < 0.2;
    f.keywords.push_back(f.style.weight > 0.7 ? "heavy" : f.style.weight < 0.45 ? "light" : "regular");
    f.keywords.push_back(f.style.width > 1.15 ? "wide" : f.style.width < 0.9 ? "narrow" : "medium");
    f.keywords.push_back(f.style.slant > 0.0 ? "italic" : "upright");
    f.keywords.push_back(f.style.outline ? "outline" : "solid");
    f.keywords.push_back("sans-serif");
    for (int k = 0; k < 2; ++k) f.keywords.push_back(extra[rng.below(extra.size())]);
    fonts.push_back(std::move(f));
  }
  return fonts;
}

void write_synthetic_font(const std::filesystem::path& root, const SyntheticFont& font) {
  const auto dir = root / font.font_id;
  std::filesystem::create_directories(dir);
  for (int l = 0; l < kNumLetters; ++l) {
    write_png(dir / (std::string(1, letter_at(l)) + ".png"), render_synthetic_glyph(letter_at(l), font.style));
  }
  std::ofstream tags(dir / "tags.txt");
  for (const auto& k : font.keywords) tags << k << '\n';
  if (!tags) throw std::runtime_error("cannot write tags for " + font.font_id);
}

}  // namespace glyphdm
