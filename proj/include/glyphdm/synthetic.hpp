#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "glyphdm/image.hpp"

namespace glyphdm {

/// Parameters of a procedurally drawn 5x7 bitmap alphabet.
struct GlyphStyle {
  double weight = 0.5;  // stroke thickness as a fraction of a cell, 0..1
  double slant = 0.0;   // horizontal shear per unit height
  double width = 1.0;   // horizontal stretch of the 5x7 grid
  int height = 48;      // canvas height in pixels; the width follows the stretch
  bool outline = false; // hollow strokes
};

/// Black-on-white rendering of `letter` (A-Z), antialiased by 4x4 supersampling.
GrayImage render_synthetic_glyph(char letter, const GlyphStyle& style);

/// Style drawn from a seeded generator, keyword list included.
struct SyntheticFont {
  std::string font_id;
  GlyphStyle style;
  std::vector<std::string> keywords;
};

/// `count` fonts with descriptive keywords derived from their styles.
std::vector<SyntheticFont> synthetic_fonts(int count, std::uint64_t seed);

/// Writes root/<font_id>/<L>.png (all 26 letters) and tags.txt.
void write_synthetic_font(const std::filesystem::path& root, const SyntheticFont& font);

}  // namespace glyphdm
