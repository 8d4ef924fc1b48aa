#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace glyphdm {

/// 8-bit grayscale raster, row-major. 0 = black ink, 255 = white paper.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool empty() const { return width == 0 || height == 0; }
};

class ImageError : public std::runtime_error {
public:
  ImageError(const std::filesystem::path& file, const std::string& what)
      : std::runtime_error(file.string() + ": " + what), file_(file) {}
  const std::filesystem::path& file() const { return file_; }

private:
  std::filesystem::path file_;
};

/// Decodes PNG (any color type; alpha is composited over white) and binary or
/// ASCII PNM (P2/P3/P5/P6). Color is reduced with Rec. 601 luma weights.
GrayImage read_image(const std::filesystem::path& path);
GrayImage decode_png(std::span<const std::uint8_t> bytes, const std::string& label = "<memory>");

std::vector<std::uint8_t> encode_png(const GrayImage& image);
void write_png(const std::filesystem::path& path, const GrayImage& image);

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

/// Tight box around pixels darker than `threshold`; empty box when there is no ink.
BoundingBox ink_bounds(const GrayImage& image, std::uint8_t threshold = 128);

/// Separable triangle-filter resampling with half-pixel centers. With
/// `antialias` the filter support widens by the downscale factor (area-aware
/// bilinear); without it this is plain bilinear interpolation.
std::vector<float> resize_bilinear(std::span<const float> src, int src_w, int src_h, int dst_w, int dst_h,
                                   bool antialias = true);

}  // namespace glyphdm
