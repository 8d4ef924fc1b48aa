#include "glyphdm/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <memory>

#include <png.h>

namespace glyphdm {
namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError(path, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint8_t luma(double r, double g, double b) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(0.299 * r + 0.587 * g + 0.114 * b), 0L, 255L));
}

GrayImage decode_png_impl(std::span<const std::uint8_t> bytes, const std::filesystem::path& label) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ImageError(label, std::string("corrupt PNG: ") + image.message);
  }
  image.format = PNG_FORMAT_RGBA;
  if (image.width == 0 || image.height == 0) {
    png_image_free(&image);
    throw ImageError(label, "zero-sized PNG");
  }
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ImageError(label, "corrupt PNG: " + msg);
  }
  GrayImage out(static_cast<int>(image.width), static_cast<int>(image.height));
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double a = rgba[4 * i + 3] / 255.0;
    const double g = luma(rgba[4 * i], rgba[4 * i + 1], rgba[4 * i + 2]);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(a * g + (1.0 - a) * 255.0));
  }
  return out;
}

class PnmReader {
public:
  PnmReader(const std::vector<std::uint8_t>& data, const std::filesystem::path& label) : d_(data), label_(label) {}

  int next_int() {
    skip_space();
    if (pos_ >= d_.size() || !std::isdigit(d_[pos_])) throw ImageError(label_, "corrupt PNM header");
    long v = 0;
    while (pos_ < d_.size() && std::isdigit(d_[pos_])) {
      v = v * 10 + (d_[pos_++] - '0');
      if (v > (1 << 24)) throw ImageError(label_, "corrupt PNM header");
    }
    return static_cast<int>(v);
  }
  void skip_single_space() {
    if (pos_ < d_.size() && std::isspace(d_[pos_])) ++pos_;
  }
  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

private:
  void skip_space() {
    while (pos_ < d_.size()) {
      if (std::isspace(d_[pos_])) {
        ++pos_;
      } else if (d_[pos_] == '#') {
        while (pos_ < d_.size() && d_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }
  const std::vector<std::uint8_t>& d_;
  const std::filesystem::path& label_;
  std::size_t pos_ = 2;
};

GrayImage decode_pnm(const std::vector<std::uint8_t>& d, const std::filesystem::path& label) {
  const char kind = static_cast<char>(d[1]);
  PnmReader r(d, label);
  const int w = r.next_int();
  const int h = r.next_int();
  const int maxval = r.next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw ImageError(label, "corrupt PNM header");
  const bool color = kind == '3' || kind == '6';
  const bool binary = kind == '5' || kind == '6';
  const int channels = color ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;
  std::vector<double> samples(count);
  if (binary) {
    r.skip_single_space();
    const std::size_t bps = maxval > 255 ? 2 : 1;
    if (d.size() < r.pos() + count * bps) throw ImageError(label, "truncated PNM data");
    const std::uint8_t* p = d.data() + r.pos();
    for (std::size_t i = 0; i < count; ++i) {
      samples[i] = bps == 1 ? p[i] : (p[2 * i] << 8 | p[2 * i + 1]);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) samples[i] = r.next_int();
  }
  const double scale = 255.0 / maxval;
  GrayImage out(w, h);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    if (color) {
      out.pixels[i] = luma(samples[3 * i] * scale, samples[3 * i + 1] * scale, samples[3 * i + 2] * scale);
    } else {
      out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(samples[i] * scale), 0L, 255L));
    }
  }
  return out;
}

}  // namespace

GrayImage decode_png(std::span<const std::uint8_t> bytes, const std::string& label) {
  return decode_png_impl(bytes, label);
}

GrayImage read_image(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png_impl(bytes, path);
  if (bytes.size() >= 3 && bytes[0] == 'P' && std::string_view("2356").find(static_cast<char>(bytes[1])) !=
                                                  std::string_view::npos) {
    return decode_pnm(bytes, path);
  }
  throw ImageError(path, "unsupported or corrupt image (expected PNG or PNM)");
}

std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  if (img.empty()) throw std::invalid_argument("encode_png: empty image");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("encode_png: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("encode_png: ") + image.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError(path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError(path, "write failed");
}

BoundingBox ink_bounds(const GrayImage& image, std::uint8_t threshold) {
  BoundingBox box{image.width, image.height, 0, 0};
  bool any = false;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (image.at(x, y) < threshold) {
        any = true;
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x + 1);
        box.y1 = std::max(box.y1, y + 1);
      }
    }
  }
  return any ? box : BoundingBox{};
}

namespace {

struct Taps {
  std::vector<int> first;
  std::vector<std::vector<double>> weights;
};

Taps triangle_taps(int in_size, int out_size, bool antialias) {
  const double scale = static_cast<double>(in_size) / out_size;
  const double support = (antialias && scale > 1.0) ? scale : 1.0;
  Taps taps;
  taps.first.resize(out_size);
  taps.weights.resize(out_size);
  for (int i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) * scale;
    int lo = static_cast<int>(std::floor(center - support));
    int hi = static_cast<int>(std::ceil(center + support));
    lo = std::max(lo, 0);
    hi = std::min(hi, in_size);
    std::vector<double> w;
    double total = 0.0;
    for (int j = lo; j < hi; ++j) {
      const double d = std::abs((j + 0.5 - center) / support);
      const double v = std::max(0.0, 1.0 - d);
      w.push_back(v);
      total += v;
    }
    if (total <= 0.0) {
      // Degenerate upscale at the border: nearest sample.
      const int nearest = std::clamp(static_cast<int>(center), 0, in_size - 1);
      lo = nearest;
      w.assign(1, 1.0);
      total = 1.0;
    }
    for (auto& v : w) v /= total;
    taps.first[i] = lo;
    taps.weights[i] = std::move(w);
  }
  return taps;
}

}  // namespace

std::vector<float> resize_bilinear(std::span<const float> src, int src_w, int src_h, int dst_w, int dst_h,
                                   bool antialias) {
  if (src_w <= 0 || src_h <= 0 || dst_w <= 0 || dst_h <= 0) {
    throw std::invalid_argument("resize_bilinear: non-positive dimension");
  }
  if (src.size() != static_cast<std::size_t>(src_w) * src_h) {
    throw std::invalid_argument("resize_bilinear: buffer size mismatch");
  }
  const Taps tx = triangle_taps(src_w, dst_w, antialias);
  const Taps ty = triangle_taps(src_h, dst_h, antialias);

  std::vector<double> rows(static_cast<std::size_t>(dst_w) * src_h, 0.0);
  for (int y = 0; y < src_h; ++y) {
    for (int x = 0; x < dst_w; ++x) {
      double acc = 0.0;
      const auto& w = tx.weights[x];
      for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * src[static_cast<std::size_t>(y) * src_w + tx.first[x] + k];
      rows[static_cast<std::size_t>(y) * dst_w + x] = acc;
    }
  }
  std::vector<float> out(static_cast<std::size_t>(dst_w) * dst_h);
  for (int y = 0; y < dst_h; ++y) {
    const auto& w = ty.weights[y];
    for (int x = 0; x < dst_w; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * rows[(ty.first[y] + k) * dst_w + x];
      out[static_cast<std::size_t>(y) * dst_w + x] = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace glyphdm
