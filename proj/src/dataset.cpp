#include "glyphdm/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "glyphdm/log.hpp"
#include "glyphdm/rng.hpp"

namespace glyphdm {

namespace fs = std::filesystem;
using nlohmann::json;

int letter_index(char letter) {
  if (letter < 'A' || letter > 'Z') {
    throw std::invalid_argument(std::string("letter must be one of A-Z, got '") + letter + "'");
  }
  return letter - 'A';
}

char letter_at(int index) {
  if (index < 0 || index >= kNumLetters) throw std::out_of_range("letter index out of range");
  return static_cast<char>('A' + index);
}

namespace {

std::string trim_lower(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> split_on(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto pos = text.find(sep, start);
    const auto end = pos == std::string_view::npos ? text.size() : pos;
    parts.emplace_back(text.substr(start, end - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

const std::array<const char*, 8> kImageExtensions = {".png", ".PNG", ".pgm", ".PGM", ".ppm", ".PPM", ".pnm", ".PNM"};

std::optional<fs::path> find_glyph_file(const fs::path& dir, char letter) {
  for (const char* ext : kImageExtensions) {
    fs::path p = dir / (std::string(1, letter) + ext);
    if (fs::is_regular_file(p)) return p;
  }
  return std::nullopt;
}

std::optional<std::vector<std::string>> read_tag_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::stringstream ss;
  ss << in.rdbuf();
  if (in.bad()) return std::nullopt;
  return parse_tag_text(ss.str());
}

std::optional<FontRecord> load_font(const fs::path& dir, const json* tags) {
  FontRecord font;
  font.font_id = dir.filename().string();

  if (tags != nullptr) {
    const auto it = tags->find(font.font_id);
    if (it == tags->end()) {
      log::warn("skipping font " + font.font_id + ": no entry in tag manifest");
      return std::nullopt;
    }
    std::vector<std::string> raw;
    if (it->is_string()) {
      raw = parse_tag_text(it->get<std::string>());
    } else if (it->is_array()) {
      for (const auto& k : *it) {
        if (!k.is_string()) {
          log::warn("skipping font " + font.font_id + ": non-string keyword in tag manifest");
          return std::nullopt;
        }
        raw.push_back(k.get<std::string>());
      }
    } else {
      log::warn("skipping font " + font.font_id + ": malformed tag manifest entry");
      return std::nullopt;
    }
    font.keywords = normalize_keywords(raw);
  } else {
    auto raw = read_tag_file(dir / "tags.txt");
    if (!raw) {
      log::warn("skipping font " + font.font_id + ": unreadable tag file " + (dir / "tags.txt").string());
      return std::nullopt;
    }
    font.keywords = normalize_keywords(*raw);
  }

  for (int i = 0; i < kNumLetters; ++i) {
    const char letter = letter_at(i);
    auto file = find_glyph_file(dir, letter);
    if (!file) {
      log::warn("skipping font " + font.font_id + ": missing glyph " + std::string(1, letter));
      return std::nullopt;
    }
    try {
      const auto img = read_image(*file);
      const auto box = ink_bounds(img);
      font.glyphs[i] = GlyphSource{*file, box.width(), box.height()};
    } catch (const ImageError& e) {
      log::warn("skipping font " + font.font_id + ": " + e.what());
      return std::nullopt;
    }
  }
  return font;
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<std::string> normalize_keywords(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& r : raw) {
    auto k = trim_lower(r);
    if (k.empty()) continue;
    if (seen.insert(k).second) out.push_back(std::move(k));
  }
  return out;
}

std::vector<std::string> parse_tag_text(const std::string& text) {
  const char sep = text.find(',') != std::string::npos ? ',' : '\n';
  return normalize_keywords(split_on(text, sep));
}

std::vector<FontRecord> load_corpus(const fs::path& root, const std::optional<fs::path>& tag_manifest,
                                    unsigned threads) {
  if (!fs::is_directory(root)) throw std::runtime_error("corpus root is not a directory: " + root.string());

  json tags;
  if (tag_manifest) {
    std::ifstream in(*tag_manifest);
    if (!in) throw std::runtime_error("cannot open tag manifest " + tag_manifest->string());
    try {
      tags = json::parse(in);
    } catch (const json::exception& e) {
      throw std::runtime_error("invalid tag manifest " + tag_manifest->string() + ": " + e.what());
    }
    if (!tags.is_object()) throw std::runtime_error("tag manifest must be a JSON object");
  }

  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  std::vector<std::optional<FontRecord>> loaded(dirs.size());
  parallel_for(dirs.size(), threads,
               [&](std::size_t i) { loaded[i] = load_font(dirs[i], tag_manifest ? &tags : nullptr); });

  std::vector<FontRecord> fonts;
  for (auto& f : loaded) {
    if (f) fonts.push_back(std::move(*f));
  }
  return fonts;
}

std::vector<FontRecord> filter_fonts(const std::vector<FontRecord>& fonts) {
  std::vector<FontRecord> out;
  for (const auto& font : fonts) {
    if (font.keywords.size() < static_cast<std::size_t>(kMinKeywords)) continue;
    bool ok = true;
    for (const auto& g : font.glyphs) {
      if (g.source_height <= 0) {
        ok = false;  // degenerate glyph
        break;
      }
      // w / h > 2 without floating point division.
      if (static_cast<std::int64_t>(g.source_width) > static_cast<std::int64_t>(kMaxAspectRatio) * g.source_height) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(font);
  }
  return out;
}

GlyphImage preprocess_glyph(const GrayImage& raw) {
  if (raw.empty()) throw std::invalid_argument("preprocess_glyph: empty image");
  const auto box = ink_bounds(raw);

  const int side = std::max(raw.width, raw.height);
  const int ox = (side - raw.width) / 2;
  const int oy = (side - raw.height) / 2;
  std::vector<float> square(static_cast<std::size_t>(side) * side, 255.0f);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      square[static_cast<std::size_t>(y + oy) * side + (x + ox)] = raw.at(x, y);
    }
  }
  const auto resized = resize_bilinear(square, side, side, kGlyphSize, kGlyphSize);

  GlyphImage out;
  out.source_width = box.width();
  out.source_height = box.height();
  for (std::size_t i = 0; i < resized.size(); ++i) {
    out.pixels[i] = std::clamp(resized[i] / 127.5f - 1.0f, -1.0f, 1.0f);
  }
  return out;
}

std::string keywords_to_sentence(const std::vector<std::string>& keywords) {
  if (keywords.empty()) throw std::invalid_argument("keywords_to_sentence: empty keyword list");
  std::string out;
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    if (i > 0) out += ", ";
    out += keywords[i];
  }
  return out;
}

std::size_t train_count(std::size_t n_fonts) { return (9 * n_fonts + 5) / 10; }

DatasetSplit split_corpus(const std::vector<FontRecord>& fonts, std::uint64_t seed) {
  if (fonts.size() < 2) throw std::invalid_argument("split_corpus: need at least 2 fonts");
  std::vector<std::size_t> order(fonts.size());
  std::iota(order.begin(), order.end(), 0);
  StableRng rng(derive_seed(seed, "split"));
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(i + 1)]);
  }
  DatasetSplit split;
  split.seed = seed;
  const std::size_t n_train = train_count(fonts.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? split.train_fonts : split.test_fonts).push_back(fonts[order[i]].font_id);
  }
  return split;
}

CorpusStats compute_stats(const std::vector<std::vector<std::string>>& keyword_sets) {
  CorpusStats s;
  if (keyword_sets.empty()) return s;  // e.g. the test split of a tiny corpus
  s.n_fonts = static_cast<std::int64_t>(keyword_sets.size());
  s.n_images = s.n_fonts * kNumLetters;
  std::set<std::string> unique;
  std::int64_t total = 0;
  s.keywords_per_font_min = INT64_MAX;
  for (const auto& kws : keyword_sets) {
    const auto n = static_cast<std::int64_t>(kws.size());
    s.keywords_per_font_min = std::min(s.keywords_per_font_min, n);
    s.keywords_per_font_max = std::max(s.keywords_per_font_max, n);
    total += n;
    unique.insert(kws.begin(), kws.end());
  }
  s.n_unique_keywords = static_cast<std::int64_t>(unique.size());
  s.keywords_per_font_avg = static_cast<double>(total) / static_cast<double>(s.n_fonts);
  return s;
}

CorpusStats compute_stats(const std::vector<FontRecord>& fonts) {
  std::vector<std::vector<std::string>> sets;
  sets.reserve(fonts.size());
  for (const auto& f : fonts) sets.push_back(f.keywords);
  return compute_stats(sets);
}

namespace {

std::string thousands(std::int64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  int count = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (count > 0 && count % 3 == 0 && *it != '-') out.push_back(',');
    out.push_back(*it);
    ++count;
  }
  return {out.rbegin(), out.rend()};
}

}  // namespace

std::string format_stats_table(const std::vector<std::pair<std::string, CorpusStats>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "Set" << std::right << std::setw(10) << "Images" << std::setw(9) << "Fonts"
     << std::setw(9) << "Imp. K." << std::setw(7) << "Min." << std::setw(7) << "Avg." << std::setw(7) << "Max."
     << '\n';
  for (const auto& [name, s] : rows) {
    std::ostringstream avg;
    avg << std::fixed << std::setprecision(1) << s.keywords_per_font_avg;
    os << std::left << std::setw(12) << name << std::right << std::setw(10) << thousands(s.n_images) << std::setw(9)
       << thousands(s.n_fonts) << std::setw(9) << thousands(s.n_unique_keywords) << std::setw(7)
       << s.keywords_per_font_min << std::setw(7) << avg.str() << std::setw(7) << s.keywords_per_font_max << '\n';
  }
  return os.str();
}

GrayImage glyph_to_gray(const GlyphImage& glyph) {
  GrayImage img(kGlyphSize, kGlyphSize);
  for (std::size_t i = 0; i < glyph.pixels.size(); ++i) {
    const float v = std::clamp(glyph.pixels[i], -1.0f, 1.0f);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround((v + 1.0f) * 127.5f));
  }
  return img;
}

GlyphImage gray_to_glyph(const GrayImage& image) {
  if (image.width != kGlyphSize || image.height != kGlyphSize) {
    throw std::invalid_argument("gray_to_glyph: expected a 32x32 image");
  }
  GlyphImage g;
  g.source_width = image.width;
  g.source_height = image.height;
  for (std::size_t i = 0; i < image.pixels.size(); ++i) g.pixels[i] = image.pixels[i] / 127.5f - 1.0f;
  return g;
}

// --- manifest -------------------------------------------------------------

std::vector<const ManifestFont*> Manifest::fonts_in(const std::string& split) const {
  std::vector<const ManifestFont*> out;
  for (const auto& f : fonts) {
    if (split.empty() || f.split == split) out.push_back(&f);
  }
  return out;
}

const ManifestFont* Manifest::find(const std::string& font_id) const {
  for (const auto& f : fonts) {
    if (f.font_id == font_id) return &f;
  }
  return nullptr;
}

GlyphImage Manifest::load_glyph(const ManifestFont& font, int letter) const {
  return gray_to_glyph(read_image(base_dir / font.glyph_files.at(static_cast<std::size_t>(letter))));
}

std::string manifest_to_json(const Manifest& m) {
  json fonts = json::array();
  for (const auto& f : m.fonts) {
    json glyphs = json::object();
    for (int i = 0; i < kNumLetters; ++i) glyphs[std::string(1, letter_at(i))] = f.glyph_files[i];
    fonts.push_back({{"font_id", f.font_id}, {"split", f.split}, {"keywords", f.keywords}, {"glyphs", glyphs}});
  }
  const json doc = {{"version", m.version}, {"seed", m.seed}, {"fonts", fonts}};
  return doc.dump(2) + "\n";
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << manifest_to_json(manifest);
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("invalid manifest " + path.string() + ": " + e.what());
  }
  Manifest m;
  m.base_dir = path.parent_path();
  m.version = doc.at("version").get<int>();
  m.seed = doc.at("seed").get<std::uint64_t>();
  for (const auto& f : doc.at("fonts")) {
    ManifestFont font;
    font.font_id = f.at("font_id").get<std::string>();
    font.split = f.at("split").get<std::string>();
    font.keywords = f.at("keywords").get<std::vector<std::string>>();
    for (int i = 0; i < kNumLetters; ++i) font.glyph_files[i] = f.at("glyphs").at(std::string(1, letter_at(i)));
    m.fonts.push_back(std::move(font));
  }
  return m;
}

BuildResult build_dataset(const fs::path& root, const fs::path& out, std::uint64_t seed,
                          const std::optional<fs::path>& tag_manifest, unsigned threads) {
  auto loaded = load_corpus(root, tag_manifest, threads);
  const std::size_t n_loaded = loaded.size();
  const auto fonts = filter_fonts(loaded);
  log::info("loaded " + std::to_string(n_loaded) + " fonts, " + std::to_string(fonts.size()) + " kept after filtering");
  const auto split = split_corpus(fonts, seed);
  const std::set<std::string> test_ids(split.test_fonts.begin(), split.test_fonts.end());

  fs::create_directories(out / "glyphs");
  parallel_for(fonts.size(), threads, [&](std::size_t i) {
    const auto& font = fonts[i];
    const fs::path dir = out / "glyphs" / font.font_id;
    fs::create_directories(dir);
    for (int k = 0; k < kNumLetters; ++k) {
      const auto glyph = preprocess_glyph(read_image(font.glyphs[k].path));
      write_png(dir / (std::string(1, letter_at(k)) + ".png"), glyph_to_gray(glyph));
    }
  });

  BuildResult result;
  result.loaded_fonts = n_loaded;
  result.manifest.seed = seed;
  result.manifest.base_dir = out;
  std::vector<FontRecord> train, test;
  for (const auto& font : fonts) {
    ManifestFont mf;
    mf.font_id = font.font_id;
    mf.split = test_ids.count(font.font_id) ? "test" : "train";
    mf.keywords = font.keywords;
    for (int k = 0; k < kNumLetters; ++k) {
      mf.glyph_files[k] = "glyphs/" + font.font_id + "/" + std::string(1, letter_at(k)) + ".png";
    }
    (mf.split == "test" ? test : train).push_back(font);
    result.manifest.fonts.push_back(std::move(mf));
  }
  write_manifest(out / "manifest.json", result.manifest);

  result.train_stats = compute_stats(train);
  result.test_stats = compute_stats(test);
  std::ofstream stats(out / "stats.txt", std::ios::trunc);
  stats << format_stats_table({{"Train Set", result.train_stats}, {"Test Set", result.test_stats}});
  return result;
}

}  // namespace glyphdm
