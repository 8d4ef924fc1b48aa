#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <random>

#include <unistd.h>

namespace glyphdm::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("glyphdm-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

void write_rect_font(const fs::path& root, const std::string& id, const std::vector<std::string>& keywords, int w,
                     int h, int missing, int canvas) {
  const auto dir = root / id;
  fs::create_directories(dir);
  for (int l = 0; l < kNumLetters; ++l) {
    if (l == missing) continue;
    GrayImage img(canvas, canvas);
    const int x0 = (canvas - w) / 2, y0 = (canvas - h) / 2;
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) img.at(x, y) = 0;
    write_png(dir / (std::string(1, letter_at(l)) + ".png"), img);
  }
  std::ofstream tags(dir / "tags.txt");
  for (std::size_t i = 0; i < keywords.size(); ++i) tags << (i ? ", " : "") << keywords[i];
}

RuleCorpus write_rule_corpus(const fs::path& root) {
  const std::vector<std::string> five = {"retro", "ink", "wed", "bold", "serif"};
  const std::vector<std::string> four = {"retro", "ink", "wed", "bold"};
  RuleCorpus c;
  struct Spec {
    std::string id;
    const std::vector<std::string>* kw;
    int w, h, missing;
    bool keep;
  };
  const std::vector<Spec> specs = {
      {"f00-plain", &five, 20, 20, -1, true},   {"f01-plain", &five, 24, 30, -1, true},
      {"f02-kw4", &four, 20, 20, -1, false},    {"f03-kw5", &five, 22, 20, -1, true},
      {"f04-r1.9", &five, 38, 20, -1, true},    {"f05-r2.0", &five, 40, 20, -1, true},
      {"f06-r2.5", &five, 50, 20, -1, false},   {"f07-missing", &five, 20, 20, 7, false},
      {"f08-plain", &five, 16, 40, -1, true},   {"f09-plain", &five, 26, 14, -1, true},
      {"f10-plain", &five, 30, 30, -1, true},   {"f11-plain", &five, 10, 12, -1, true},
  };
  for (const auto& s : specs) {
    write_rect_font(root, s.id, *s.kw, s.w, s.h, s.missing);
    if (s.keep) c.expected_survivors.push_back(s.id);
  }
  std::sort(c.expected_survivors.begin(), c.expected_survivors.end());
  c.total = static_cast<int>(specs.size());
  return c;
}

std::shared_ptr<BertTextEncoder> make_desk_encoder(const fs::path& dir, const std::vector<std::string>& words,
                                                   std::uint64_t seed) {
  write_desk_encoder(dir, seed, words);
  return BertTextEncoder::load(dir);
}

std::vector<std::string> ToyFonts::vocabulary() const {
  std::vector<std::string> words;
  for (const auto& k : keywords) words.insert(words.end(), k.begin(), k.end());
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

ToyFonts toy_fonts(int n, std::uint64_t seed) {
  ToyFonts t;
  t.fonts = synthetic_fonts(n, seed);
  for (const auto& f : t.fonts) {
    t.ids.push_back(f.font_id);
    t.keywords.push_back(normalize_keywords(f.keywords));
    auto& g = t.glyphs.emplace_back();
    for (int l = 0; l < kNumLetters; ++l) g[static_cast<std::size_t>(l)] = preprocess_glyph(render_synthetic_glyph(letter_at(l), f.style));
  }
  return t;
}

fs::path fixture_dir() { return fs::path(GLYPHDM_FIXTURE_DIR); }

}  // namespace glyphdm::testing
