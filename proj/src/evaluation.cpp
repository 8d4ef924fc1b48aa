#include "glyphdm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>

#include <nlohmann/json.hpp>
#include <torch/script.h>

#include "glyphdm/hash.hpp"
#include "glyphdm/log.hpp"
#include "glyphdm/rng.hpp"

namespace glyphdm {

namespace fs = std::filesystem;
using nlohmann::json;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

json FeatureMoments::to_json() const {
  std::vector<double> m(mean.data(), mean.data() + mean.size());
  std::vector<double> c;
  c.reserve(static_cast<std::size_t>(cov.size()));
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) c.push_back(cov(i, j));
  return {{"n", n}, {"dim", dim()}, {"mean", m}, {"cov", c}};
}

FeatureMoments FeatureMoments::from_json(const json& j) {
  FeatureMoments out;
  out.n = j.at("n").get<int64_t>();
  const auto d = j.at("dim").get<Eigen::Index>();
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto c = j.at("cov").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(m.size()) != d || static_cast<Eigen::Index>(c.size()) != d * d) {
    throw std::runtime_error("feature moments: sizes disagree with dim");
  }
  out.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), d);
  out.cov = Eigen::Map<const RowMatrix>(c.data(), d, d);
  return out;
}

MomentAccumulator::MomentAccumulator(int64_t dim)
    : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::MatrixXd::Zero(dim, dim)) {
  if (dim <= 0) throw std::invalid_argument("moment accumulator: dim must be positive");
}

void MomentAccumulator::add(const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != mean_.size()) throw std::invalid_argument("moment accumulator: feature dimension mismatch");
  ++n_;
  const Eigen::VectorXd delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_.noalias() += delta * (x - mean_).transpose();
}

void MomentAccumulator::add_rows(const Eigen::Ref<const Eigen::MatrixXd>& rows) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) add(rows.row(i).transpose());
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
  if (other.dim() != dim()) throw std::invalid_argument("moment accumulator: cannot merge different dimensions");
  if (other.n_ == 0) return;
  if (n_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(other.n_), n = na + nb;
  const Eigen::VectorXd delta = other.mean_ - mean_;
  mean_ += delta * (nb / n);
  m2_ += other.m2_ + delta * delta.transpose() * (na * nb / n);
  n_ += other.n_;
}

FeatureMoments MomentAccumulator::moments() const {
  if (n_ < 2) throw std::invalid_argument("feature moments need at least 2 samples, got " + std::to_string(n_));
  FeatureMoments out;
  out.n = n_;
  out.mean = mean_;
  out.cov = m2_ / static_cast<double>(n_ - 1);
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

FeatureMoments batch_moments(const Eigen::Ref<const Eigen::MatrixXd>& rows) {
  if (rows.rows() < 2) throw std::invalid_argument("feature moments need at least 2 samples");
  FeatureMoments out;
  out.n = rows.rows();
  out.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centred = rows.rowwise() - out.mean.transpose();
  out.cov = centred.transpose() * centred / static_cast<double>(rows.rows() - 1);
  return out;
}

namespace {

constexpr double kEigenTolerance = 1e-8;

/// Eigenvalues of a symmetric PSD matrix with tiny negatives clamped to zero.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw std::runtime_error(std::string("FID: eigendecomposition failed for ") + what);
  if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < -kEigenTolerance) {
    throw std::runtime_error(std::string("FID: ") + what + " is not positive semidefinite (eigenvalue " +
                             std::to_string(es.eigenvalues().minCoeff()) + ")");
  }
  return es;
}

}  // namespace

double fid_from_moments(const FeatureMoments& a, const FeatureMoments& b) {
  if (a.dim() != b.dim() || a.cov.rows() != a.dim() || b.cov.rows() != b.dim()) {
    throw std::invalid_argument("FID: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                                std::to_string(b.dim()) + ")");
  }
  const auto ea = psd_eigen(a.cov, "covariance a");
  const Eigen::VectorXd root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
  const auto em = psd_eigen(sqrt_a * b.cov * sqrt_a, "covariance product");
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fid = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(fid)) throw std::runtime_error("FID: non-finite result");
  return std::max(fid, 0.0);
}

// --- extractors --------------------------------------------------------------

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& rows) {
  const auto r = rows.to(torch::kFloat64).contiguous();
  return Eigen::Map<const RowMatrix>(r.data_ptr<double>(), r.size(0), r.size(1));
}

void check_glyphs(const torch::Tensor& g) {
  if (g.dim() != 4 || g.size(1) != 1) throw std::invalid_argument("feature extractor: expected (N, 1, H, W) glyphs");
}

}  // namespace

RandomProjectionExtractor::RandomProjectionExtractor(int64_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw std::invalid_argument("random projection: dim must be positive");
  auto gen = make_generator(derive_seed(seed, "projection"));
  const int64_t in = kGlyphSize * kGlyphSize;
  weight_ = torch::randn({in, dim}, gen, torch::kFloat64) / std::sqrt(static_cast<double>(in));
}

Eigen::MatrixXd RandomProjectionExtractor::extract(const torch::Tensor& glyphs) const {
  check_glyphs(glyphs);
  const auto flat = glyphs.to(torch::kFloat64).reshape({glyphs.size(0), -1});
  if (flat.size(1) != weight_.size(0)) throw std::invalid_argument("random projection: expected 32x32 glyphs");
  return to_eigen(flat.matmul(weight_));
}

std::string RandomProjectionExtractor::id() const {
  return "random-projection:" + std::to_string(dim_) + ":" + std::to_string(seed_);
}

struct TorchScriptExtractor::Impl {
  torch::jit::script::Module module;
  std::mutex mutex;
};

TorchScriptExtractor::TorchScriptExtractor(const fs::path& path, int64_t input_size, int64_t batch)
    : impl_(std::make_unique<Impl>()), input_size_(input_size), batch_(batch) {
  if (input_size <= 0 || batch <= 0) throw std::invalid_argument("torchscript extractor: sizes must be positive");
  try {
    impl_->module = torch::jit::load(path.string());
  } catch (const c10::Error& e) {
    throw std::runtime_error("cannot load feature network " + path.string() + ": " + e.what_without_backtrace());
  }
  impl_->module.eval();
  id_ = "torchscript:" + sha256_file(path) + ":" + std::to_string(input_size);
  dim_ = extract(torch::zeros({1, 1, kGlyphSize, kGlyphSize})).cols();
}

TorchScriptExtractor::~TorchScriptExtractor() = default;

Eigen::MatrixXd TorchScriptExtractor::extract(const torch::Tensor& glyphs) const {
  check_glyphs(glyphs);
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < glyphs.size(0); s += batch_) {
    auto x = ((glyphs.slice(0, s, std::min(glyphs.size(0), s + batch_)).to(torch::kFloat32) + 1.0) * 0.5)
                 .expand({-1, 3, -1, -1});
    x = torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{input_size_, input_size_})
               .mode(torch::kBilinear)
               .align_corners(false));
    std::lock_guard lock(impl_->mutex);
    parts.push_back(impl_->module.forward({x}).toTensor().flatten(1));
  }
  return to_eigen(torch::cat(parts));
}

FeatureMoments extract_moments(const torch::Tensor& glyphs, const FeatureExtractor& extractor) {
  MomentAccumulator acc(extractor.dim());
  acc.add_rows(extractor.extract(glyphs));
  return acc.moments();
}

GlyphGenerator sampler_generator(std::shared_ptr<const GlyphSampler> sampler, SamplerConfig config) {
  static const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  return [sampler = std::move(sampler), config](const std::string& sentence, std::uint64_t seed) {
    auto c = config;
    c.seed = seed;
    return sampler->generate(alphabet, sentence, c, 1).squeeze(0);
  };
}

// --- reports -----------------------------------------------------------------

json FidReport::to_json() const {
  json j = {{"protocol", protocol}, {"seed", seed}, {"n", n}, {"fid", fid}};
  if (!per_keyword.empty()) {
    j["per_keyword"] = json::array();
    for (const auto& k : per_keyword) {
      j["per_keyword"].push_back({{"keyword", k.keyword}, {"real_fonts", k.real_fonts}, {"generated", k.generated}, {"fid", k.fid}});
    }
  }
  return j;
}

void FidReport::write_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "keyword,real_fonts,generated,fid\n";
  out.precision(10);
  for (const auto& k : per_keyword) out << k.keyword << ',' << k.real_fonts << ',' << k.generated << ',' << k.fid << '\n';
}

// --- protocols ---------------------------------------------------------------

std::vector<std::pair<std::string, int64_t>> keyword_counts(const Manifest& manifest) {
  std::map<std::string, int64_t> counts;
  for (const auto& f : manifest.fonts)
    for (const auto& k : f.keywords) ++counts[k];
  std::vector<std::pair<std::string, int64_t>> out(counts.begin(), counts.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

std::string manifest_hash(const Manifest& manifest) { return sha256_hex(manifest_to_json(manifest)); }

namespace {

torch::Tensor real_glyphs(const Manifest& manifest, const ManifestFont& font) {
  auto out = torch::empty({kNumLetters, 1, kGlyphSize, kGlyphSize});
  for (int l = 0; l < kNumLetters; ++l) {
    const auto g = manifest.load_glyph(font, l);
    std::copy(g.pixels.begin(), g.pixels.end(), out[l].data_ptr<float>());
  }
  return out;
}

FeatureMoments real_moments(const Manifest& manifest, const std::vector<const ManifestFont*>& fonts,
                            const FeatureExtractor& extractor, const EvalOptions& options, const std::string& tag) {
  std::string key_src = manifest_hash(manifest) + "\n" + extractor.id() + "\n" + tag;
  for (const auto* f : fonts) key_src += "\n" + f->font_id;
  const auto key = sha256_hex(key_src);
  std::optional<fs::path> cached;
  if (options.cache_dir) {
    cached = *options.cache_dir / ("real-" + key + ".json");
    if (fs::exists(*cached)) {
      std::ifstream in(*cached);
      return FeatureMoments::from_json(json::parse(in));
    }
  }
  MomentAccumulator acc(extractor.dim());
  for (const auto* f : fonts) acc.add_rows(extractor.extract(real_glyphs(manifest, *f)));
  auto m = acc.moments();
  if (cached) {
    fs::create_directories(*options.cache_dir);
    const auto tmp = fs::path(cached->string() + ".tmp");
    std::ofstream(tmp) << m.to_json().dump() << '\n';
    fs::rename(tmp, *cached);
  }
  return m;
}

torch::Tensor checked_generate(const GlyphGenerator& generate, const std::string& sentence, std::uint64_t seed) {
  auto g = generate(sentence, seed);
  if (g.dim() != 4 || g.size(0) != kNumLetters || g.size(1) != 1) {
    throw std::runtime_error("generator must return (26, 1, H, W) images");
  }
  return g;
}

}  // namespace

FidReport protocol_global_fid(const Manifest& manifest, const FeatureExtractor& extractor,
                              const GlyphGenerator& generate, int64_t n_fonts, const EvalOptions& options) {
  const auto total = static_cast<int64_t>(manifest.fonts.size());
  if (n_fonts <= 0) throw std::invalid_argument("n_fonts must be positive");
  if (n_fonts > total) {
    throw std::invalid_argument("n_fonts " + std::to_string(n_fonts) + " exceeds the corpus (" + std::to_string(total) + " fonts)");
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  StableRng rng(derive_seed(options.seed, "eval_select"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<const ManifestFont*> chosen;
  for (int64_t i = 0; i < n_fonts; ++i) chosen.push_back(&manifest.fonts[order[static_cast<std::size_t>(i)]]);

  const auto real = real_moments(manifest, chosen, extractor, options, "global");
  MomentAccumulator gen(extractor.dim());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const auto sentence = keywords_to_sentence(chosen[i]->keywords);
    gen.add_rows(extractor.extract(checked_generate(generate, sentence, derive_seed(options.seed, "eval_sample", i))));
    if ((i + 1) % 100 == 0) log::info("global FID: generated " + std::to_string(i + 1) + "/" + std::to_string(chosen.size()) + " fonts");
  }
  FidReport report;
  report.protocol = "global_fid";
  report.seed = options.seed;
  report.n = gen.count();
  report.fid = fid_from_moments(real, gen.moments());
  return report;
}

FidReport protocol_intra_fid(const Manifest& manifest, const FeatureExtractor& extractor,
                             const GlyphGenerator& generate, int64_t min_fonts, const EvalOptions& options,
                             int64_t samples_per_keyword) {
  if (min_fonts < 0) throw std::invalid_argument("min_fonts must be non-negative");
  if (samples_per_keyword <= 0) throw std::invalid_argument("samples_per_keyword must be positive");
  std::vector<std::string> keywords;
  for (const auto& [k, c] : keyword_counts(manifest))
    if (c > min_fonts) keywords.push_back(k);
  if (keywords.empty()) throw std::invalid_argument("no keyword is carried by more than " + std::to_string(min_fonts) + " fonts");
  std::sort(keywords.begin(), keywords.end());

  FidReport report;
  report.protocol = "intra_fid";
  report.seed = options.seed;
  double sum = 0.0;
  for (const auto& kw : keywords) {
    std::vector<const ManifestFont*> fonts;
    for (const auto& f : manifest.fonts)
      if (std::find(f.keywords.begin(), f.keywords.end(), kw) != f.keywords.end()) fonts.push_back(&f);
    const auto real = real_moments(manifest, fonts, extractor, options, "keyword:" + kw);
    MomentAccumulator gen(extractor.dim());
    for (int64_t j = 0; j < samples_per_keyword; ++j) {
      gen.add_rows(extractor.extract(
          checked_generate(generate, kw, derive_seed(options.seed, "intra:" + kw, static_cast<std::uint64_t>(j)))));
    }
    KeywordFid row{kw, static_cast<int64_t>(fonts.size()), gen.count(), fid_from_moments(real, gen.moments())};
    log::info("intra-FID '" + kw + "': " + std::to_string(row.fid));
    sum += row.fid;
    report.n += row.generated;
    report.per_keyword.push_back(row);
  }
  report.fid = sum / static_cast<double>(report.per_keyword.size());
  return report;
}

}  // namespace glyphdm
