#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "glyphdm/dataset.hpp"
#include "glyphdm/diffusion.hpp"

namespace glyphdm {

struct FeatureMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // sample covariance (n - 1 denominator)
  int64_t n = 0;

  int64_t dim() const { return mean.size(); }
  nlohmann::json to_json() const;
  static FeatureMoments from_json(const nlohmann::json& j);
};

/// Single-pass mean and co-moment accumulation (Welford), mergeable with the
/// pairwise update of Chan et al., so partial results combine in any order.
class MomentAccumulator {
public:
  explicit MomentAccumulator(int64_t dim);

  void add(const Eigen::Ref<const Eigen::VectorXd>& x);
  /// Rows are observations.
  void add_rows(const Eigen::Ref<const Eigen::MatrixXd>& rows);
  void merge(const MomentAccumulator& other);

  int64_t count() const { return n_; }
  int64_t dim() const { return mean_.size(); }
  /// Throws when fewer than two observations were added.
  FeatureMoments moments() const;

private:
  int64_t n_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

/// Two-pass reference: mean first, then centred outer products.
FeatureMoments batch_moments(const Eigen::Ref<const Eigen::MatrixXd>& rows);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), via symmetric
/// eigendecompositions; eigenvalues in (-1e-8, 0) are clamped to zero.
double fid_from_moments(const FeatureMoments& a, const FeatureMoments& b);

/// Maps glyph batches (N, 1, 32, 32) in [-1, 1] to feature rows.
class FeatureExtractor {
public:
  virtual ~FeatureExtractor() = default;
  virtual int64_t dim() const = 0;
  virtual Eigen::MatrixXd extract(const torch::Tensor& glyphs) const = 0;
  /// Stable identifier, part of real-moment cache keys.
  virtual std::string id() const = 0;
};

/// Fixed Gaussian projection of the flattened glyph, N(0, 1/1024) entries.
class RandomProjectionExtractor : public FeatureExtractor {
public:
  explicit RandomProjectionExtractor(int64_t dim = 16, std::uint64_t seed = 0);
  int64_t dim() const override { return dim_; }
  Eigen::MatrixXd extract(const torch::Tensor& glyphs) const override;
  std::string id() const override;

private:
  int64_t dim_;
  std::uint64_t seed_;
  torch::Tensor weight_;  // (1024, dim) float64
};

/// Loads a TorchScript feature network (e.g. an exported InceptionV3 pool
/// layer). Glyphs are mapped to [0, 1], replicated to 3 channels and bilinearly
/// resized to `input_size` before the forward pass; the output is flattened per image.
class TorchScriptExtractor : public FeatureExtractor {
public:
  TorchScriptExtractor(const std::filesystem::path& path, int64_t input_size = 299, int64_t batch = 64);
  ~TorchScriptExtractor() override;
  int64_t dim() const override { return dim_; }
  Eigen::MatrixXd extract(const torch::Tensor& glyphs) const override;
  std::string id() const override { return id_; }

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int64_t input_size_, batch_, dim_ = 0;
  std::string id_;
};

FeatureMoments extract_moments(const torch::Tensor& glyphs, const FeatureExtractor& extractor);

/// Images (26, 1, 32, 32) for one conditioning sentence and seed.
using GlyphGenerator = std::function<torch::Tensor(const std::string& sentence, std::uint64_t seed)>;

/// All 26 letters per call through the shared sampler.
GlyphGenerator sampler_generator(std::shared_ptr<const GlyphSampler> sampler, SamplerConfig config);

struct KeywordFid {
  std::string keyword;
  int64_t real_fonts = 0;
  int64_t generated = 0;
  double fid = 0.0;
};

struct FidReport {
  std::string protocol;  // "global_fid" or "intra_fid"
  std::uint64_t seed = 0;
  int64_t n = 0;  // generated images (intra: summed over keywords)
  double fid = 0.0;
  std::vector<KeywordFid> per_keyword;

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct EvalOptions {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> cache_dir;  // real-moment cache
};

/// Picks `n_fonts` fonts from every split by seed, generates their 26 letters from
/// their full keyword sentence and compares against the same fonts' real glyphs.
FidReport protocol_global_fid(const Manifest& manifest, const FeatureExtractor& extractor,
                              const GlyphGenerator& generate, int64_t n_fonts, const EvalOptions& options);

/// Keywords carried by more than `min_fonts` fonts; per keyword, `samples_per_keyword`
/// x 26 images conditioned on that keyword alone, against the real glyphs of its fonts.
FidReport protocol_intra_fid(const Manifest& manifest, const FeatureExtractor& extractor,
                             const GlyphGenerator& generate, int64_t min_fonts, const EvalOptions& options,
                             int64_t samples_per_keyword = 200);

/// Keyword -> number of fonts carrying it, over every split.
std::vector<std::pair<std::string, int64_t>> keyword_counts(const Manifest& manifest);

/// Hash of the manifest's canonical serialization.
std::string manifest_hash(const Manifest& manifest);

}  // namespace glyphdm
