#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/types.h>

namespace glyphdm {

/// Linear DDPM variance schedule and its derived constants. The public
/// accessors take 1-based steps t in {1..T}; alpha_bar(0) is defined as 1.
class NoiseSchedule {
public:
  NoiseSchedule() = default;

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_.at(index(t)); }
  double alpha(int t) const { return alpha_.at(index(t)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(index(t)); }
  double posterior_variance(int t) const { return posterior_var_.at(index(t)); }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  const std::vector<double>& posterior_variances() const { return posterior_var_; }

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& header);

  friend NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end);

private:
  std::size_t index(int t) const;

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> posterior_var_;
};

inline constexpr int kTrainSteps = 1000;
inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 0.02;

NoiseSchedule build_linear_schedule(int T = kTrainSteps, double beta_start = kBetaStart, double beta_end = kBetaEnd);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& schedule);
/// Per-item steps: `t` is an int64 tensor of shape (B) indexing the leading dim of x0.
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

/// One Markov step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z.
torch::Tensor forward_chain_step(const torch::Tensor& x_prev, int t, const torch::Tensor& z,
                                 const NoiseSchedule& schedule);

/// q(x_{t-1} | x_t, x0) = N(coef_x0 x0 + coef_xt x_t, sigma^2), sigma^2 = posterior variance.
struct PosteriorCoefficients {
  double coef_x0 = 0.0;
  double coef_xt = 0.0;
  double sigma = 0.0;
};

std::vector<PosteriorCoefficients> posterior_constants(const NoiseSchedule& schedule);

/// Per-item lookup of a 1-based schedule quantity, broadcastable against a (B, ...) tensor.
torch::Tensor gather_steps(const std::vector<double>& values, const torch::Tensor& t, int64_t ndim,
                           torch::ScalarType dtype);

}  // namespace glyphdm
