#include "glyphdm/schedule.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace glyphdm {

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  }
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("build_linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("build_linear_schedule: require 0 < beta_start < beta_end < 1");
  }
  NoiseSchedule s;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.beta_.resize(T);
  s.alpha_.resize(T);
  s.alpha_bar_.resize(T);
  s.posterior_var_.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta_[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha_[i] = 1.0 - s.beta_[i];
    const double prev = prod;
    prod *= s.alpha_[i];
    s.alpha_bar_[i] = prod;
    s.posterior_var_[i] = (1.0 - prev) / (1.0 - prod) * s.beta_[i];
  }
  return s;
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", steps()}, {"beta_start", beta_start_}, {"beta_end", beta_end_}, {"schedule_type", "linear"}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& header) {
  const auto type = header.value("schedule_type", std::string("linear"));
  if (type != "linear") throw std::invalid_argument("unsupported schedule_type: " + type);
  return build_linear_schedule(header.at("T").get<int>(), header.at("beta_start").get<double>(),
                               header.at("beta_end").get<double>());
}

torch::Tensor gather_steps(const std::vector<double>& values, const torch::Tensor& t, int64_t ndim,
                           torch::ScalarType dtype) {
  const auto idx = t.to(torch::kLong).cpu();
  const auto n = static_cast<int64_t>(values.size());
  if (idx.numel() > 0 && (idx.min().item<int64_t>() < 1 || idx.max().item<int64_t>() > n)) {
    throw std::out_of_range("diffusion step outside 1.." + std::to_string(n));
  }
  auto table = torch::from_blob(const_cast<double*>(values.data()), {n}, torch::kFloat64);
  std::vector<int64_t> shape(static_cast<std::size_t>(ndim), 1);
  shape[0] = idx.numel();
  return table.index_select(0, idx - 1).to(dtype).reshape(shape).to(t.device());
}

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
  if (!x0.sizes().equals(eps.sizes())) throw std::invalid_argument("q_sample: eps must match x0 in shape");
  if (t < 1 || t > schedule.steps()) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(schedule.steps()));
  }
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
  if (!x0.sizes().equals(eps.sizes())) throw std::invalid_argument("q_sample: eps must match x0 in shape");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw std::invalid_argument("q_sample: t must have shape (B)");
  const auto ab = gather_steps(schedule.alpha_bars(), t, x0.dim(), torch::kFloat64);
  return (ab.sqrt().to(x0.scalar_type()) * x0) + ((1.0 - ab).sqrt().to(x0.scalar_type()) * eps);
}

torch::Tensor forward_chain_step(const torch::Tensor& x_prev, int t, const torch::Tensor& z,
                                 const NoiseSchedule& schedule) {
  if (!x_prev.sizes().equals(z.sizes())) throw std::invalid_argument("forward_chain_step: z must match x in shape");
  const double b = schedule.beta(t);
  return std::sqrt(1.0 - b) * x_prev + std::sqrt(b) * z;
}

std::vector<PosteriorCoefficients> posterior_constants(const NoiseSchedule& schedule) {
  std::vector<PosteriorCoefficients> out(static_cast<std::size_t>(schedule.steps()));
  for (int t = 1; t <= schedule.steps(); ++t) {
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t - 1);
    auto& c = out[static_cast<std::size_t>(t - 1)];
    c.coef_x0 = std::sqrt(ab_prev) * schedule.beta(t) / (1.0 - ab);
    c.coef_xt = std::sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    c.sigma = std::sqrt(schedule.posterior_variance(t));
  }
  return out;
}

}  // namespace glyphdm
