#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "glyphdm/rng.hpp"
#include "glyphdm/schedule.hpp"

using namespace glyphdm;

namespace {

long double reference_alpha_bar(int t, int T = 1000) {
  long double prod = 1.0L;
  for (int s = 1; s <= t; ++s) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(s - 1) / static_cast<long double>(T - 1);
    prod *= 1.0L - beta;
  }
  return prod;
}

}  // namespace

TEST(Schedule, LinearEndpointsAndProduct) {
  const auto s = build_linear_schedule();
  EXPECT_EQ(s.steps(), 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_NEAR(s.beta(1000), 0.02, 1e-15);
  for (int t : {1, 10, 500, 999, 1000}) {
    const double ref = static_cast<double>(reference_alpha_bar(t));
    EXPECT_NEAR(s.alpha_bar(t) / ref, 1.0, 1e-12) << "t=" << t;
  }
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 1.0);
  EXPECT_THROW(s.beta(0), std::out_of_range);
  EXPECT_THROW(s.beta(1001), std::out_of_range);
}

TEST(Schedule, MonotoneAndPosteriorBounded) {
  const auto s = build_linear_schedule();
  for (int t = 2; t <= s.steps(); ++t) {
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_LE(s.posterior_variance(t), s.beta(t));
  }
  EXPECT_DOUBLE_EQ(s.posterior_variance(1), 0.0);
}

TEST(Schedule, PosteriorMatchesGaussianProduct) {
  // q(x_{t-1}|x_0) N(sqrt(ab') x0, 1-ab') times q(x_t|x_{t-1}) N(sqrt(a) x_{t-1}, b), solved directly.
  const auto s = build_linear_schedule();
  const auto c = posterior_constants(s);
  for (int t : {2, 3, 50, 700, 1000}) {
    const double ab_prev = s.alpha_bar(t - 1), a = s.alpha(t), b = s.beta(t);
    const double precision = 1.0 / (1.0 - ab_prev) + a / b;
    const double var = 1.0 / precision;
    EXPECT_NEAR(c[t - 1].coef_x0, var * std::sqrt(ab_prev) / (1.0 - ab_prev), 1e-12);
    EXPECT_NEAR(c[t - 1].coef_xt, var * std::sqrt(a) / b, 1e-12);
    EXPECT_NEAR(c[t - 1].sigma * c[t - 1].sigma, var, 1e-14);
  }
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = build_linear_schedule(50, 1e-3, 0.05);
  const auto j = s.to_json();
  EXPECT_EQ(j.at("T"), 50);
  EXPECT_EQ(j.at("schedule_type"), "linear");
  const auto r = NoiseSchedule::from_json(j);
  EXPECT_EQ(r.betas(), s.betas());
  auto bad = j;
  bad["schedule_type"] = "cosine";
  EXPECT_ANY_THROW(NoiseSchedule::from_json(bad));
}

TEST(Schedule, QSampleClosedForm) {
  const auto s = build_linear_schedule();
  const auto x0 = torch::linspace(-1, 1, 16).reshape({1, 1, 4, 4});
  const auto eps = torch::ones_like(x0);
  const auto x = q_sample(x0, 300, eps, s);
  const auto expected = std::sqrt(s.alpha_bar(300)) * x0 + std::sqrt(1 - s.alpha_bar(300)) * eps;
  EXPECT_TRUE(torch::allclose(x, expected, 1e-6, 1e-7));
  EXPECT_THROW(q_sample(x0, 0, eps, s), std::out_of_range);
  EXPECT_THROW(q_sample(x0, 1001, eps, s), std::out_of_range);

  const auto xb = torch::cat({x0, x0});
  const auto t = torch::tensor({1, 1000}, torch::kLong);
  const auto per_item = q_sample(xb, t, torch::cat({eps, eps}), s);
  EXPECT_TRUE(torch::allclose(per_item[1], q_sample(x0, 1000, eps, s)[0], 1e-6, 1e-7));
  EXPECT_TRUE(torch::allclose(per_item[0], q_sample(x0, 1, eps, s)[0], 1e-6, 1e-7));
}

TEST(Schedule, ForwardChainMatchesClosedFormInDistribution) {
  // Monte-Carlo: compose single steps up to t and compare moments to the closed form.
  const auto s = build_linear_schedule();
  const int t = 40, n = 4000;
  auto gen = make_generator(17);
  const auto x0 = torch::linspace(-1, 1, 4).reshape({1, 4}).expand({n, 4}).to(torch::kFloat64);
  auto x = x0.clone();
  for (int k = 1; k <= t; ++k) x = forward_chain_step(x, k, torch::randn(x.sizes(), gen, torch::kFloat64), s);
  const double ab = s.alpha_bar(t);
  const auto mean = x.mean(0), var = x.var(0);
  const auto expected_mean = std::sqrt(ab) * x0[0];
  const double sd = std::sqrt(1 - ab);
  EXPECT_LT((mean - expected_mean).abs().max().item<double>(), 3 * sd / std::sqrt(double(n)));
  // standard error of a Gaussian sample variance: sigma^2 sqrt(2 / (n-1))
  EXPECT_LT((var - (1 - ab)).abs().max().item<double>(), 3 * (1 - ab) * std::sqrt(2.0 / (n - 1)));
}
