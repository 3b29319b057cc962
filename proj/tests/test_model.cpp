#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "omt/model.hpp"

using namespace omt;

TEST_CASE("marginal density is the exact linear mixture of the two groups") {
  MarginalMixture mix;
  mix.pi = 0.3;
  mix.null_components = {{0.6, 0.0, 1.0}, {0.4, 0.5, 2.0}};
  mix.alt_components = {{1.0, -2.0, 1.0}};
  mix.validate();
  for (double z = -8.0; z <= 8.0; z += 0.37) {
    const double lhs = mix.marginal_pdf(z);
    const double rhs = (1.0 - mix.pi) * mix.null_pdf(z) + mix.pi * mix.alt_pdf(z);
    CHECK(lhs == rhs); // bitwise: combined linearly by contract
  }
}

TEST_CASE("model validation rejects malformed parameters") {
  MarginalMixture bad_weights = simple_mixture(0.1, -2.0);
  bad_weights.null_components[0].weight = 0.9;
  CHECK_THROWS_AS(bad_weights.validate(), ConfigError);

  MarginalMixture bad_sd = simple_mixture(0.1, -2.0);
  bad_sd.alt_components[0].sd = 0.0;
  CHECK_THROWS_AS(bad_sd.validate(), ConfigError);

  MarginalMixture bad_pi = simple_mixture(1.5, -2.0);
  CHECK_THROWS_AS(bad_pi.validate(), ConfigError);

  TwoGroupModel m{5, simple_mixture(0.1, -2.0),
                  make_exchangeable_blocks({2, 2}, {0.2}, 1.0, 0.0, -2.0)};
  CHECK_THROWS_AS(m.validate(), ConfigError); // sizes sum to 4, not 5

  TwoGroupModel eq_bad{10, simple_mixture(0.1, -2.0),
                       Equicorrelated{-0.5, 1.0, -2.0}};
  CHECK_THROWS_AS(eq_bad.validate(), ConfigError); // rho <= -1/(k-1)

  TwoGroupModel eq_ok{10, simple_mixture(0.1, -2.0),
                      Equicorrelated{0.5, 1.0, -2.0}};
  CHECK_NOTHROW(eq_ok.validate());
}

TEST_CASE("non positive definite block covariance fails before sampling") {
  // constant off-diagonal 0.9 with diagonal 0.5 is indefinite for size 3
  TwoGroupModel m{3, simple_mixture(0.1, -2.0),
                  make_exchangeable_blocks({3}, {0.9}, 0.5, 0.0, -2.0)};
  CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("sampler reproduces the signal fraction") {
  TwoGroupModel m{1000, simple_mixture(0.3, -2.0), Independent{}};
  m.validate();
  Rng rng(11);
  const int reps = 100;
  long signals = 0;
  for (int r = 0; r < reps; ++r) {
    Sample s = sample(m, rng);
    for (int hi : s.h) signals += hi;
  }
  const double n = static_cast<double>(reps) * m.k;
  const double frac = signals / n;
  const double tol = 4.0 * std::sqrt(0.3 * 0.7 / n);
  CHECK(std::abs(frac - 0.3) < tol);
}

TEST_CASE("sampling is deterministic given the stream seed") {
  TwoGroupModel m{50, simple_mixture(0.2, -1.5), Equicorrelated{0.3, 1.0, -1.5}};
  m.validate();
  Rng r1(99), r2(99);
  Sample a = sample(m, r1), b = sample(m, r2);
  CHECK(a.h == b.h);
  CHECK(a.z == b.z);
}

namespace {

// empirical mean vector and covariance over draws of a fixed-k model
void empirical_moments(const TwoGroupModel& m, int reps, std::uint64_t seed,
                       std::vector<double>& mean,
                       std::vector<std::vector<double>>& cov) {
  const auto k = static_cast<std::size_t>(m.k);
  mean.assign(k, 0.0);
  cov.assign(k, std::vector<double>(k, 0.0));
  Rng rng(seed);
  std::vector<Sample> draws;
  draws.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) draws.push_back(sample(m, rng));
  for (const auto& s : draws)
    for (std::size_t i = 0; i < k; ++i) mean[i] += s.z[i] / reps;
  for (const auto& s : draws)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        cov[i][j] += (s.z[i] - mean[i]) * (s.z[j] - mean[j]) / (reps - 1);
}

} // namespace

TEST_CASE("equicorrelated sampler matches its target moments") {
  const double rho = 0.5, sigma2 = 2.0;
  TwoGroupModel m{3, simple_mixture(0.0, -2.0), Equicorrelated{rho, sigma2, -2.0}};
  m.validate();
  std::vector<double> mean;
  std::vector<std::vector<double>> cov;
  empirical_moments(m, 50000, 5, mean, cov);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(mean[i]) < 0.03);
    CHECK(cov[i][i] == Catch::Approx(sigma2).margin(0.08));
    for (int j = 0; j < 3; ++j)
      if (i != j) CHECK(cov[i][j] == Catch::Approx(sigma2 * rho).margin(0.08));
  }

  // negative correlation, admissible for k=3
  TwoGroupModel mn{3, simple_mixture(0.0, -2.0), Equicorrelated{-0.4, 2.0, -2.0}};
  mn.validate();
  empirical_moments(mn, 50000, 6, mean, cov);
  CHECK(cov[0][1] == Catch::Approx(-0.8).margin(0.08));
  CHECK(cov[0][0] == Catch::Approx(2.0).margin(0.08));
}

TEST_CASE("block sampler matches its target moments") {
  // all-signal model so the conditional moments are deterministic
  TwoGroupModel m{5, simple_mixture(1.0, -1.5, 1.0, std::sqrt(1.01)),
                  make_exchangeable_blocks({2, 3}, {0.5, 0.2}, 1.0, 0.01, -1.5)};
  m.validate();
  std::vector<double> mean;
  std::vector<std::vector<double>> cov;
  empirical_moments(m, 40000, 7, mean, cov);
  for (int i = 0; i < 5; ++i) {
    CHECK(mean[i] == Catch::Approx(-1.5).margin(0.03));
    CHECK(cov[i][i] == Catch::Approx(1.01).margin(0.05));
  }
  CHECK(cov[0][1] == Catch::Approx(0.5).margin(0.05));  // first block, rho 0.5
  CHECK(cov[2][3] == Catch::Approx(0.2).margin(0.05));  // second block, rho 0.2
  CHECK(cov[3][4] == Catch::Approx(0.2).margin(0.05));
  CHECK(cov[0][2] == Catch::Approx(0.0).margin(0.05));  // across blocks
  CHECK(cov[1][4] == Catch::Approx(0.0).margin(0.05));
}

TEST_CASE("independent sampler draws from the conditional mixtures") {
  // all-signal: z should concentrate around the alternative mean
  TwoGroupModel m{2000, simple_mixture(1.0, -2.0), Independent{}};
  m.validate();
  Rng rng(13);
  Sample s = sample(m, rng);
  double zbar = 0.0;
  for (double z : s.z) zbar += z / m.k;
  CHECK(zbar == Catch::Approx(-2.0).margin(4.0 / std::sqrt(2000.0)));
}
