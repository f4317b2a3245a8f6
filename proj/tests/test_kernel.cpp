#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "adasmooth/kernel.hpp"

using namespace adasmooth;

namespace {

// Independent direct 3D construction: sample the Gaussian on the full
// grid and renormalize, no separability shortcut.
std::vector<double> direct_kernel(double sigma, int r) {
  const int n = 2 * r + 1;
  std::vector<double> q(static_cast<std::size_t>(n) * n * n);
  double sum = 0.0;
  const double norm = 1.0 / std::pow(std::sqrt(2.0 * M_PI) * sigma, 3.0);
  for (int i = -r; i <= r; ++i)
    for (int j = -r; j <= r; ++j)
      for (int k = -r; k <= r; ++k) {
        const double g =
            norm * std::exp(-(i * i + j * j + k * k) / (2.0 * sigma * sigma));
        q[((i + r) * static_cast<std::size_t>(n) + (j + r)) * n + (k + r)] = g;
        sum += g;
      }
  for (double& v : q) v /= sum;
  return q;
}

}  // namespace

TEST_CASE("radius formula matches the printed floor expression") {
  CHECK(kernel_radius(1.0, 4.0) == 2);  // floor(4.5/2)
  CHECK(kernel_radius(0.37, 4.0) == 0);
  CHECK(kernel_radius(1.0, 4.0, RadiusConvention::kFull) == 4);
}

TEST_CASE("sigma below 1.5/t is rejected as a single-cell kernel") {
  CHECK_THROWS_AS(build_kernel(0.37, 4.0), std::invalid_argument);
  CHECK_THROWS_AS(build_kernel(std::numeric_limits<double>::quiet_NaN(), 4.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_kernel(-1.0, 4.0), std::invalid_argument);
}

TEST_CASE("kernel invariants over a sigma sweep") {
  for (double sigma : {0.5, 0.8, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0}) {
    const GaussianKernel k = build_kernel(sigma, 4.0);
    const int r = k.radius;
    CHECK(r == kernel_radius(sigma, 4.0));

    double sum_q = 0.0, sum_dq = 0.0;
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j)
        for (int l = -r; l <= r; ++l) {
          sum_q += k.q(i, j, l);
          sum_dq += k.dq_dsigma(i, j, l);
          // Octahedral symmetry, exact by construction.
          CHECK(k.q(i, j, l) == k.q(-i, j, l));
          CHECK(k.q(i, j, l) == k.q(j, i, l));
          CHECK(k.q(i, j, l) == k.q(l, j, i));
        }
    CHECK(std::abs(sum_q - 1.0) < 1e-12);
    CHECK(std::abs(sum_dq) < 1e-10);

    // Separability: assembled kernel vs direct 3D sampling.
    const auto direct = direct_kernel(sigma, r);
    const int n = k.extent();
    double max_dev = 0.0;
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j)
        for (int l = -r; l <= r; ++l)
          max_dev = std::max(
              max_dev,
              std::abs(k.q(i, j, l) -
                       direct[((i + r) * static_cast<std::size_t>(n) + (j + r)) * n +
                              (l + r)]));
    CHECK(max_dev < 1e-14);
  }
}

TEST_CASE("dq/dsigma matches central finite differences at fixed radius") {
  const double t = 4.0, h = 1e-5;
  for (double sigma : {0.8, 1.0, 1.5, 2.0, 3.0}) {
    const GaussianKernel k = build_kernel(sigma, t);
    GaussianKernel up = build_kernel(sigma + h, t);
    GaussianKernel down = build_kernel(sigma - h, t);
    REQUIRE(up.radius == k.radius);  // sigma chosen away from radius jumps
    REQUIRE(down.radius == k.radius);
    const int r = k.radius;
    for (int i = -r; i <= r; ++i)
      for (int j = -r; j <= r; ++j)
        for (int l = -r; l <= r; ++l) {
          const double fd = (up.q(i, j, l) - down.q(i, j, l)) / (2.0 * h);
          const double an = k.dq_dsigma(i, j, l);
          const double denom = std::max({std::abs(fd), std::abs(an), 1e-12});
          CHECK(std::abs(an - fd) / denom < 1e-5);
        }
  }
}

TEST_CASE("kernel variance is strictly increasing in sigma") {
  double previous = -1.0;
  for (double sigma : {0.5, 0.8, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0}) {
    const GaussianKernel k = build_kernel(sigma, 4.0);
    double variance = 0.0;
    for (int i = -k.radius; i <= k.radius; ++i)
      for (int j = -k.radius; j <= k.radius; ++j)
        for (int l = -k.radius; l <= k.radius; ++l)
          variance += (i * i + j * j + l * l) * k.q(i, j, l);
    CHECK(variance > previous);
    previous = variance;
  }
}

TEST_CASE("clip policy enforces the floor and leaves large sigma alone") {
  DegeneracyPolicy policy = make_clip_policy(4.0);
  policy.sigma_floor = 0.5;
  std::mt19937_64 rng(1);
  CHECK(apply_degeneracy_policy(0.2, policy, rng) == 0.5);
  CHECK(apply_degeneracy_policy(2.0, policy, rng) == 2.0);
}

TEST_CASE("stochastic bump fires with the configured probability") {
  DegeneracyPolicy policy;
  policy.mode = DegeneracyMode::kStochasticBump;
  policy.truncation_t = 4.0;
  policy.bump_prob = 0.1;
  std::mt19937_64 rng(42);
  int bumps = 0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i)
    if (apply_degeneracy_policy(0.2, policy, rng) > 0.2) ++bumps;
  const double freq = static_cast<double>(bumps) / trials;
  CHECK(std::abs(freq - 0.1) < 0.01);
  // Above the threshold the bump never fires.
  CHECK(apply_degeneracy_policy(2.0, policy, rng) == 2.0);
}

TEST_CASE("FWHM conversion closed forms and round trip") {
  CHECK(sigma_to_fwhm_mm(1.0, 1.0) == Catch::Approx(2.3548200450309493).epsilon(1e-12));
  CHECK(sigma_to_fwhm_mm(1.0, 3.0) == Catch::Approx(7.064460135092848).epsilon(1e-12));
  CHECK(fwhm_to_sigma(8.0, 3.0) == Catch::Approx(8.0 / (3.0 * 2.3548200450309493)));
  CHECK(fwhm_to_sigma(2.3548200450309493, 1.0) == Catch::Approx(1.0).epsilon(1e-12));
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int i = 0; i < 50; ++i) {
    const double s = u(rng), vox = u(rng);
    CHECK(fwhm_to_sigma(sigma_to_fwhm_mm(s, vox), vox) == Catch::Approx(s).epsilon(1e-12));
  }
}
