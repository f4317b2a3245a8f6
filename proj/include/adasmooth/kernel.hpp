// Truncated, renormalized isotropic 3D Gaussian filter with its analytic
// sigma-derivative, FWHM conversions, and the small-sigma degeneracy policies.
//
// The kernel is built from a single 1D table and assembled as an outer
// product, which makes the octahedral symmetry bit-exact and feeds the
// separable convolution path directly.

#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace adasmooth {

inline constexpr double kFwhmPerSigma = 2.3548200450309493;  // 2*sqrt(2*ln 2)

enum class RadiusConvention {
  kHalf,  // r = floor((t*sigma + 0.5)/2)
  kFull,   // r = floor(t*sigma + 0.5)
};

inline int kernel_radius(double sigma, double t,
                         RadiusConvention conv = RadiusConvention::kHalf) {
  const double s = t * sigma + 0.5;
  return static_cast<int>(std::floor(conv == RadiusConvention::kHalf ? s / 2.0 : s));
}

struct GaussianKernel {
  double sigma = 0.0;
  double truncation_t = 0.0;
  int radius = 0;
  // 1D factors over the integer grid [-r, r]; q = outer product of q1 with
  // itself over the three axes, dq_dsigma by the product rule.
  std::vector<double> q1;
  std::vector<double> dq1_dsigma;

  int extent() const { return 2 * radius + 1; }

  // The 1D table is even in x, so offsets are reduced to |offset| and sorted
  // before multiplying; the product order is then identical for every
  // octahedral image of (i,j,k) and the symmetry holds bit-for-bit.
  double q(int i, int j, int k) const {
    int a = std::abs(i), b = std::abs(j), c = std::abs(k);
    if (a > b) std::swap(a, b);
    if (b > c) std::swap(b, c);
    if (a > b) std::swap(a, b);
    return q1[a + radius] * q1[b + radius] * q1[c + radius];
  }

  double dq_dsigma(int i, int j, int k) const {
    int a = std::abs(i), b = std::abs(j), c = std::abs(k);
    if (a > b) std::swap(a, b);
    if (b > c) std::swap(b, c);
    if (a > b) std::swap(a, b);
    const double qa = q1[a + radius], qb = q1[b + radius], qc = q1[c + radius];
    return dq1_dsigma[a + radius] * qb * qc + qa * dq1_dsigma[b + radius] * qc +
           qa * qb * dq1_dsigma[c + radius];
  }

  double sum_q_squared() const {
    double s1 = 0.0;
    for (double v : q1) s1 += v * v;
    return s1 * s1 * s1;
  }
};

// Samples g(x,y,z;sigma) on the integer grid [-r,r]^3 and renormalizes to
// sum 1. The derivative treats the radius as locally constant and applies
// the quotient rule to the renormalization.
inline GaussianKernel build_kernel(double sigma, double t,
                                   RadiusConvention conv = RadiusConvention::kHalf) {
  if (!std::isfinite(sigma) || sigma <= 0.0)
    throw std::invalid_argument("build_kernel: sigma must be positive and finite");
  if (!(t > 0.0))
    throw std::invalid_argument("build_kernel: t must be positive");

  GaussianKernel k;
  k.sigma = sigma;
  k.truncation_t = t;
  k.radius = kernel_radius(sigma, t, conv);
  if (k.radius < 1)
    throw std::invalid_argument(
        "build_kernel: sigma yields a single-cell kernel (radius 0); "
        "apply a degeneracy policy first");

  const int n = k.extent();
  // Unnormalized 1D samples e(x) = exp(-x^2 / (2 sigma^2)); the Gaussian
  // prefactor cancels in the renormalization and in its derivative.
  std::vector<double> e(n), de(n);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const double inv_s3 = 1.0 / (sigma * sigma * sigma);
  for (int x = 0; x <= k.radius; ++x) {
    const double ex = std::exp(-static_cast<double>(x) * x * inv2s2);
    e[k.radius + x] = e[k.radius - x] = ex;
    const double dex = ex * static_cast<double>(x) * x * inv_s3;
    de[k.radius + x] = de[k.radius - x] = dex;
  }
  double s = 0.0, ds = 0.0;
  for (int i = 0; i < n; ++i) { s += e[i]; ds += de[i]; }

  k.q1.resize(n);
  k.dq1_dsigma.resize(n);
  const double inv_s = 1.0 / s;
  for (int i = 0; i < n; ++i) {
    k.q1[i] = e[i] * inv_s;
    k.dq1_dsigma[i] = (de[i] * s - e[i] * ds) * inv_s * inv_s;
  }
  return k;
}

// ---------------------------------------------------------------------------
// Degeneracy handling for sigma < 1.5/t (single-cell kernel, vanishing
// gradient).

enum class DegeneracyMode { kClip, kStochasticBump };

struct DegeneracyPolicy {
  DegeneracyMode mode = DegeneracyMode::kClip;
  double truncation_t = 4.0;
  double sigma_floor = 1.5 / 4.0 + 1e-6;  // clip mode; must keep radius >= 1
  double bump_prob = 0.1;                 // stochastic mode
  double bump_amount = 1.0;

  double threshold() const { return 1.5 / truncation_t; }

  void validate() const {
    if (mode == DegeneracyMode::kClip && sigma_floor < threshold())
      throw std::invalid_argument("DegeneracyPolicy: sigma_floor below 1.5/t");
    if (bump_prob < 0.0 || bump_prob > 1.0)
      throw std::invalid_argument("DegeneracyPolicy: bump probability outside [0,1]");
  }
};

inline DegeneracyPolicy make_clip_policy(double t, double floor_margin = 1e-6) {
  DegeneracyPolicy p;
  p.mode = DegeneracyMode::kClip;
  p.truncation_t = t;
  p.sigma_floor = 1.5 / t + floor_margin;
  return p;
}

template <typename Rng>
double apply_degeneracy_policy(double sigma, const DegeneracyPolicy& policy, Rng& rng) {
  policy.validate();
  if (policy.mode == DegeneracyMode::kClip)
    return std::max(sigma, policy.sigma_floor);
  if (sigma < policy.threshold()) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < policy.bump_prob) return sigma + policy.bump_amount;
  }
  return sigma;
}

// ---------------------------------------------------------------------------
// FWHM conversion (sigma in voxels, FWHM in mm)

inline double sigma_to_fwhm_mm(double sigma_voxels, double voxel_size_mm) {
  return sigma_voxels * kFwhmPerSigma * voxel_size_mm;
}

inline double fwhm_to_sigma(double fwhm_mm, double voxel_size_mm) {
  return fwhm_mm / (kFwhmPerSigma * voxel_size_mm);
}

}  // namespace adasmooth
