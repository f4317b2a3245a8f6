// Gradient-check harness: builds small random problems and compares every
// analytic gradient path against central finite differences. Sigma paths
// within 0.05 of a kernel radius jump are excluded with a notice, since the
// analytic derivative holds the radius fixed.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "adasmooth/objective.hpp"
#include "adasmooth/paramnet.hpp"
#include "adasmooth/smooth.hpp"
#include "adasmooth/trainer.hpp"

namespace adasmooth {

struct GradCheckPath {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  bool excluded = false;
  std::string note;
};

struct GradCheckReport {
  std::vector<GradCheckPath> paths;

  bool all_passed() const {
    for (const auto& p : paths)
      if (!p.excluded && !p.passed) return false;
    return true;
  }
};

namespace gradcheck_detail {

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Distance from sigma to the nearest radius-jump point (t*s + 0.5)/2 = k.
inline double jump_distance(double sigma, double t) {
  const double s = (t * sigma + 0.5) / 2.0;
  return std::abs(s - std::round(s)) * 2.0 / t;
}

inline Volume3D random_volume(Dims3 dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Volume3D v(dims, 3.0);
  for (double& x : v.data()) x = u(rng);
  return v;
}

}  // namespace gradcheck_detail

inline GradCheckReport gradient_check(const TrainConfig& config, std::uint64_t seed,
                                      double sigma_probe = 1.2) {
  using gradcheck_detail::jump_distance;
  using gradcheck_detail::random_volume;
  using gradcheck_detail::rel_err;

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  const Dims3 dims{8, 8, 8};
  const double t = config.t;
  constexpr double kJumpMargin = 0.05;
  constexpr double kSigmaTol = 1e-3;
  constexpr double kLinearTol = 1e-4;

  // --- kernel-sigma path: L(sigma) = <u, x * q(sigma)> -------------------
  {
    GradCheckPath path{.name = "kernel_sigma", .tolerance = kSigmaTol};
    if (jump_distance(sigma_probe, t) < kJumpMargin) {
      path.excluded = true;
      path.note = "sigma within 0.05 of a radius jump; analytic derivative "
                  "holds the radius fixed";
    } else {
      const Volume3D x = random_volume(dims, rng);
      const Volume3D u = random_volume(dims, rng);
      auto loss = [&](double s) {
        const SmoothOutput out = smooth_volume(x, build_kernel(s, t, config.radius_convention));
        double acc = 0.0;
        for (std::size_t i = 0; i < u.data().size(); ++i)
          acc += u.data()[i] * out.z.data()[i];
        return acc;
      };
      const double h = 1e-5;
      const double numeric = (loss(sigma_probe + h) - loss(sigma_probe - h)) / (2.0 * h);
      const double analytic = smooth_backward_sigma(
          x, build_kernel(sigma_probe, t, config.radius_convention), u);
      path.max_rel_err = rel_err(analytic, numeric);
      path.passed = path.max_rel_err < path.tolerance;
    }
    report.paths.push_back(path);
  }

  // --- paramnet W/b, direct (sigma as the scalar output) -----------------
  {
    GradCheckPath path{.name = "paramnet_linear", .tolerance = kLinearTol};
    const Volume3D x = random_volume(dims, rng);
    const Volume3D reference = random_volume(dims, rng);
    ParamNetWeights weights = init_weights(reference, seed + 1);
    const ParamNetTape tape = paramnet_forward(x, weights);
    const ParamNetGradient analytic = paramnet_backward(tape, weights, 1.0);
    const double h = 1e-5;
    for (std::size_t k = 0; k < weights.w.size(); ++k) {
      ParamNetWeights w2 = weights;
      w2.w[k] += h;
      const double up = paramnet_forward(x, w2).sigma;
      w2.w[k] -= 2.0 * h;
      const double down = paramnet_forward(x, w2).sigma;
      path.max_rel_err =
          std::max(path.max_rel_err, rel_err(analytic.dw[k], (up - down) / (2.0 * h)));
    }
    {
      ParamNetWeights w2 = weights;
      w2.b += h;
      const double up = paramnet_forward(x, w2).sigma;
      w2.b -= 2.0 * h;
      const double down = paramnet_forward(x, w2).sigma;
      path.max_rel_err =
          std::max(path.max_rel_err, rel_err(analytic.db, (up - down) / (2.0 * h)));
    }
    path.passed = path.max_rel_err < path.tolerance;
    report.paths.push_back(path);
  }

  // --- paramnet W/b end-to-end through the variability loss ---------------
  {
    GradCheckPath path{.name = "paramnet_through_loss", .tolerance = kSigmaTol};
    std::vector<Volume3D> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_volume(dims, rng));
    Volume3D reference(dims, 3.0);
    for (const auto& v : batch)
      for (std::size_t i = 0; i < reference.data().size(); ++i)
        reference.data()[i] += v.data()[i] / 3.0;
    const ParamNetWeights weights = init_weights(reference, seed + 2);

    auto forward_sigma = [&](const ParamNetWeights& w, const Volume3D& x) {
      return paramnet_forward(x, w).sigma;
    };
    auto loss = [&](const ParamNetWeights& w, double* min_jump = nullptr) {
      std::vector<double> sigmas;
      std::vector<SmoothOutput> smoothed;
      for (const auto& x : batch) {
        const double s = std::max(forward_sigma(w, x), config.degeneracy.sigma_floor);
        if (min_jump) *min_jump = std::min(*min_jump, jump_distance(s, t));
        sigmas.push_back(s);
        smoothed.push_back(smooth_volume(x, build_kernel(s, t, config.radius_convention)));
      }
      return variability_loss(batch, sigmas, smoothed, config.lambda).total;
    };

    double min_jump = 1.0;
    loss(weights, &min_jump);
    if (min_jump < kJumpMargin) {
      path.excluded = true;
      path.note = "a batch sigma lies within 0.05 of a radius jump";
    } else {
      // Analytic: variability-loss backward chained through the paramnet.
      std::vector<double> sigmas;
      std::vector<SmoothOutput> smoothed;
      std::vector<ParamNetTape> tapes;
      for (const auto& x : batch) {
        tapes.push_back(paramnet_forward(x, weights));
        const double s = std::max(tapes.back().sigma, config.degeneracy.sigma_floor);
        sigmas.push_back(s);
        smoothed.push_back(smooth_volume(x, build_kernel(s, t, config.radius_convention)));
      }
      const std::vector<double> dL_dsigma =
          variability_loss_backward(batch, sigmas, smoothed, config.lambda);
      std::vector<double> dw(weights.w.size(), 0.0);
      double db = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (sigmas[i] != tapes[i].sigma) continue;  // clipped: zero gradient
        const ParamNetGradient g = paramnet_backward(tapes[i], weights, dL_dsigma[i]);
        for (std::size_t k = 0; k < dw.size(); ++k) dw[k] += g.dw[k];
        db += g.db;
      }
      const double h = 1e-5;
      for (std::size_t k = 0; k < weights.w.size(); ++k) {
        ParamNetWeights w2 = weights;
        w2.w[k] += h;
        const double up = loss(w2);
        w2.w[k] -= 2.0 * h;
        const double down = loss(w2);
        path.max_rel_err =
            std::max(path.max_rel_err, rel_err(dw[k], (up - down) / (2.0 * h)));
      }
      ParamNetWeights w2 = weights;
      w2.b += h;
      const double up = loss(w2);
      w2.b -= 2.0 * h;
      const double down = loss(w2);
      path.max_rel_err = std::max(path.max_rel_err, rel_err(db, (up - down) / (2.0 * h)));
      path.passed = path.max_rel_err < path.tolerance;
    }
    report.paths.push_back(path);
  }

  // --- decoder v/c through normalization + BCE ----------------------------
  {
    GradCheckPath path{.name = "decoder_linear", .tolerance = kLinearTol};
    std::vector<Volume3D> batch;
    std::vector<double> labels;
    for (int i = 0; i < 6; ++i) {
      batch.push_back(random_volume(dims, rng));
      labels.push_back(i % 2 ? 1.0 : 0.0);
    }
    DecoderWeights dec = init_decoder(dims, seed + 3);
    const DecoderTape tape = decoder_forward(batch, dec);
    const DecoderGradient analytic = bce_backward(batch, dec, tape, labels);
    auto loss = [&](const DecoderWeights& d) {
      return bce_loss(decoder_forward(batch, d).probs, labels);
    };
    const double h = 1e-6;
    std::uniform_int_distribution<std::size_t> pick(0, dec.v.size() - 1);
    for (int s = 0; s < 20; ++s) {
      const std::size_t k = pick(rng);
      DecoderWeights d2 = dec;
      d2.v[k] += h;
      const double up = loss(d2);
      d2.v[k] -= 2.0 * h;
      const double down = loss(d2);
      path.max_rel_err =
          std::max(path.max_rel_err, rel_err(analytic.dv[k], (up - down) / (2.0 * h)));
    }
    // dc through the normalization is identically zero (a constant shift of
    // all pre-activations cancels); verify that numerically.
    DecoderWeights d2 = dec;
    d2.c += h;
    const double up = loss(d2);
    d2.c -= 2.0 * h;
    const double down = loss(d2);
    const double fd_dc = (up - down) / (2.0 * h);
    path.max_rel_err =
        std::max(path.max_rel_err, std::abs(analytic.dc - fd_dc) < 1e-6
                                       ? 0.0
                                       : rel_err(analytic.dc, fd_dc));
    path.passed = path.max_rel_err < path.tolerance;
    report.paths.push_back(path);
  }

  // --- input path: adjoint of the smoothing ------------------------------
  {
    GradCheckPath path{.name = "smooth_input", .tolerance = kLinearTol};
    const Volume3D x = random_volume(dims, rng);
    const Volume3D u = random_volume(dims, rng);
    const GaussianKernel kernel = build_kernel(1.0, t, config.radius_convention);
    const Volume3D analytic = smooth_backward_input(kernel, u);
    auto loss = [&](const Volume3D& input) {
      const SmoothOutput out = smooth_volume(input, kernel);
      double acc = 0.0;
      for (std::size_t i = 0; i < u.data().size(); ++i)
        acc += u.data()[i] * out.z.data()[i];
      return acc;
    };
    const double h = 1e-5;
    std::uniform_int_distribution<std::size_t> pick(0, x.data().size() - 1);
    for (int s = 0; s < 20; ++s) {
      const std::size_t k = pick(rng);
      Volume3D x2 = x;
      x2.data()[k] += h;
      const double up = loss(x2);
      x2.data()[k] -= 2.0 * h;
      const double down = loss(x2);
      path.max_rel_err =
          std::max(path.max_rel_err, rel_err(analytic.data()[k], (up - down) / (2.0 * h)));
    }
    path.passed = path.max_rel_err < path.tolerance;
    report.paths.push_back(path);
  }

  return report;
}

}  // namespace adasmooth
