// Volume smoothing: 3D convolution with the Gaussian kernel, executed as
// three separable 1D passes with zero-padding, plus the reverse-mode
// gradients with respect to sigma (via dq/dsigma) and the input.
//
// The convolution sums are re-centered to [-r, r] so the output is
// not translated; the literal 0-based indexing would shift the volume by r.

#pragma once

#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "adasmooth/kernel.hpp"
#include "adasmooth/volume.hpp"

namespace adasmooth {

namespace detail {

// One correlation pass along a single axis with taps indexed [-r, r],
// zero-padded. Summation order within each line is fixed (tap order),
// independent of any outer parallelism.
inline Volume3D axis_pass(const Volume3D& x, std::span<const double> taps, int axis) {
  const Dims3 dims = x.dims();
  const int r = (static_cast<int>(taps.size()) - 1) / 2;
  Volume3D out(dims, x.voxel_size_mm());
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const double t = taps[static_cast<std::size_t>(i + r)];
          switch (axis) {
            case 0: acc += t * x.at_or_zero(h + i, w, d); break;
            case 1: acc += t * x.at_or_zero(h, w + i, d); break;
            default: acc += t * x.at_or_zero(h, w, d + i); break;
          }
        }
        out.at(h, w, d) = acc;
      }
  return out;
}

inline Volume3D separable_pass(const Volume3D& x, std::span<const double> th,
                               std::span<const double> tw, std::span<const double> td) {
  return axis_pass(axis_pass(axis_pass(x, th, 0), tw, 1), td, 2);
}

}  // namespace detail

struct SmoothOutput {
  Volume3D z;
  double sigma_used = 0.0;
  GaussianKernel kernel;
};

inline void check_kernel_fits(const Volume3D& x, const GaussianKernel& k) {
  const Dims3 d = x.dims();
  const int min_dim = std::min({d.h, d.w, d.d});
  if (k.radius >= min_dim)
    throw std::invalid_argument("smooth: kernel radius exceeds volume extent");
}

inline SmoothOutput smooth_volume(const Volume3D& x, const GaussianKernel& k) {
  check_kernel_fits(x, k);
  SmoothOutput out;
  out.z = detail::separable_pass(x, k.q1, k.q1, k.q1);
  out.sigma_used = k.sigma;
  out.kernel = k;
  return out;
}

// Convolution of x with dq/dsigma, expanded by the product rule into three
// separable passes, one derivative factor per axis.
inline Volume3D smooth_dsigma_field(const Volume3D& x, const GaussianKernel& k) {
  check_kernel_fits(x, k);
  Volume3D acc = detail::separable_pass(x, k.dq1_dsigma, k.q1, k.q1);
  const Volume3D t2 = detail::separable_pass(x, k.q1, k.dq1_dsigma, k.q1);
  const Volume3D t3 = detail::separable_pass(x, k.q1, k.q1, k.dq1_dsigma);
  for (std::size_t i = 0; i < acc.data().size(); ++i)
    acc.data()[i] += t2.data()[i] + t3.data()[i];
  return acc;
}

// dL/dsigma = <upstream, x * dq/dsigma>, radius held fixed.
inline double smooth_backward_sigma(const Volume3D& x, const GaussianKernel& k,
                                    const Volume3D& upstream) {
  if (!(upstream.dims() == x.dims()))
    throw std::invalid_argument("smooth_backward_sigma: dim mismatch");
  const Volume3D field = smooth_dsigma_field(x, k);
  double acc = 0.0;
  for (std::size_t i = 0; i < field.data().size(); ++i)
    acc += upstream.data()[i] * field.data()[i];
  return acc;
}

// Adjoint of the forward pass. The kernel is symmetric, so the adjoint of
// zero-padded correlation is the same smoothing applied to the upstream.
inline Volume3D smooth_backward_input(const GaussianKernel& k, const Volume3D& upstream) {
  check_kernel_fits(upstream, k);
  return detail::separable_pass(upstream, k.q1, k.q1, k.q1);
}

}  // namespace adasmooth
