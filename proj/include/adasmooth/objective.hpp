// Training objectives.
//
// Inter-subject variability loss over a batch of smoothed volumes plus a
// lambda-weighted penalty for deviating from the originals, with its
// coupled batch gradient with respect to each sigma. Also the decoding
// head: linear readout, batch-statistics normalization (current-batch
// statistics always, no running averages, no learned affine), sigmoid,
// binary cross-entropy.

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "adasmooth/paramnet.hpp"
#include "adasmooth/smooth.hpp"
#include "adasmooth/volume.hpp"

namespace adasmooth {

struct BatchLossReport {
  double total = 0.0;             // variability + lambda * penalty (raw sums)
  double variability_term = 0.0;  // pre-lambda
  double penalty_term = 0.0;      // pre-lambda
  double total_scaled = 0.0;      // raw values divided by N * voxel count
  double variability_scaled = 0.0;
  double penalty_scaled = 0.0;
  std::vector<double> per_volume_sigma;
  double lambda = 0.5;
};

namespace detail {

inline Volume3D batch_mean(const std::vector<SmoothOutput>& smoothed) {
  Volume3D mean(smoothed.front().z.dims(), smoothed.front().z.voxel_size_mm());
  for (const auto& s : smoothed)
    for (std::size_t i = 0; i < mean.data().size(); ++i)
      mean.data()[i] += s.z.data()[i];
  const double inv_n = 1.0 / static_cast<double>(smoothed.size());
  for (double& x : mean.data()) x *= inv_n;
  return mean;
}

}  // namespace detail

inline BatchLossReport variability_loss(const std::vector<Volume3D>& batch,
                                        const std::vector<double>& sigmas,
                                        const std::vector<SmoothOutput>& smoothed,
                                        double lambda) {
  const std::size_t n = batch.size();
  if (n < 2)
    throw std::invalid_argument("variability_loss: batch size must be >= 2");
  if (sigmas.size() != n || smoothed.size() != n)
    throw std::invalid_argument("variability_loss: batch/sigma/smoothed size mismatch");
  const Dims3 dims = batch.front().dims();
  for (std::size_t i = 0; i < n; ++i)
    if (!(batch[i].dims() == dims) || !(smoothed[i].z.dims() == dims))
      throw std::invalid_argument("variability_loss: dim mismatch");

  const Volume3D mean = detail::batch_mean(smoothed);
  BatchLossReport report;
  report.lambda = lambda;
  report.per_volume_sigma = sigmas;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t v = 0; v < mean.data().size(); ++v) {
      const double dv = smoothed[i].z.data()[v] - mean.data()[v];
      report.variability_term += dv * dv;
      const double dp = batch[i].data()[v] - smoothed[i].z.data()[v];
      report.penalty_term += dp * dp;
    }
  }
  report.total = report.variability_term + lambda * report.penalty_term;
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(dims.count()));
  report.variability_scaled = report.variability_term * scale;
  report.penalty_scaled = report.penalty_term * scale;
  report.total_scaled = report.total * scale;
  return report;
}

// dL/dsigma_i. The batch-mean coupling across volumes collapses: summing
// d/dZ_j of sum_i ||Z_i - Zbar||^2 gives 2(Z_j - Zbar) because the
// deviations from the mean sum to zero. The penalty contributes
// -2 lambda (X_j - Z_j). Both route through the kernel derivative of
// volume j only.
inline std::vector<double> variability_loss_backward(const std::vector<Volume3D>& batch,
                                                     const std::vector<double>& sigmas,
                                                     const std::vector<SmoothOutput>& smoothed,
                                                     double lambda) {
  const std::size_t n = batch.size();
  if (n < 2)
    throw std::invalid_argument("variability_loss_backward: batch size must be >= 2");
  if (sigmas.size() != n || smoothed.size() != n)
    throw std::invalid_argument("variability_loss_backward: size mismatch");

  const Volume3D mean = detail::batch_mean(smoothed);
  std::vector<double> grads(n);
  for (std::size_t i = 0; i < n; ++i) {
    Volume3D upstream(batch[i].dims(), batch[i].voxel_size_mm());
    for (std::size_t v = 0; v < upstream.data().size(); ++v) {
      upstream.data()[v] =
          2.0 * (smoothed[i].z.data()[v] - mean.data()[v]) -
          2.0 * lambda * (batch[i].data()[v] - smoothed[i].z.data()[v]);
    }
    grads[i] = smooth_backward_sigma(batch[i], smoothed[i].kernel, upstream);
  }
  return grads;
}

// Same upstream fields, exposed for the decoder fine-tuning path and for
// gradient checking against finite differences.
inline std::vector<Volume3D> variability_loss_upstreams(const std::vector<Volume3D>& batch,
                                                        const std::vector<SmoothOutput>& smoothed,
                                                        double lambda) {
  const Volume3D mean = detail::batch_mean(smoothed);
  std::vector<Volume3D> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Volume3D u(batch[i].dims(), batch[i].voxel_size_mm());
    for (std::size_t v = 0; v < u.data().size(); ++v)
      u.data()[v] = 2.0 * (smoothed[i].z.data()[v] - mean.data()[v]) -
                    2.0 * lambda * (batch[i].data()[v] - smoothed[i].z.data()[v]);
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding head

struct DecoderWeights {
  std::vector<double> v;  // over volume voxels
  double c = 0.0;
  double norm_epsilon = 1e-5;
};

inline DecoderWeights init_decoder(Dims3 dims, std::uint64_t seed, double epsilon = 1e-5) {
  DecoderWeights weights;
  weights.norm_epsilon = epsilon;
  const std::size_t n = static_cast<std::size_t>(dims.count());
  const double limit = std::sqrt(6.0 / (static_cast<double>(n) + 1.0));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-limit, limit);
  weights.v.resize(n);
  for (double& x : weights.v) x = u(rng);
  return weights;
}

struct DecoderTape {
  std::vector<double> pre;         // a_i = v . z_i + c
  std::vector<double> normalized;  // a_hat
  std::vector<double> probs;
  double batch_mean = 0.0;
  double batch_var = 0.0;          // biased (1/N)
};

inline DecoderTape decoder_forward(const std::vector<Volume3D>& batch,
                                   const DecoderWeights& weights) {
  const std::size_t n = batch.size();
  if (n < 2)
    throw std::invalid_argument("decoder_forward: batch size must be >= 2");
  DecoderTape tape;
  tape.pre.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch[i].data().size() != weights.v.size())
      throw std::invalid_argument("decoder_forward: weight/volume size mismatch");
    double a = weights.c;
    for (std::size_t k = 0; k < weights.v.size(); ++k)
      a += weights.v[k] * batch[i].data()[k];
    tape.pre[i] = a;
  }
  for (double a : tape.pre) tape.batch_mean += a;
  tape.batch_mean /= static_cast<double>(n);
  for (double a : tape.pre) {
    const double d = a - tape.batch_mean;
    tape.batch_var += d * d;
  }
  tape.batch_var /= static_cast<double>(n);
  if (tape.batch_var == 0.0)
    throw std::runtime_error("decoder_forward: zero-variance pre-activations");

  const double inv_std = 1.0 / std::sqrt(tape.batch_var + weights.norm_epsilon);
  tape.normalized.resize(n);
  tape.probs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    tape.normalized[i] = (tape.pre[i] - tape.batch_mean) * inv_std;
    tape.probs[i] = logistic(tape.normalized[i]);
  }
  return tape;
}

inline double bce_loss(const std::vector<double>& probs, const std::vector<double>& labels,
                       bool* clamped = nullptr) {
  if (probs.size() != labels.size())
    throw std::invalid_argument("bce_loss: length mismatch");
  if (clamped) *clamped = false;
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double p = probs[i];
    if (p <= 0.0 || p >= 1.0) {
      p = std::clamp(p, 1e-12, 1.0 - 1e-12);
      if (clamped) *clamped = true;
    }
    loss -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  return loss / static_cast<double>(probs.size());
}

struct DecoderGradient {
  std::vector<double> dv;
  double dc = 0.0;
  std::vector<double> dL_da;  // per-item gradient on the pre-activations
};

// BCE through sigmoid and the batch-statistics normalization, including the
// coupling through the batch mean and variance.
inline DecoderGradient bce_backward(const std::vector<Volume3D>& batch,
                                    const DecoderWeights& weights, const DecoderTape& tape,
                                    const std::vector<double>& labels) {
  const std::size_t n = batch.size();
  if (labels.size() != n)
    throw std::invalid_argument("bce_backward: label length mismatch");
  // d(meanBCE)/d(a_hat_i) = (p_i - y_i) / n  (sigmoid + BCE).
  std::vector<double> d_hat(n);
  for (std::size_t i = 0; i < n; ++i)
    d_hat[i] = (tape.probs[i] - labels[i]) / static_cast<double>(n);

  const double inv_std = 1.0 / std::sqrt(tape.batch_var + weights.norm_epsilon);
  double mean_dhat = 0.0, mean_dhat_hat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_dhat += d_hat[i];
    mean_dhat_hat += d_hat[i] * tape.normalized[i];
  }
  mean_dhat /= static_cast<double>(n);
  mean_dhat_hat /= static_cast<double>(n);

  DecoderGradient g;
  g.dL_da.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    g.dL_da[i] = inv_std * (d_hat[i] - mean_dhat - tape.normalized[i] * mean_dhat_hat);

  g.dv.assign(weights.v.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    g.dc += g.dL_da[i];
    for (std::size_t k = 0; k < weights.v.size(); ++k)
      g.dv[k] += g.dL_da[i] * batch[i].data()[k];
  }
  return g;
}

// Upstream gradient volume dL/dZ_i for chaining into the smoothing layer.
inline Volume3D decoder_input_gradient(const DecoderWeights& weights,
                                       const DecoderGradient& g, std::size_t item,
                                       Dims3 dims, double voxel_size_mm) {
  Volume3D out(dims, voxel_size_mm);
  for (std::size_t k = 0; k < weights.v.size(); ++k)
    out.data()[k] = g.dL_da[item] * weights.v[k];
  return out;
}

}  // namespace adasmooth
