#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "adasmooth/objective.hpp"

using namespace adasmooth;

namespace {

Volume3D random_volume(Dims3 dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Volume3D v(dims, 3.0);
  for (double& x : v.data()) x = u(rng);
  return v;
}

// Wraps a volume as if smoothing were the identity; only valid for loss
// evaluations that never touch the kernel.
SmoothOutput identity_smooth(const Volume3D& v) {
  SmoothOutput out;
  out.z = v;
  out.sigma_used = 1.0;
  out.kernel = build_kernel(1.0, 4.0);
  return out;
}

}  // namespace

TEST_CASE("hand-worked two-volume case") {
  const Dims3 dims{1, 1, 3};
  const Volume3D x1(dims, 3.0, std::vector<double>{0.0, 1.0, 0.0});
  const Volume3D x2(dims, 3.0, std::vector<double>{0.0, 0.0, 1.0});
  const std::vector<Volume3D> batch{x1, x2};
  const std::vector<SmoothOutput> smoothed{identity_smooth(x1), identity_smooth(x2)};
  const BatchLossReport report = variability_loss(batch, {1.0, 1.0}, smoothed, 0.5);
  // Mean is (0, 0.5, 0.5); each volume deviates by 0.5 in two voxels.
  CHECK(report.variability_term == Catch::Approx(1.0).epsilon(1e-15));
  CHECK(report.penalty_term == 0.0);
  CHECK(report.total == Catch::Approx(1.0).epsilon(1e-15));
  CHECK(report.total_scaled == Catch::Approx(1.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("identical volumes have zero variability") {
  const Volume3D x = random_volume(Dims3{4, 4, 4}, 1);
  const std::vector<Volume3D> batch{x, x, x};
  const std::vector<SmoothOutput> smoothed{identity_smooth(x), identity_smooth(x),
                                           identity_smooth(x)};
  const BatchLossReport report = variability_loss(batch, {1.0, 1.0, 1.0}, smoothed, 0.5);
  CHECK(report.variability_term < 1e-24);
  CHECK(report.penalty_term == 0.0);
}

TEST_CASE("penalty term is lambda-weighted squared deviation from the input") {
  const Volume3D x = random_volume(Dims3{3, 3, 3}, 2);
  Volume3D z = x;
  for (double& v : z.data()) v += 0.1;
  const std::vector<Volume3D> batch{x, x};
  const std::vector<SmoothOutput> smoothed{identity_smooth(z), identity_smooth(z)};
  const double lambda = 0.5;
  const BatchLossReport report = variability_loss(batch, {1.0, 1.0}, smoothed, lambda);
  CHECK(report.variability_term < 1e-24);
  const double expected = 2.0 * 27.0 * 0.01;
  CHECK(report.penalty_term == Catch::Approx(expected).epsilon(1e-12));
  CHECK(report.total == Catch::Approx(lambda * expected).epsilon(1e-12));
}

TEST_CASE("loss is invariant under batch permutation") {
  std::vector<Volume3D> batch;
  std::vector<SmoothOutput> smoothed;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(random_volume(Dims3{4, 4, 4}, 10 + i));
    smoothed.push_back(smooth_volume(batch.back(), build_kernel(1.0 + 0.2 * i, 4.0)));
  }
  const double base = variability_loss(batch, {1, 1, 1, 1}, smoothed, 0.5).total;
  std::reverse(batch.begin(), batch.end());
  std::reverse(smoothed.begin(), smoothed.end());
  const double permuted = variability_loss(batch, {1, 1, 1, 1}, smoothed, 0.5).total;
  CHECK(std::abs(base - permuted) < 1e-10 * std::abs(base));
}

TEST_CASE("batches smaller than two are rejected") {
  const Volume3D x = random_volume(Dims3{3, 3, 3}, 3);
  CHECK_THROWS_AS(variability_loss({x}, {1.0}, {identity_smooth(x)}, 0.5),
                  std::invalid_argument);
  CHECK_THROWS_AS(variability_loss_backward({x}, {1.0}, {identity_smooth(x)}, 0.5),
                  std::invalid_argument);
}

TEST_CASE("sigma gradients match finite differences through the full loss") {
  const Dims3 dims{8, 8, 8};
  const double t = 4.0, lambda = 0.5, h = 1e-5;
  std::vector<Volume3D> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(random_volume(dims, 20 + i));
  std::vector<double> sigmas{1.0, 1.2, 0.9};

  auto loss_at = [&](const std::vector<double>& s) {
    std::vector<SmoothOutput> smoothed;
    for (std::size_t i = 0; i < batch.size(); ++i)
      smoothed.push_back(smooth_volume(batch[i], build_kernel(s[i], t)));
    return variability_loss(batch, s, smoothed, lambda).total;
  };

  std::vector<SmoothOutput> smoothed;
  for (std::size_t i = 0; i < batch.size(); ++i)
    smoothed.push_back(smooth_volume(batch[i], build_kernel(sigmas[i], t)));
  const std::vector<double> grads =
      variability_loss_backward(batch, sigmas, smoothed, lambda);

  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    std::vector<double> up = sigmas, down = sigmas;
    up[i] += h;
    down[i] -= h;
    const double fd = (loss_at(up) - loss_at(down)) / (2.0 * h);
    CHECK(std::abs(grads[i] - fd) / std::max({std::abs(fd), std::abs(grads[i]), 1e-12}) <
          1e-3);
  }
}

TEST_CASE("upstream fields reproduce the sigma gradient") {
  const Dims3 dims{6, 6, 6};
  std::vector<Volume3D> batch{random_volume(dims, 30), random_volume(dims, 31)};
  std::vector<SmoothOutput> smoothed;
  for (const auto& x : batch) smoothed.push_back(smooth_volume(x, build_kernel(1.1, 4.0)));
  const std::vector<double> grads =
      variability_loss_backward(batch, {1.1, 1.1}, smoothed, 0.5);
  const std::vector<Volume3D> upstreams = variability_loss_upstreams(batch, smoothed, 0.5);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double via_upstream =
        smooth_backward_sigma(batch[i], smoothed[i].kernel, upstreams[i]);
    CHECK(via_upstream == Catch::Approx(grads[i]).margin(1e-15));
  }
}

// ---------------------------------------------------------------------------
// Decoding head

TEST_CASE("decoder normalization has zero mean and unit variance") {
  const Dims3 dims{4, 4, 4};
  std::vector<Volume3D> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(random_volume(dims, 40 + i));
  const DecoderWeights weights = init_decoder(dims, 41);
  const DecoderTape tape = decoder_forward(batch, weights);

  double mean = 0.0, var = 0.0;
  for (double a : tape.normalized) mean += a;
  mean /= tape.normalized.size();
  for (double a : tape.normalized) var += (a - mean) * (a - mean);
  var /= tape.normalized.size();
  CHECK(std::abs(mean) < 1e-12);
  // Unit variance up to the epsilon regularizer.
  CHECK(var == Catch::Approx(tape.batch_var / (tape.batch_var + weights.norm_epsilon))
                   .epsilon(1e-12));
  for (std::size_t i = 0; i < batch.size(); ++i)
    CHECK(tape.probs[i] == Catch::Approx(logistic(tape.normalized[i])).epsilon(1e-15));
}

TEST_CASE("zero-variance pre-activations are an error") {
  const Dims3 dims{2, 2, 2};
  const Volume3D x = random_volume(dims, 50);
  const DecoderWeights weights = init_decoder(dims, 51);
  CHECK_THROWS_AS(decoder_forward({x, x}, weights), std::runtime_error);
}

TEST_CASE("BCE closed forms") {
  CHECK(bce_loss({0.5, 0.5}, {1.0, 0.0}) == Catch::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_loss({1.0 - 1e-15, 1e-15}, {1.0, 0.0}) < 1e-12);
  bool clamped = false;
  CHECK(bce_loss({1.0, 0.5}, {0.0, 0.0}, &clamped) < 30.0);
  CHECK(clamped);
  CHECK_THROWS_AS(bce_loss({0.5}, {1.0, 0.0}), std::invalid_argument);
}

TEST_CASE("decoder gradients match finite differences") {
  const Dims3 dims{3, 3, 3};
  std::vector<Volume3D> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_volume(dims, 60 + i));
  const std::vector<double> labels{1.0, 0.0, 1.0, 1.0, 0.0};
  const DecoderWeights weights = init_decoder(dims, 61);
  const DecoderTape tape = decoder_forward(batch, weights);
  const DecoderGradient g = bce_backward(batch, weights, tape, labels);

  auto loss_with = [&](const DecoderWeights& w) {
    return bce_loss(decoder_forward(batch, w).probs, labels);
  };
  const double h = 1e-6;
  std::mt19937_64 rng(62);
  std::uniform_int_distribution<std::size_t> pick(0, weights.v.size() - 1);
  for (int s = 0; s < 20; ++s) {
    const std::size_t idx = pick(rng);
    DecoderWeights wp = weights;
    wp.v[idx] += h;
    const double up = loss_with(wp);
    wp.v[idx] -= 2.0 * h;
    const double down = loss_with(wp);
    const double fd = (up - down) / (2.0 * h);
    CHECK(std::abs(g.dv[idx] - fd) <
          1e-4 * std::max({std::abs(fd), std::abs(g.dv[idx]), 1e-4}));
  }

  // The bias shifts every pre-activation equally, so the batch normalization
  // absorbs it and dc vanishes.
  DecoderWeights wc = weights;
  wc.c += h;
  const double up = loss_with(wc);
  wc.c -= 2.0 * h;
  const double down = loss_with(wc);
  CHECK(std::abs((up - down) / (2.0 * h)) < 1e-8);
  CHECK(std::abs(g.dc) < 1e-12);
}

TEST_CASE("decoder input gradient matches voxel finite differences") {
  const Dims3 dims{3, 3, 3};
  std::vector<Volume3D> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_volume(dims, 70 + i));
  const std::vector<double> labels{1.0, 0.0, 0.0, 1.0};
  const DecoderWeights weights = init_decoder(dims, 71);
  const DecoderTape tape = decoder_forward(batch, weights);
  const DecoderGradient g = bce_backward(batch, weights, tape, labels);

  const double h = 1e-6;
  for (std::size_t item = 0; item < batch.size(); ++item) {
    const Volume3D grad = decoder_input_gradient(weights, g, item, dims, 3.0);
    for (std::size_t idx = 0; idx < 5; ++idx) {
      std::vector<Volume3D> perturbed = batch;
      perturbed[item].data()[idx] += h;
      const double up = bce_loss(decoder_forward(perturbed, weights).probs, labels);
      perturbed[item].data()[idx] -= 2.0 * h;
      const double down = bce_loss(decoder_forward(perturbed, weights).probs, labels);
      const double fd = (up - down) / (2.0 * h);
      CHECK(std::abs(grad.data()[idx] - fd) <
            1e-4 * std::max({std::abs(fd), std::abs(grad.data()[idx]), 1e-4}));
    }
  }
}
