// SGD with Nesterov momentum over the parameters-network weights (and the
// decoder weights when decoding), the epoch / internal-epoch schedule with
// periodic data regeneration, checkpointing, and the gradient-check harness.
//
// Nesterov uses the lookahead-gradient formulation:
//   g  = grad(w + momentum * v)
//   v' = momentum * v - lr * g
//   w' = w + v'

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "adasmooth/augment.hpp"
#include "adasmooth/kernel.hpp"
#include "adasmooth/objective.hpp"
#include "adasmooth/paramnet.hpp"
#include "adasmooth/smooth.hpp"
#include "adasmooth/volume.hpp"

namespace adasmooth {

struct TrainConfig {
  double lambda = 0.5;
  double learning_rate = 0.7;   // 0.01 for the decoding task
  double momentum = 0.9;
  int epochs = 50;              // 100 for the decoding task
  int internal_epochs = 75;
  int per_subject_samples = 7;
  double t = 4.0;
  RadiusConvention radius_convention = RadiusConvention::kHalf;
  DegeneracyPolicy degeneracy = make_clip_policy(4.0);
  double min_fwhm_mm = 0.0;     // optional minimum-smoothing floor, 0 = off
  std::uint64_t seed = 0;
  // Divergence guard (invented safeguard, configurable).
  double divergence_factor = 10.0;
  int divergence_patience = 5;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("momentum must be in [0,1)");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  }

  double effective_sigma_floor(double voxel_size_mm) const {
    double floor = 0.0;
    if (min_fwhm_mm > 0.0) floor = fwhm_to_sigma(min_fwhm_mm, voxel_size_mm);
    return floor;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"lambda", c.lambda},
      {"learning_rate", c.learning_rate},
      {"momentum", c.momentum},
      {"epochs", c.epochs},
      {"internal_epochs", c.internal_epochs},
      {"per_subject_samples", c.per_subject_samples},
      {"t", c.t},
      {"radius_convention", c.radius_convention == RadiusConvention::kHalf ? "half" : "full"},
      {"degeneracy_mode", c.degeneracy.mode == DegeneracyMode::kClip ? "clip" : "stochastic_bump"},
      {"degeneracy_floor", c.degeneracy.sigma_floor},
      {"degeneracy_p", c.degeneracy.bump_prob},
      {"min_fwhm_mm", c.min_fwhm_mm},
      {"seed", c.seed},
      {"divergence_factor", c.divergence_factor},
      {"divergence_patience", c.divergence_patience}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lambda = j.value("lambda", c.lambda);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.epochs = j.value("epochs", c.epochs);
  c.internal_epochs = j.value("internal_epochs", c.internal_epochs);
  c.per_subject_samples = j.value("per_subject_samples", c.per_subject_samples);
  c.t = j.value("t", c.t);
  c.radius_convention = j.value("radius_convention", std::string("half")) == "full"
                            ? RadiusConvention::kFull
                            : RadiusConvention::kHalf;
  c.degeneracy.truncation_t = c.t;
  const std::string mode = j.value("degeneracy_mode", std::string("clip"));
  c.degeneracy.mode = mode == "stochastic_bump" ? DegeneracyMode::kStochasticBump
                                                : DegeneracyMode::kClip;
  c.degeneracy.sigma_floor = j.value("degeneracy_floor", 1.5 / c.t + 1e-6);
  c.degeneracy.bump_prob = j.value("degeneracy_p", 0.1);
  c.min_fwhm_mm = j.value("min_fwhm_mm", c.min_fwhm_mm);
  c.seed = j.value("seed", c.seed);
  c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
  c.divergence_patience = j.value("divergence_patience", c.divergence_patience);
}

struct LossRecord {
  int epoch = 0;
  int internal_epoch = 0;
  double total = 0.0;
  double variability = 0.0;
  double penalty = 0.0;
  double mean_sigma = 0.0;
};

struct TrainState {
  ParamNetWeights paramnet;
  std::vector<double> paramnet_velocity;  // length P + 1 (w then b)
  DecoderWeights decoder;
  std::vector<double> decoder_velocity;   // empty until decoding
  bool has_decoder = false;
  int completed_epochs = 0;
  std::vector<LossRecord> loss_history;
  std::string rng_state;                  // serialized mt19937_64
  int radius_jump_count = 0;              // sigma crossed a kernel-radius jump
};

// ---------------------------------------------------------------------------
// Nesterov step over a flat parameter vector

using GradientFn = std::function<std::vector<double>(const std::vector<double>&)>;

inline void nesterov_step(std::vector<double>& weights, std::vector<double>& velocity,
                          const GradientFn& gradient_fn, double lr, double momentum) {
  if (weights.size() != velocity.size())
    throw std::invalid_argument("nesterov_step: shape mismatch");
  std::vector<double> lookahead(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i)
    lookahead[i] = weights[i] + momentum * velocity[i];
  const std::vector<double> g = gradient_fn(lookahead);
  if (g.size() != weights.size())
    throw std::invalid_argument("nesterov_step: gradient shape mismatch");
  for (double x : g)
    if (!std::isfinite(x))
      throw std::runtime_error("nesterov_step: non-finite gradient");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * g[i];
    weights[i] += velocity[i];
  }
}

// ---------------------------------------------------------------------------
// Smoothing forward for one volume under a config: paramnet -> degeneracy
// policy (and optional FWHM floor) -> kernel -> convolution.

struct VolumeForward {
  ParamNetTape tape;
  double sigma_raw = 0.0;    // softplus output
  double sigma_used = 0.0;   // after the degeneracy policy
  bool sigma_gated = false;  // clip active: d(sigma_used)/d(sigma_raw) = 0
  SmoothOutput smooth;
};

template <typename Rng>
VolumeForward forward_one(const Volume3D& x, const ParamNetWeights& weights,
                          const TrainConfig& config, Rng& rng) {
  VolumeForward f;
  f.tape = paramnet_forward(x, weights);
  f.sigma_raw = f.tape.sigma;
  f.sigma_used = apply_degeneracy_policy(f.sigma_raw, config.degeneracy, rng);
  const double floor = config.effective_sigma_floor(x.voxel_size_mm());
  if (f.sigma_used < floor) f.sigma_used = floor;
  f.sigma_gated = f.sigma_used != f.sigma_raw &&
                  config.degeneracy.mode == DegeneracyMode::kClip;
  if (f.sigma_used != f.sigma_raw &&
      config.degeneracy.mode == DegeneracyMode::kStochasticBump &&
      f.sigma_used != f.sigma_raw + config.degeneracy.bump_amount)
    f.sigma_gated = true;  // the extra FWHM floor engaged
  const GaussianKernel kernel =
      build_kernel(f.sigma_used, config.t, config.radius_convention);
  f.smooth = smooth_volume(x, kernel);
  return f;
}

namespace detail {

inline std::vector<double> pack_paramnet(const ParamNetWeights& w) {
  std::vector<double> flat = w.w;
  flat.push_back(w.b);
  return flat;
}

inline void unpack_paramnet(const std::vector<double>& flat, ParamNetWeights& w) {
  if (flat.size() != w.w.size() + 1)
    throw std::invalid_argument("unpack_paramnet: size mismatch");
  std::copy(flat.begin(), flat.end() - 1, w.w.begin());
  w.b = flat.back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Smoothing task (inter-subject variability objective)

inline TrainState train_smoother(const Cohort& cohort, const ParamDistribution& dist,
                                 const TrainConfig& config) {
  config.validate();
  if (cohort.subjects.empty())
    throw std::invalid_argument("train_smoother: empty cohort");

  const Volume3D reference = make_reference(cohort);
  TrainState state;
  state.paramnet = init_weights(reference, config.seed);
  state.paramnet_velocity.assign(state.paramnet.w.size() + 1, 0.0);

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  double initial_total = -1.0;
  int divergent_epochs = 0;
  std::vector<int> previous_radius;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<Volume3D> batch =
        augment_batch(cohort, dist, config.per_subject_samples, rng);
    if (batch.size() < 2)
      throw std::runtime_error("train_smoother: batch too small");
    previous_radius.assign(batch.size(), -1);

    for (int inner = 0; inner < config.internal_epochs; ++inner) {
      LossRecord record;
      record.epoch = epoch;
      record.internal_epoch = inner;

      auto gradient_fn = [&](const std::vector<double>& flat) {
        ParamNetWeights lookahead = state.paramnet;
        detail::unpack_paramnet(flat, lookahead);

        std::vector<VolumeForward> forwards;
        std::vector<double> sigmas;
        std::vector<SmoothOutput> smoothed;
        forwards.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
          forwards.push_back(forward_one(batch[i], lookahead, config, rng));
          sigmas.push_back(forwards.back().sigma_used);
          smoothed.push_back(forwards.back().smooth);
          const int r = forwards.back().smooth.kernel.radius;
          if (previous_radius[i] >= 0 && previous_radius[i] != r)
            ++state.radius_jump_count;
          previous_radius[i] = r;
        }

        const BatchLossReport report =
            variability_loss(batch, sigmas, smoothed, config.lambda);
        record.total = report.total_scaled;
        record.variability = report.variability_scaled;
        record.penalty = report.penalty_scaled;
        for (double s : sigmas) record.mean_sigma += s;
        record.mean_sigma /= static_cast<double>(sigmas.size());

        const std::vector<double> dL_dsigma =
            variability_loss_backward(batch, sigmas, smoothed, config.lambda);
        std::vector<double> grad(flat.size(), 0.0);
        for (std::size_t i = 0; i < batch.size(); ++i) {
          if (forwards[i].sigma_gated) continue;  // clip floor kills the gradient
          const ParamNetGradient g =
              paramnet_backward(forwards[i].tape, lookahead, dL_dsigma[i]);
          for (std::size_t k = 0; k < g.dw.size(); ++k) grad[k] += g.dw[k];
          grad.back() += g.db;
        }
        return grad;
      };

      std::vector<double> flat = detail::pack_paramnet(state.paramnet);
      nesterov_step(flat, state.paramnet_velocity, gradient_fn, config.learning_rate,
                    config.momentum);
      detail::unpack_paramnet(flat, state.paramnet);

      state.loss_history.push_back(record);
      if (initial_total < 0.0) initial_total = record.total;
      if (record.total > config.divergence_factor * initial_total) {
        if (++divergent_epochs >= config.divergence_patience) {
          std::ostringstream msg;
          msg << "train_smoother: diverged (total " << record.total << " > "
              << config.divergence_factor << "x initial " << initial_total
              << " for " << divergent_epochs << " inner epochs; mean sigma "
              << record.mean_sigma << ", variability " << record.variability
              << ", penalty " << record.penalty << ")";
          throw std::runtime_error(msg.str());
        }
      } else {
        divergent_epochs = 0;
      }
    }
    ++state.completed_epochs;
  }

  std::ostringstream rng_out;
  rng_out << rng;
  state.rng_state = rng_out.str();
  return state;
}

// ---------------------------------------------------------------------------
// Decoding task (BCE objective, per-subject batches)

inline TrainState train_decoder(const Cohort& cohort, const TrainState& pretrained,
                                const TrainConfig& config, bool freeze_paramnet,
                                double noise_sigma) {
  config.validate();

  // Keep only left/right volumes, per subject.
  std::vector<std::vector<Volume3D>> batches;
  std::vector<std::vector<double>> labels;
  for (const auto& subject : cohort.subjects) {
    if (subject.labels.empty())
      throw std::invalid_argument("train_decoder: cohort is unlabelled");
    std::vector<Volume3D> vols;
    std::vector<double> ys;
    for (std::size_t i = 0; i < subject.volumes.size(); ++i) {
      if (subject.labels[i] == Label::kRest) continue;
      vols.push_back(subject.volumes[i]);
      ys.push_back(subject.labels[i] == Label::kRight ? 1.0 : 0.0);
    }
    if (vols.size() >= 2) {
      batches.push_back(std::move(vols));
      labels.push_back(std::move(ys));
    }
  }
  if (batches.empty())
    throw std::invalid_argument("train_decoder: no labelled left/right volumes");

  const Dims3 dims = batches.front().front().dims();
  TrainState state = pretrained;
  state.loss_history.clear();
  state.has_decoder = true;
  if (state.decoder.v.empty())
    state.decoder = init_decoder(dims, config.seed + 1);
  state.decoder_velocity.assign(state.decoder.v.size() + 1, 0.0);
  if (state.paramnet_velocity.size() != state.paramnet.w.size() + 1)
    state.paramnet_velocity.assign(state.paramnet.w.size() + 1, 0.0);
  state.completed_epochs = 0;

  std::mt19937_64 rng(config.seed ^ 0xd1b54a32d192ed03ull);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t pn_size = state.paramnet.w.size() + 1;
  const std::size_t dec_size = state.decoder.v.size() + 1;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    double epoch_sigma = 0.0;
    std::size_t sigma_count = 0;

    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<Volume3D> inputs = batches[b];
      if (noise_sigma > 0.0)
        for (auto& v : inputs)
          for (double& x : v.data()) x += noise_sigma * gauss(rng);

      double batch_loss = 0.0;
      auto gradient_fn = [&](const std::vector<double>& flat) {
        ParamNetWeights pn = state.paramnet;
        detail::unpack_paramnet(std::vector<double>(flat.begin(), flat.begin() + pn_size), pn);
        DecoderWeights dec = state.decoder;
        std::copy(flat.begin() + pn_size, flat.end() - 1, dec.v.begin());
        dec.c = flat.back();

        std::vector<VolumeForward> forwards;
        std::vector<Volume3D> smoothed;
        for (const auto& x : inputs) {
          forwards.push_back(forward_one(x, pn, config, rng));
          smoothed.push_back(forwards.back().smooth.z);
          epoch_sigma += forwards.back().sigma_used;
          ++sigma_count;
        }

        const DecoderTape tape = decoder_forward(smoothed, dec);
        batch_loss = bce_loss(tape.probs, labels[b]);
        const DecoderGradient dg = bce_backward(smoothed, dec, tape, labels[b]);

        std::vector<double> grad(flat.size(), 0.0);
        for (std::size_t k = 0; k < dg.dv.size(); ++k) grad[pn_size + k] = dg.dv[k];
        grad.back() = dg.dc;

        if (!freeze_paramnet) {
          for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (forwards[i].sigma_gated) continue;
            const Volume3D upstream = decoder_input_gradient(
                dec, dg, i, dims, inputs[i].voxel_size_mm());
            const double dL_dsigma =
                smooth_backward_sigma(inputs[i], forwards[i].smooth.kernel, upstream);
            const ParamNetGradient pg =
                paramnet_backward(forwards[i].tape, pn, dL_dsigma);
            for (std::size_t k = 0; k < pg.dw.size(); ++k) grad[k] += pg.dw[k];
            grad[pn_size - 1] += pg.db;
          }
        }
        return grad;
      };

      std::vector<double> flat = detail::pack_paramnet(state.paramnet);
      flat.insert(flat.end(), state.decoder.v.begin(), state.decoder.v.end());
      flat.push_back(state.decoder.c);
      std::vector<double> velocity = state.paramnet_velocity;
      velocity.insert(velocity.end(), state.decoder_velocity.begin(),
                      state.decoder_velocity.end());

      nesterov_step(flat, velocity, gradient_fn, config.learning_rate, config.momentum);

      ParamNetWeights updated = state.paramnet;
      detail::unpack_paramnet(std::vector<double>(flat.begin(), flat.begin() + pn_size),
                              updated);
      if (!freeze_paramnet) {
        state.paramnet = updated;
        state.paramnet_velocity.assign(velocity.begin(), velocity.begin() + pn_size);
      }
      std::copy(flat.begin() + pn_size, flat.end() - 1, state.decoder.v.begin());
      state.decoder.c = flat.back();
      state.decoder_velocity.assign(velocity.begin() + pn_size, velocity.end());

      epoch_loss += batch_loss;
    }

    LossRecord record;
    record.epoch = epoch;
    record.total = epoch_loss / static_cast<double>(batches.size());
    record.mean_sigma = sigma_count ? epoch_sigma / static_cast<double>(sigma_count) : 0.0;
    state.loss_history.push_back(record);
    ++state.completed_epochs;
  }

  std::ostringstream rng_out;
  rng_out << rng;
  state.rng_state = rng_out.str();
  (void)dec_size;
  return state;
}

// ---------------------------------------------------------------------------
// Checkpointing: paramnet/decoder in their binary formats plus a JSON
// manifest with config echo, epoch counters, velocities, and rng state.

inline void save_train_state(const TrainState& state, const TrainConfig& config,
                             const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_paramnet(state.paramnet, dir / "paramnet.ckpt");

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config;
  manifest["completed_epochs"] = state.completed_epochs;
  manifest["rng_state"] = state.rng_state;
  manifest["radius_jump_count"] = state.radius_jump_count;
  manifest["paramnet_velocity"] = state.paramnet_velocity;
  manifest["has_decoder"] = state.has_decoder;
  if (state.has_decoder) {
    manifest["decoder_velocity"] = state.decoder_velocity;
    manifest["decoder_c"] = state.decoder.c;
    manifest["decoder_epsilon"] = state.decoder.norm_epsilon;
    std::ofstream dec(dir / "decoder.bin", std::ios::binary | std::ios::trunc);
    std::vector<float> buf(state.decoder.v.begin(), state.decoder.v.end());
    dec.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!dec) throw std::runtime_error("save_train_state: decoder write failed");
  }
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : state.loss_history)
    history.push_back({{"epoch", r.epoch},
                       {"internal_epoch", r.internal_epoch},
                       {"total", r.total},
                       {"variability", r.variability},
                       {"penalty", r.penalty},
                       {"mean_sigma", r.mean_sigma}});
  manifest["loss_history"] = history;

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_train_state: manifest write failed");
}

inline TrainState load_train_state(const std::filesystem::path& dir,
                                   TrainConfig* config_out = nullptr) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("load_train_state: missing manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_train_state: unsupported format version");
  if (config_out) *config_out = manifest.at("config").get<TrainConfig>();

  TrainState state;
  state.paramnet = load_paramnet(dir / "paramnet.ckpt");
  state.completed_epochs = manifest.at("completed_epochs").get<int>();
  state.rng_state = manifest.at("rng_state").get<std::string>();
  state.radius_jump_count = manifest.value("radius_jump_count", 0);
  state.paramnet_velocity =
      manifest.at("paramnet_velocity").get<std::vector<double>>();
  state.has_decoder = manifest.at("has_decoder").get<bool>();
  if (state.has_decoder) {
    state.decoder_velocity = manifest.at("decoder_velocity").get<std::vector<double>>();
    state.decoder.c = manifest.at("decoder_c").get<double>();
    state.decoder.norm_epsilon = manifest.at("decoder_epsilon").get<double>();
    const std::size_t n =
        static_cast<std::size_t>(state.paramnet.reference.dims().count());
    std::ifstream dec(dir / "decoder.bin", std::ios::binary);
    std::vector<float> buf(n);
    dec.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
    if (!dec) throw std::runtime_error("load_train_state: truncated decoder weights");
    state.decoder.v.assign(buf.begin(), buf.end());
  }
  for (const auto& r : manifest.at("loss_history")) {
    LossRecord rec;
    rec.epoch = r.at("epoch").get<int>();
    rec.internal_epoch = r.value("internal_epoch", 0);
    rec.total = r.at("total").get<double>();
    rec.variability = r.value("variability", 0.0);
    rec.penalty = r.value("penalty", 0.0);
    rec.mean_sigma = r.value("mean_sigma", 0.0);
    state.loss_history.push_back(rec);
  }
  return state;
}

}  // namespace adasmooth
