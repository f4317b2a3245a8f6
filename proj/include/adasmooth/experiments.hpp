// Experiment commands over phantom cohorts: noise sweep, deformation
// sweep, inter-subject anatomical-difference evaluation, and the decoding
// comparison. Each command is deterministic given its seed and inputs and
// emits versioned CSV plus a JSON summary echoing the full effective
// configuration.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "adasmooth/csvio.hpp"
#include "adasmooth/stats.hpp"
#include "adasmooth/trainer.hpp"

namespace adasmooth {

inline constexpr int kCsvSchemaVersion = 1;

struct SweepReport {
  std::vector<double> rho;
  std::vector<double> fwhm_mm;
  std::optional<double> pearson_corr;
  std::optional<double> spearman_corr;
};

namespace experiments_detail {

inline std::string opt_str(const std::optional<double>& v) {
  return v ? format_double(*v) : "nan";
}

inline nlohmann::json config_echo(const TrainConfig& config, std::uint64_t seed) {
  nlohmann::json j;
  j["config"] = config;
  j["seed"] = seed;
  j["csv_schema_version"] = kCsvSchemaVersion;
  return j;
}

// Sigma the network assigns to one volume under the run's policy. The
// stochastic bump is meaningful only in training; evaluation uses the clip
// floor so repeated runs agree.
inline double eval_sigma(const Volume3D& x, const ParamNetWeights& weights,
                         const TrainConfig& config) {
  const double raw = paramnet_forward(x, weights).sigma;
  double s = std::max(raw, config.degeneracy.sigma_floor);
  const double floor = config.effective_sigma_floor(x.voxel_size_mm());
  return std::max(s, floor);
}

inline double ssd(const Volume3D& a, const Volume3D& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return acc;
}

inline ParamNetWeights with_reference(const ParamNetWeights& weights, const Cohort& cohort) {
  // Evaluation rebuilds the reference from the evaluated set, averaging its
  // subjects' first volumes.
  ParamNetWeights w = weights;
  w.reference = make_reference(cohort);
  return w;
}

}  // namespace experiments_detail

// ---------------------------------------------------------------------------
// Noise sweep: predicted FWHM vs noise level

inline SweepReport cmd_noise_sweep(const TrainState& state, const TrainConfig& config,
                                   const Cohort& cohort, double m, int repetitions,
                                   std::uint64_t seed,
                                   const std::filesystem::path& out_dir) {
  using namespace experiments_detail;
  if (state.paramnet.w.empty())
    throw std::invalid_argument("cmd_noise_sweep: untrained checkpoint");
  const ParamNetWeights weights = with_reference(state.paramnet, cohort);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> dummy;  // keep draw order explicit

  SweepReport report;
  CsvWriter csv({"schema_version", "trial", "subject_id", "volume_index", "rho",
                 "sigma_voxels", "fwhm_mm"});
  for (int trial = 0; trial < repetitions; ++trial) {
    for (const auto& subject : cohort.subjects) {
      std::uniform_int_distribution<std::size_t> pick(0, subject.volumes.size() - 1);
      const std::size_t idx = pick(rng);
      const double rho = unit(rng);
      const double a = m * rho;
      Volume3D x = subject.volumes[idx];
      std::uniform_real_distribution<double> noise(-a, a);
      if (a > 0.0)
        for (double& v : x.data()) v += noise(rng);
      const double sigma = eval_sigma(x, weights, config);
      const double fwhm = sigma_to_fwhm_mm(sigma, x.voxel_size_mm());
      report.rho.push_back(rho);
      report.fwhm_mm.push_back(fwhm);
      csv.add_row({std::to_string(kCsvSchemaVersion), std::to_string(trial), subject.id,
                   std::to_string(idx), format_double(rho), format_double(sigma),
                   format_double(fwhm)});
    }
  }
  if (report.rho.size() >= 10) {
    report.pearson_corr = pearson(report.rho, report.fwhm_mm);
    report.spearman_corr = spearman(report.rho, report.fwhm_mm);
  }

  write_file_atomic(out_dir / "noise_sweep.csv", csv.to_string());
  nlohmann::json summary = config_echo(config, seed);
  summary["m"] = m;
  summary["repetitions"] = repetitions;
  summary["rows"] = report.rho.size();
  summary["pearson"] = report.pearson_corr ? nlohmann::json(*report.pearson_corr)
                                           : nlohmann::json(nullptr);
  summary["spearman"] = report.spearman_corr ? nlohmann::json(*report.spearman_corr)
                                             : nlohmann::json(nullptr);
  write_json_atomic(out_dir / "noise_sweep_summary.json", summary);
  return report;
}

// ---------------------------------------------------------------------------
// Deformation sweep: predicted FWHM vs warp magnitude

inline SweepReport cmd_deform_sweep(const TrainState& state, const TrainConfig& config,
                                    const Cohort& cohort, const DeformCaps& caps,
                                    int repetitions, std::uint64_t seed,
                                    const std::filesystem::path& out_dir) {
  using namespace experiments_detail;
  if (state.paramnet.w.empty())
    throw std::invalid_argument("cmd_deform_sweep: untrained checkpoint");
  const ParamNetWeights weights = with_reference(state.paramnet, cohort);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SweepReport report;
  CsvWriter csv({"schema_version", "trial", "subject_id", "volume_index", "rho",
                 "sigma_voxels", "fwhm_mm"});
  for (int trial = 0; trial < repetitions; ++trial) {
    for (const auto& subject : cohort.subjects) {
      std::uniform_int_distribution<std::size_t> pick(0, subject.volumes.size() - 1);
      const std::size_t idx = pick(rng);
      const double rho = unit(rng);
      const AugmentParams theta = sample_sweep_theta(caps, rho, rng);
      const Volume3D x = warp_volume(subject.volumes[idx], theta);
      const double sigma = eval_sigma(x, weights, config);
      const double fwhm = sigma_to_fwhm_mm(sigma, x.voxel_size_mm());
      report.rho.push_back(rho);
      report.fwhm_mm.push_back(fwhm);
      csv.add_row({std::to_string(kCsvSchemaVersion), std::to_string(trial), subject.id,
                   std::to_string(idx), format_double(rho), format_double(sigma),
                   format_double(fwhm)});
    }
  }
  if (report.rho.size() >= 10) {
    report.pearson_corr = pearson(report.rho, report.fwhm_mm);
    report.spearman_corr = spearman(report.rho, report.fwhm_mm);
  }

  write_file_atomic(out_dir / "deform_sweep.csv", csv.to_string());
  nlohmann::json summary = config_echo(config, seed);
  summary["caps"] = {{"translation", caps.translation},
                     {"scale", caps.scale},
                     {"shear", caps.shear},
                     {"rotation", caps.rotation},
                     {"tps", caps.tps}};
  summary["repetitions"] = repetitions;
  summary["rows"] = report.rho.size();
  summary["pearson"] = report.pearson_corr ? nlohmann::json(*report.pearson_corr)
                                           : nlohmann::json(nullptr);
  summary["spearman"] = report.spearman_corr ? nlohmann::json(*report.spearman_corr)
                                             : nlohmann::json(nullptr);
  write_json_atomic(out_dir / "deform_sweep_summary.json", summary);
  return report;
}

// ---------------------------------------------------------------------------
// Inter-subject anatomical-difference trade-off

enum class ReferenceSigmaMode { kPerVolume, kSubjectMean };

struct AnatomyRow {
  std::string subject_id;
  double diff_raw = 0.0;
  double diff_fixed = 0.0;
  double diff_adaptive = 0.0;
  double penalty_fixed = 0.0;
  double penalty_adaptive = 0.0;
  double mean_fwhm_mm = 0.0;
  double fwhm_variance = 0.0;  // within-subject
};

struct AnatomyReport {
  std::vector<AnatomyRow> rows;
  double mean_diff_raw = 0.0;
  double mean_diff_fixed = 0.0;
  double mean_diff_adaptive = 0.0;
  double mean_penalty_fixed = 0.0;
  double mean_penalty_adaptive = 0.0;
  double between_subject_fwhm_variance = 0.0;
  double mean_within_subject_fwhm_variance = 0.0;
};

inline AnatomyReport cmd_anatomy_eval(const TrainState& state, const TrainConfig& config,
                                      const Cohort& cohort, double fixed_fwhm_mm,
                                      const std::filesystem::path& out_dir,
                                      ReferenceSigmaMode ref_mode = ReferenceSigmaMode::kPerVolume) {
  using namespace experiments_detail;
  if (state.paramnet.w.empty())
    throw std::invalid_argument("cmd_anatomy_eval: untrained checkpoint");
  const ParamNetWeights weights = with_reference(state.paramnet, cohort);
  const Volume3D& reference = weights.reference;
  const double voxel = reference.voxel_size_mm();
  const double fixed_sigma = fwhm_to_sigma(fixed_fwhm_mm, voxel);
  const GaussianKernel fixed_kernel =
      build_kernel(fixed_sigma, config.t, config.radius_convention);
  const Volume3D fixed_reference = smooth_volume(reference, fixed_kernel).z;

  AnatomyReport report;
  CsvWriter scatter({"schema_version", "subject_id", "volume_index", "diff_raw",
                     "fwhm_mm"});
  std::vector<double> subject_mean_fwhm;

  for (const auto& subject : cohort.subjects) {
    AnatomyRow row;
    row.subject_id = subject.id;
    std::vector<double> fwhms;

    // Subject-mean reference smoothing needs sigmas up front.
    std::vector<double> sigmas;
    for (const auto& x : subject.volumes) sigmas.push_back(eval_sigma(x, weights, config));
    double sigma_mean = 0.0;
    for (double s : sigmas) sigma_mean += s;
    sigma_mean /= static_cast<double>(sigmas.size());
    std::optional<Volume3D> mean_smoothed_reference;
    if (ref_mode == ReferenceSigmaMode::kSubjectMean)
      mean_smoothed_reference =
          smooth_volume(reference,
                        build_kernel(sigma_mean, config.t, config.radius_convention)).z;

    for (std::size_t i = 0; i < subject.volumes.size(); ++i) {
      const Volume3D& x = subject.volumes[i];
      const double diff_raw = ssd(x, reference);
      row.diff_raw += diff_raw;

      const Volume3D z_fixed = smooth_volume(x, fixed_kernel).z;
      row.diff_fixed += ssd(z_fixed, fixed_reference);
      row.penalty_fixed += ssd(x, z_fixed);

      const GaussianKernel k =
          build_kernel(sigmas[i], config.t, config.radius_convention);
      const Volume3D z_adaptive = smooth_volume(x, k).z;
      const Volume3D& ref_adaptive = ref_mode == ReferenceSigmaMode::kSubjectMean
                                         ? *mean_smoothed_reference
                                         : smooth_volume(reference, k).z;
      row.diff_adaptive += ssd(z_adaptive, ref_adaptive);
      row.penalty_adaptive += ssd(x, z_adaptive);

      const double fwhm = sigma_to_fwhm_mm(sigmas[i], voxel);
      fwhms.push_back(fwhm);
      scatter.add_row({std::to_string(kCsvSchemaVersion), subject.id, std::to_string(i),
                       format_double(diff_raw), format_double(fwhm)});
    }

    const double inv_n = 1.0 / static_cast<double>(subject.volumes.size());
    row.diff_raw *= inv_n;
    row.diff_fixed *= inv_n;
    row.diff_adaptive *= inv_n;
    row.penalty_fixed *= inv_n;
    row.penalty_adaptive *= inv_n;
    row.mean_fwhm_mm = mean_of(fwhms);
    row.fwhm_variance = variance_of(fwhms);
    subject_mean_fwhm.push_back(row.mean_fwhm_mm);
    report.rows.push_back(row);
  }

  const double inv_s = 1.0 / static_cast<double>(report.rows.size());
  for (const auto& r : report.rows) {
    report.mean_diff_raw += r.diff_raw * inv_s;
    report.mean_diff_fixed += r.diff_fixed * inv_s;
    report.mean_diff_adaptive += r.diff_adaptive * inv_s;
    report.mean_penalty_fixed += r.penalty_fixed * inv_s;
    report.mean_penalty_adaptive += r.penalty_adaptive * inv_s;
    report.mean_within_subject_fwhm_variance += r.fwhm_variance * inv_s;
  }
  report.between_subject_fwhm_variance = variance_of(subject_mean_fwhm);

  CsvWriter table({"schema_version", "subject_id", "diff_raw", "diff_fixed",
                   "diff_adaptive", "penalty_fixed", "penalty_adaptive", "mean_fwhm_mm"});
  for (const auto& r : report.rows)
    table.add_row({std::to_string(kCsvSchemaVersion), r.subject_id,
                   format_double(r.diff_raw), format_double(r.diff_fixed),
                   format_double(r.diff_adaptive), format_double(r.penalty_fixed),
                   format_double(r.penalty_adaptive), format_double(r.mean_fwhm_mm)});
  write_file_atomic(out_dir / "anatomy_table.csv", table.to_string());
  write_file_atomic(out_dir / "anatomy_scatter.csv", scatter.to_string());

  nlohmann::json summary = config_echo(config, 0);
  summary["fixed_fwhm_mm"] = fixed_fwhm_mm;
  summary["reference_sigma_mode"] =
      ref_mode == ReferenceSigmaMode::kPerVolume ? "per_volume" : "subject_mean";
  summary["mean_diff_raw"] = report.mean_diff_raw;
  summary["mean_diff_fixed"] = report.mean_diff_fixed;
  summary["mean_diff_adaptive"] = report.mean_diff_adaptive;
  summary["mean_penalty_fixed"] = report.mean_penalty_fixed;
  summary["mean_penalty_adaptive"] = report.mean_penalty_adaptive;
  summary["between_subject_fwhm_variance"] = report.between_subject_fwhm_variance;
  summary["mean_within_subject_fwhm_variance"] = report.mean_within_subject_fwhm_variance;
  write_json_atomic(out_dir / "anatomy_summary.json", summary);
  return report;
}

// ---------------------------------------------------------------------------
// Decoding evaluation

struct DecodeRow {
  std::string subject_id;
  std::string front;  // "adaptive" | "fixed8mm"
  double accuracy = 0.0;
  double permuted_accuracy = 0.0;
  double mean_fwhm_mm = 0.0;
};

struct DecodeReport {
  std::vector<DecodeRow> rows;
  double mean_accuracy_adaptive = 0.0;
  double mean_permuted_accuracy_adaptive = 0.0;
  double mean_fwhm_adaptive = 0.0;
};

inline DecodeReport cmd_decode_eval(const TrainState& state, const TrainConfig& config,
                                    const Cohort& cohort, double noise_sigma,
                                    std::uint64_t seed, const std::filesystem::path& out_dir,
                                    double fixed_fwhm_mm = 8.0) {
  using namespace experiments_detail;
  if (!state.has_decoder)
    throw std::invalid_argument("cmd_decode_eval: checkpoint has no decoder");
  const ParamNetWeights weights = state.paramnet;  // decoder was trained against this reference
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  DecodeReport report;
  CsvWriter csv({"schema_version", "subject_id", "front", "noise_sigma", "accuracy",
                 "permuted_accuracy", "mean_fwhm_mm"});
  int adaptive_rows = 0;

  for (const auto& subject : cohort.subjects) {
    std::vector<Volume3D> vols;
    std::vector<double> labels;
    for (std::size_t i = 0; i < subject.volumes.size(); ++i) {
      if (subject.labels.empty() || subject.labels[i] == Label::kRest) continue;
      vols.push_back(subject.volumes[i]);
      labels.push_back(subject.labels[i] == Label::kRight ? 1.0 : 0.0);
    }
    if (vols.size() < 2) continue;
    if (noise_sigma > 0.0)
      for (auto& v : vols)
        for (double& x : v.data()) x += noise_sigma * gauss(rng);

    std::vector<double> permuted = labels;
    std::shuffle(permuted.begin(), permuted.end(), rng);

    auto evaluate = [&](const std::string& front) {
      std::vector<Volume3D> smoothed;
      std::vector<double> fwhms;
      for (const auto& x : vols) {
        double sigma;
        if (front == "adaptive") {
          sigma = eval_sigma(x, weights, config);
        } else {
          sigma = fwhm_to_sigma(fixed_fwhm_mm, x.voxel_size_mm());
        }
        fwhms.push_back(sigma_to_fwhm_mm(sigma, x.voxel_size_mm()));
        smoothed.push_back(
            smooth_volume(x, build_kernel(sigma, config.t, config.radius_convention)).z);
      }
      const DecoderTape tape = decoder_forward(smoothed, state.decoder);
      auto accuracy_vs = [&tape](const std::vector<double>& ys) {
        int correct = 0;
        for (std::size_t i = 0; i < ys.size(); ++i)
          correct += (tape.probs[i] >= 0.5 ? 1.0 : 0.0) == ys[i];
        return static_cast<double>(correct) / static_cast<double>(ys.size());
      };
      DecodeRow row;
      row.subject_id = subject.id;
      row.front = front;
      row.accuracy = accuracy_vs(labels);
      row.permuted_accuracy = accuracy_vs(permuted);
      row.mean_fwhm_mm = mean_of(fwhms);
      return row;
    };

    for (const std::string front : {"adaptive", "fixed8mm"}) {
      const DecodeRow row = evaluate(front);
      report.rows.push_back(row);
      csv.add_row({std::to_string(kCsvSchemaVersion), row.subject_id, row.front,
                   format_double(noise_sigma), format_double(row.accuracy),
                   format_double(row.permuted_accuracy), format_double(row.mean_fwhm_mm)});
      if (front == "adaptive") {
        report.mean_accuracy_adaptive += row.accuracy;
        report.mean_permuted_accuracy_adaptive += row.permuted_accuracy;
        report.mean_fwhm_adaptive += row.mean_fwhm_mm;
        ++adaptive_rows;
      }
    }
  }
  if (adaptive_rows == 0)
    throw std::runtime_error("cmd_decode_eval: no labelled subjects to evaluate");
  report.mean_accuracy_adaptive /= adaptive_rows;
  report.mean_permuted_accuracy_adaptive /= adaptive_rows;
  report.mean_fwhm_adaptive /= adaptive_rows;

  write_file_atomic(out_dir / "decode_eval.csv", csv.to_string());
  nlohmann::json summary = config_echo(config, seed);
  summary["noise_sigma"] = noise_sigma;
  summary["fixed_fwhm_mm"] = fixed_fwhm_mm;
  summary["mean_accuracy_adaptive"] = report.mean_accuracy_adaptive;
  summary["mean_permuted_accuracy_adaptive"] = report.mean_permuted_accuracy_adaptive;
  summary["mean_fwhm_adaptive"] = report.mean_fwhm_adaptive;
  write_json_atomic(out_dir / "decode_eval_summary.json", summary);
  return report;
}

// ---------------------------------------------------------------------------
// Loss-curve CSV (epoch,total,variability,penalty,mean_sigma)

inline void write_loss_history(const TrainState& state, const std::filesystem::path& path) {
  CsvWriter csv({"epoch", "total", "variability", "penalty", "mean_sigma"});
  for (const auto& r : state.loss_history)
    csv.add_row({std::to_string(r.epoch), format_double(r.total),
                 format_double(r.variability), format_double(r.penalty),
                 format_double(r.mean_sigma)});
  write_file_atomic(path, csv.to_string());
}

}  // namespace adasmooth
