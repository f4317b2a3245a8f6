// Command-line harness: phantom cohort generation, augmentation fitting,
// training, gradient checking, and the experiment commands. All outputs are
// CSV/JSON; figures are left to downstream tooling.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adasmooth/adasmooth.hpp"

namespace fs = std::filesystem;
using namespace adasmooth;

namespace {

TrainConfig load_config(const std::string& path, std::uint64_t seed_override,
                        bool seed_given) {
  TrainConfig config;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    config = j.get<TrainConfig>();
  }
  if (seed_given) config.seed = seed_override;
  config.degeneracy.truncation_t = config.t;
  return config;
}

Cohort load_normalized(const std::string& dir) {
  return normalize_cohort(load_cohort(dir));
}

void print_sweep(const SweepReport& report, const std::string& name) {
  std::cout << name << ": " << report.rho.size() << " rows";
  if (report.spearman_corr)
    std::cout << ", spearman " << *report.spearman_corr;
  if (report.pearson_corr)
    std::cout << ", pearson " << *report.pearson_corr;
  if (!report.spearman_corr && report.rho.size() >= 10)
    std::cout << ", correlation undefined (constant input)";
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive spatial smoothing for 3D volumes"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "out";
  app.add_option("--config", config_path, "JSON config file")->capture_default_str();
  app.add_option("--seed", seed, "RNG seed")->each([&](const std::string&) { seed_given = true; });
  app.add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  // --- phantom -------------------------------------------------------------
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom cohort");
  int ph_subjects = 15, ph_volumes = 20;
  std::vector<int> ph_dims = {16, 16, 16};
  double ph_noise = 0.05, ph_deform = 1.0, ph_activation = 0.3;
  phantom->add_option("--subjects", ph_subjects)->capture_default_str();
  phantom->add_option("--volumes", ph_volumes)->capture_default_str();
  phantom->add_option("--dims", ph_dims, "H W D")->expected(3);
  phantom->add_option("--noise-max", ph_noise)->capture_default_str();
  phantom->add_option("--deform", ph_deform, "Deformation magnitude")->capture_default_str();
  phantom->add_option("--activation", ph_activation)->capture_default_str();

  // --- fit-augment ----------------------------------------------------------
  auto* fit = app.add_subcommand("fit-augment", "Fit the augmentation distribution");
  std::string fit_cohort;
  AlignConfig align;
  fit->add_option("--cohort", fit_cohort)->required();
  fit->add_option("--iterations", align.iterations)->capture_default_str();
  fit->add_option("--step", align.step_size)->capture_default_str();
  bool unordered = false;
  fit->add_flag("--unordered-pairs", unordered);
  fit->add_option("--shrinkage", align.shrinkage)->capture_default_str();

  // --- train ------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train the adaptive smoother");
  std::string train_cohort, train_dist;
  train->add_option("--cohort", train_cohort)->required();
  train->add_option("--dist", train_dist, "Fitted augmentation distribution")->required();

  // --- train-decoder -----------------------------------------------------
  auto* traindec = app.add_subcommand("train-decoder", "Fine-tune with the decoding head");
  std::string dec_cohort, dec_checkpoint;
  bool freeze_paramnet = false;
  double dec_noise = 0.0;
  traindec->add_option("--cohort", dec_cohort)->required();
  traindec->add_option("--checkpoint", dec_checkpoint, "Pre-trained smoother")->required();
  traindec->add_flag("--freeze-paramnet", freeze_paramnet);
  traindec->add_option("--noise-sigma", dec_noise)->capture_default_str();

  // --- gradcheck ----------------------------------------------------------
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  double gc_sigma = 1.2;
  gradcheck->add_option("--sigma", gc_sigma, "Sigma probe")->capture_default_str();

  // --- noise-sweep ---------------------------------------------------------
  auto* noise = app.add_subcommand("noise-sweep", "FWHM vs uniform-noise level");
  std::string ns_checkpoint, ns_cohort;
  double ns_m = 0.25;
  int ns_reps = 10;
  noise->add_option("--checkpoint", ns_checkpoint)->required();
  noise->add_option("--cohort", ns_cohort)->required();
  noise->add_option("--m", ns_m, "Maximum noise level")->capture_default_str();
  noise->add_option("--repetitions", ns_reps)->capture_default_str();

  // --- deform-sweep ---------------------------------------------------------
  auto* deform = app.add_subcommand("deform-sweep", "FWHM vs deformation level");
  std::string ds_checkpoint, ds_cohort;
  int ds_reps = 10;
  DeformCaps caps;
  deform->add_option("--checkpoint", ds_checkpoint)->required();
  deform->add_option("--cohort", ds_cohort)->required();
  deform->add_option("--repetitions", ds_reps)->capture_default_str();
  deform->add_option("--cap-translation", caps.translation)->capture_default_str();
  deform->add_option("--cap-scale", caps.scale)->capture_default_str();
  deform->add_option("--cap-shear", caps.shear)->capture_default_str();
  deform->add_option("--cap-rotation", caps.rotation)->capture_default_str();
  deform->add_option("--cap-tps", caps.tps)->capture_default_str();

  // --- anatomy-eval -------------------------------------------------------
  auto* anatomy = app.add_subcommand("anatomy-eval", "Inter-subject difference trade-off");
  std::string an_checkpoint, an_cohort, an_ref_mode = "per_volume";
  double an_fwhm = 8.0;
  anatomy->add_option("--checkpoint", an_checkpoint)->required();
  anatomy->add_option("--cohort", an_cohort)->required();
  anatomy->add_option("--fixed-fwhm", an_fwhm)->capture_default_str();
  anatomy->add_option("--reference-sigma-mode", an_ref_mode, "per_volume|subject_mean")
      ->capture_default_str();

  // --- decode-eval ----------------------------------------------------------
  auto* decode = app.add_subcommand("decode-eval", "Decoding accuracy and FWHM");
  std::string de_checkpoint, de_cohort;
  double de_noise = 0.0, de_fixed_fwhm = 8.0;
  decode->add_option("--checkpoint", de_checkpoint)->required();
  decode->add_option("--cohort", de_cohort)->required();
  decode->add_option("--noise-sigma", de_noise)->capture_default_str();
  decode->add_option("--fixed-fwhm", de_fixed_fwhm)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const TrainConfig config = load_config(config_path, seed, seed_given);
    fs::create_directories(out_dir);

    if (phantom->parsed()) {
      PhantomOptions opt;
      opt.noise_max = ph_noise;
      opt.deformation_magnitude = ph_deform;
      opt.activation_amplitude = ph_activation;
      const Cohort cohort = generate_phantom_cohort(
          config.seed, ph_subjects, ph_volumes,
          Dims3{ph_dims[0], ph_dims[1], ph_dims[2]}, opt);
      save_cohort(cohort, out_dir);
      std::cout << "phantom: wrote " << ph_subjects << " subjects x " << ph_volumes
                << " volumes to " << out_dir << "\n";
    } else if (fit->parsed()) {
      align.ordered_pairs = !unordered;
      const Cohort cohort = load_normalized(fit_cohort);
      std::vector<PairFitResult> pair_log;
      const ParamDistribution dist = fit_pairwise_alignment(cohort, align, &pair_log);
      save_distribution(dist, fs::path(out_dir) / "augment_dist.bin");
      CsvWriter csv({"schema_version", "target", "moving", "initial_mse", "final_mse",
                     "converged"});
      for (const auto& p : pair_log)
        csv.add_row({std::to_string(kCsvSchemaVersion), p.target_id, p.moving_id,
                     format_double(p.initial_mse), format_double(p.final_mse),
                     p.converged ? "1" : "0"});
      write_file_atomic(fs::path(out_dir) / "pair_alignment.csv", csv.to_string());
      int dropped = 0;
      for (const auto& p : pair_log) dropped += !p.converged;
      if (dropped > 0)
        std::cerr << "warning: dropped " << dropped << " diverged pair fits\n";
      std::cout << "fit-augment: " << pair_log.size() << " pairs fitted\n";
    } else if (train->parsed()) {
      const Cohort cohort = load_normalized(train_cohort);
      const ParamDistribution dist = load_distribution(train_dist);
      const TrainState state = train_smoother(cohort, dist, config);
      save_train_state(state, config, out_dir);
      write_loss_history(state, fs::path(out_dir) / "loss_history.csv");
      std::cout << "train: " << state.completed_epochs << " epochs, final loss "
                << (state.loss_history.empty() ? 0.0 : state.loss_history.back().total)
                << ", radius jumps " << state.radius_jump_count << "\n";
    } else if (traindec->parsed()) {
      const Cohort cohort = load_normalized(dec_cohort);
      const TrainState pretrained = load_train_state(dec_checkpoint);
      const TrainState state =
          train_decoder(cohort, pretrained, config, freeze_paramnet, dec_noise);
      save_train_state(state, config, out_dir);
      write_loss_history(state, fs::path(out_dir) / "loss_history.csv");
      std::cout << "train-decoder: " << state.completed_epochs << " epochs, final loss "
                << (state.loss_history.empty() ? 0.0 : state.loss_history.back().total)
                << "\n";
    } else if (gradcheck->parsed()) {
      const GradCheckReport report = gradient_check(config, config.seed, gc_sigma);
      nlohmann::json out = nlohmann::json::array();
      for (const auto& p : report.paths) {
        std::cout << (p.excluded ? "EXCLUDED " : (p.passed ? "PASS " : "FAIL "))
                  << p.name << ": max rel err " << p.max_rel_err << " (tol "
                  << p.tolerance << ")" << (p.note.empty() ? "" : " -- " + p.note)
                  << "\n";
        out.push_back({{"path", p.name},
                       {"max_rel_err", p.max_rel_err},
                       {"tolerance", p.tolerance},
                       {"passed", p.passed},
                       {"excluded", p.excluded},
                       {"note", p.note}});
      }
      write_json_atomic(fs::path(out_dir) / "gradcheck.json", out);
      if (!report.all_passed()) return 1;
    } else if (noise->parsed()) {
      const Cohort cohort = load_normalized(ns_cohort);
      const TrainState state = load_train_state(ns_checkpoint);
      const SweepReport report = cmd_noise_sweep(state, config, cohort, ns_m, ns_reps,
                                                 config.seed, out_dir);
      print_sweep(report, "noise-sweep");
    } else if (deform->parsed()) {
      const Cohort cohort = load_normalized(ds_cohort);
      const TrainState state = load_train_state(ds_checkpoint);
      const SweepReport report = cmd_deform_sweep(state, config, cohort, caps, ds_reps,
                                                  config.seed, out_dir);
      print_sweep(report, "deform-sweep");
    } else if (anatomy->parsed()) {
      const Cohort cohort = load_normalized(an_cohort);
      const TrainState state = load_train_state(an_checkpoint);
      const ReferenceSigmaMode mode = an_ref_mode == "subject_mean"
                                          ? ReferenceSigmaMode::kSubjectMean
                                          : ReferenceSigmaMode::kPerVolume;
      const AnatomyReport report =
          cmd_anatomy_eval(state, config, cohort, an_fwhm, out_dir, mode);
      std::cout << "anatomy-eval: mean diff raw " << report.mean_diff_raw << ", fixed "
                << report.mean_diff_fixed << ", adaptive " << report.mean_diff_adaptive
                << "; penalty fixed " << report.mean_penalty_fixed << ", adaptive "
                << report.mean_penalty_adaptive << "\n";
    } else if (decode->parsed()) {
      const Cohort cohort = load_normalized(de_cohort);
      const TrainState state = load_train_state(de_checkpoint);
      const DecodeReport report = cmd_decode_eval(state, config, cohort, de_noise,
                                                  config.seed, out_dir, de_fixed_fwhm);
      std::cout << "decode-eval: mean adaptive accuracy " << report.mean_accuracy_adaptive
                << ", permuted " << report.mean_permuted_accuracy_adaptive
                << ", mean adaptive FWHM " << report.mean_fwhm_adaptive << " mm\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
