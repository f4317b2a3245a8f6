// Synthetic phantom cohort: a fixed smooth base phantom (superposition of
// 3D Gaussian blobs) warped by a per-subject random affine+TPS deformation,
// with per-volume additive noise and block-wise left/right/rest labels.
// Left/right volumes carry an activation blob in the corresponding lateral
// half (the width axis), placed symmetrically about the mid-sagittal plane
// so a linear readout can decode the condition.
//
// The blob table is a versioned fixture, not a knob.

#pragma once

#include <random>
#include <stdexcept>
#include <vector>

#include "adasmooth/augment.hpp"
#include "adasmooth/volume.hpp"

namespace adasmooth {

struct PhantomOptions {
  double voxel_size_mm = 3.0;
  double deformation_magnitude = 1.0;  // scales the per-subject warp caps
  double noise_max = 0.05;             // per-volume noise std drawn in [0, noise_max]
  double activation_amplitude = 0.3;
  double activation_sigma = 0.18;      // normalized coordinates
  int block_length = 2;                // volumes per condition block
};

namespace phantom_detail {

struct Blob {
  double cx, cy, cz;  // normalized coordinates
  double sigma;
  double amplitude;
};

// Fixture v1: a central mass plus laterally symmetric satellites.
inline const std::vector<Blob>& base_blobs() {
  static const std::vector<Blob> blobs = {
      {0.0, 0.0, 0.0, 0.55, 0.8},
      {0.35, 0.45, 0.2, 0.22, 0.45},
      {0.35, -0.45, 0.2, 0.22, 0.45},
      {-0.4, 0.3, -0.35, 0.20, 0.35},
      {-0.4, -0.3, -0.35, 0.20, 0.35},
      {0.1, 0.0, 0.55, 0.18, 0.3},
  };
  return blobs;
}

inline double blob_value(const Blob& b, double px, double py, double pz) {
  const double dx = px - b.cx, dy = py - b.cy, dz = pz - b.cz;
  return b.amplitude * std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * b.sigma * b.sigma));
}

}  // namespace phantom_detail

inline Volume3D make_base_phantom(Dims3 dims, double voxel_size_mm = 3.0) {
  if (dims.h < 8 || dims.w < 8 || dims.d < 8)
    throw std::invalid_argument("make_base_phantom: dims must be >= 8 per axis");
  Volume3D vol(dims, voxel_size_mm);
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        const double px = detail::voxel_to_norm(h, dims.h);
        const double py = detail::voxel_to_norm(w, dims.w);
        const double pz = detail::voxel_to_norm(d, dims.d);
        double v = 0.0;
        for (const auto& b : phantom_detail::base_blobs())
          v += phantom_detail::blob_value(b, px, py, pz);
        vol.at(h, w, d) = v;
      }
  return vol;
}

// Activation blob centred in the lateral half named by the label; the width
// axis plays the left/right role, mirrored about w = 0.
inline void add_activation(Volume3D& vol, Label label, const PhantomOptions& opt) {
  if (label == Label::kRest) return;
  const Dims3 dims = vol.dims();
  const double cy = label == Label::kLeft ? -0.5 : 0.5;
  const phantom_detail::Blob blob{0.0, cy, 0.0, opt.activation_sigma, opt.activation_amplitude};
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d)
        vol.at(h, w, d) += phantom_detail::blob_value(
            blob, detail::voxel_to_norm(h, dims.h), detail::voxel_to_norm(w, dims.w),
            detail::voxel_to_norm(d, dims.d));
}

inline Label block_label(int volume_index, int block_length) {
  // Cycle: left block, rest block, right block, rest block.
  const int phase = (volume_index / block_length) % 4;
  switch (phase) {
    case 0: return Label::kLeft;
    case 2: return Label::kRight;
    default: return Label::kRest;
  }
}

inline Cohort generate_phantom_cohort(std::uint64_t seed, int n_subjects, int n_volumes,
                                      Dims3 dims, const PhantomOptions& opt = {}) {
  if (n_subjects < 2)
    throw std::invalid_argument("generate_phantom_cohort: need at least 2 subjects");
  if (n_volumes < 1)
    throw std::invalid_argument("generate_phantom_cohort: need at least 1 volume");
  const Volume3D base = make_base_phantom(dims, opt.voxel_size_mm);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  DeformCaps caps;  // default caps; scaled by the deformation magnitude
  Cohort cohort;
  for (int s = 0; s < n_subjects; ++s) {
    Subject subject;
    subject.id = "subj" + std::string(s < 10 ? "0" : "") + std::to_string(s);

    const AugmentParams theta =
        sample_sweep_theta(caps, opt.deformation_magnitude, rng);
    const Volume3D anatomy =
        opt.deformation_magnitude > 0.0 ? warp_volume(base, theta) : base;

    for (int v = 0; v < n_volumes; ++v) {
      const Label label = block_label(v, opt.block_length);
      Volume3D vol = anatomy;
      add_activation(vol, label, opt);
      const double noise_std = opt.noise_max * unit(rng);
      if (noise_std > 0.0)
        for (double& x : vol.data()) x += noise_std * gauss(rng);
      subject.volumes.push_back(std::move(vol));
      subject.labels.push_back(label);
    }
    cohort.subjects.push_back(std::move(subject));
  }
  cohort.validate();
  return cohort;
}

}  // namespace adasmooth
