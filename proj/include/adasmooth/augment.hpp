// Realistic sample generation: a 3D affine transform composed with a
// thin-plate-spline displacement field, applied by inverse mapping with
// trilinear resampling; a pairwise-alignment fitter producing a Gaussian
// distribution over the 204 transformation parameters; and samplers.
//
// Coordinates are normalized to [-1,1]^3 per axis. An output voxel at
// normalized position p samples the input at c = A*[p;1] + d(A*[p;1]),
// where d is the TPS-interpolated displacement field of a fixed 4x4x4
// control grid with radial basis U(r) = r (the 3D biharmonic kernel).

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "adasmooth/volume.hpp"

namespace adasmooth {

inline constexpr int kTpsGridSide = 4;
inline constexpr int kTpsControlCount = kTpsGridSide * kTpsGridSide * kTpsGridSide;  // 64
inline constexpr int kTpsParamCount = kTpsControlCount * 3;                          // 192
inline constexpr int kAffineParamCount = 12;
inline constexpr int kThetaDim = kAffineParamCount + kTpsParamCount;                 // 204

struct AugmentParams {
  // Row-major 3x4 matrix acting on homogeneous normalized coordinates.
  std::array<double, kAffineParamCount> affine{};
  // Control displacements, control-major then component: tps[c*3 + m].
  std::array<double, kTpsParamCount> tps{};

  static AugmentParams identity() {
    AugmentParams p;
    p.affine = {1, 0, 0, 0,
                0, 1, 0, 0,
                0, 0, 1, 0};
    return p;
  }

  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(kThetaDim);
    for (int i = 0; i < kAffineParamCount; ++i) v[i] = affine[i];
    for (int i = 0; i < kTpsParamCount; ++i) v[kAffineParamCount + i] = tps[i];
    return v;
  }

  static AugmentParams from_vector(const Eigen::VectorXd& v) {
    if (v.size() != kThetaDim)
      throw std::invalid_argument("AugmentParams: vector must have 204 entries");
    AugmentParams p;
    for (int i = 0; i < kAffineParamCount; ++i) p.affine[i] = v[i];
    for (int i = 0; i < kTpsParamCount; ++i) p.tps[i] = v[kAffineParamCount + i];
    return p;
  }
};

namespace tps {

inline const std::array<Eigen::Vector3d, kTpsControlCount>& control_points() {
  static const auto pts = [] {
    std::array<Eigen::Vector3d, kTpsControlCount> p;
    int c = 0;
    for (int ix = 0; ix < kTpsGridSide; ++ix)
      for (int iy = 0; iy < kTpsGridSide; ++iy)
        for (int iz = 0; iz < kTpsGridSide; ++iz, ++c) {
          auto coord = [](int i) { return -1.0 + 2.0 * i / (kTpsGridSide - 1); };
          p[c] = Eigen::Vector3d(coord(ix), coord(iy), coord(iz));
        }
    return p;
  }();
  return pts;
}

// Solves the TPS interpolation system once for the fixed control grid:
// [[K, P],[P^T, 0]] C = [D; 0]. Returns the 68x64 map from control
// displacements D to spline coefficients C.
inline const Eigen::MatrixXd& coefficient_map() {
  static const Eigen::MatrixXd map = [] {
    constexpr int n = kTpsControlCount;
    const auto& pts = control_points();
    Eigen::MatrixXd system(n + 4, n + 4);
    system.setZero();
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b)
        system(a, b) = (pts[a] - pts[b]).norm();  // U(r) = r
      system(a, n) = 1.0;
      system(a, n + 1) = pts[a].x();
      system(a, n + 2) = pts[a].y();
      system(a, n + 3) = pts[a].z();
      system(n, a) = 1.0;
      system(n + 1, a) = pts[a].x();
      system(n + 2, a) = pts[a].y();
      system(n + 3, a) = pts[a].z();
    }
    const Eigen::MatrixXd inv = system.partialPivLu().inverse();
    return Eigen::MatrixXd(inv.leftCols(n));
  }();
  return map;
}

// Basis vector [U(|q - P_1|) .. U(|q - P_64|), 1, qx, qy, qz].
inline void basis(const Eigen::Vector3d& q, Eigen::VectorXd& phi) {
  const auto& pts = control_points();
  phi.resize(kTpsControlCount + 4);
  for (int c = 0; c < kTpsControlCount; ++c) phi[c] = (q - pts[c]).norm();
  phi[kTpsControlCount] = 1.0;
  phi[kTpsControlCount + 1] = q.x();
  phi[kTpsControlCount + 2] = q.y();
  phi[kTpsControlCount + 3] = q.z();
}

// Gradient of the basis with respect to q, one column per basis entry.
inline void basis_gradient(const Eigen::Vector3d& q, Eigen::Matrix3Xd& dphi) {
  const auto& pts = control_points();
  dphi.resize(3, kTpsControlCount + 4);
  for (int c = 0; c < kTpsControlCount; ++c) {
    const Eigen::Vector3d diff = q - pts[c];
    const double r = diff.norm();
    dphi.col(c) = r > 1e-12 ? Eigen::Vector3d(diff / r) : Eigen::Vector3d::Zero();
  }
  dphi.col(kTpsControlCount).setZero();
  dphi.col(kTpsControlCount + 1) = Eigen::Vector3d::UnitX();
  dphi.col(kTpsControlCount + 2) = Eigen::Vector3d::UnitY();
  dphi.col(kTpsControlCount + 3) = Eigen::Vector3d::UnitZ();
}

}  // namespace tps

// Spline coefficients for one parameter set, reused across all voxels.
struct TpsField {
  Eigen::MatrixXd coeffs;  // 68 x 3

  explicit TpsField(const AugmentParams& theta) {
    Eigen::MatrixXd displacements(kTpsControlCount, 3);
    for (int c = 0; c < kTpsControlCount; ++c)
      for (int m = 0; m < 3; ++m)
        displacements(c, m) = theta.tps[static_cast<std::size_t>(c) * 3 + m];
    coeffs = tps::coefficient_map() * displacements;
  }

  Eigen::Vector3d displacement(const Eigen::VectorXd& phi) const {
    return (phi.transpose() * coeffs).transpose();
  }
};

namespace detail {

inline Eigen::Vector3d apply_affine(const AugmentParams& theta, const Eigen::Vector3d& p) {
  Eigen::Vector3d q;
  for (int i = 0; i < 3; ++i)
    q[i] = theta.affine[i * 4 + 0] * p.x() + theta.affine[i * 4 + 1] * p.y() +
           theta.affine[i * 4 + 2] * p.z() + theta.affine[i * 4 + 3];
  return q;
}

inline double norm_to_voxel(double coord, int n) {
  return n > 1 ? (coord + 1.0) * 0.5 * (n - 1) : 0.0;
}

inline double voxel_to_norm(int idx, int n) {
  return n > 1 ? 2.0 * idx / (n - 1) - 1.0 : 0.0;
}

// Trilinear sample at voxel coordinates, zero outside; optionally reports
// the spatial gradient with respect to the voxel coordinates.
inline double trilinear_sample(const Volume3D& x, double vh, double vw, double vd,
                               Eigen::Vector3d* grad = nullptr) {
  const int h0 = static_cast<int>(std::floor(vh));
  const int w0 = static_cast<int>(std::floor(vw));
  const int d0 = static_cast<int>(std::floor(vd));
  const double fh = vh - h0, fw = vw - w0, fd = vd - d0;

  double value = 0.0;
  if (grad) grad->setZero();
  for (int dh = 0; dh < 2; ++dh)
    for (int dw = 0; dw < 2; ++dw)
      for (int dd = 0; dd < 2; ++dd) {
        const double corner = x.at_or_zero(h0 + dh, w0 + dw, d0 + dd);
        if (corner == 0.0) continue;
        const double wh = dh ? fh : 1.0 - fh;
        const double ww = dw ? fw : 1.0 - fw;
        const double wd = dd ? fd : 1.0 - fd;
        value += corner * wh * ww * wd;
        if (grad) {
          (*grad)[0] += corner * (dh ? 1.0 : -1.0) * ww * wd;
          (*grad)[1] += corner * wh * (dw ? 1.0 : -1.0) * wd;
          (*grad)[2] += corner * wh * ww * (dd ? 1.0 : -1.0);
        }
      }
  return value;
}

}  // namespace detail

inline Volume3D warp_volume(const Volume3D& x, const AugmentParams& theta) {
  const Dims3 dims = x.dims();
  const TpsField field(theta);
  Volume3D out(dims, x.voxel_size_mm());
  Eigen::VectorXd phi;
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        const Eigen::Vector3d p(detail::voxel_to_norm(h, dims.h),
                                detail::voxel_to_norm(w, dims.w),
                                detail::voxel_to_norm(d, dims.d));
        const Eigen::Vector3d q = detail::apply_affine(theta, p);
        tps::basis(q, phi);
        const Eigen::Vector3d c = q + field.displacement(phi);
        out.at(h, w, d) = detail::trilinear_sample(
            x, detail::norm_to_voxel(c.x(), dims.h),
            detail::norm_to_voxel(c.y(), dims.w),
            detail::norm_to_voxel(c.z(), dims.d));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise alignment

struct AlignConfig {
  int iterations = 200;
  double step_size = 1.0;
  int divergence_patience = 10;  // consecutive loss increases before giving up
  bool ordered_pairs = true;     // fit both (a,b) and (b,a)
  double shrinkage = 0.1;        // covariance shrinkage toward its diagonal
};

struct PairFitResult {
  std::string target_id;
  std::string moving_id;
  AugmentParams theta;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  bool converged = true;
};

namespace detail {

// Mean squared alignment error and its gradient with respect to theta.
inline double alignment_loss_and_gradient(const Volume3D& target, const Volume3D& moving,
                                          const AugmentParams& theta,
                                          Eigen::VectorXd* gradient) {
  const Dims3 dims = target.dims();
  const TpsField field(theta);
  const double inv_count = 1.0 / static_cast<double>(dims.count());

  Eigen::Matrix<double, 3, 4> grad_affine = Eigen::Matrix<double, 3, 4>::Zero();
  Eigen::MatrixXd grad_coeffs = Eigen::MatrixXd::Zero(kTpsControlCount + 4, 3);
  Eigen::VectorXd phi;
  Eigen::Matrix3Xd dphi;
  double loss = 0.0;

  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        const Eigen::Vector3d p(voxel_to_norm(h, dims.h), voxel_to_norm(w, dims.w),
                                voxel_to_norm(d, dims.d));
        const Eigen::Vector3d q = apply_affine(theta, p);
        tps::basis(q, phi);
        const Eigen::Vector3d c = q + field.displacement(phi);

        Eigen::Vector3d sample_grad;  // w.r.t. voxel coordinates
        const double value = trilinear_sample(
            moving, norm_to_voxel(c.x(), dims.h), norm_to_voxel(c.y(), dims.w),
            norm_to_voxel(c.z(), dims.d), &sample_grad);
        const double residual = target.at(h, w, d) - value;
        loss += residual * residual;
        if (!gradient) continue;

        // dL/dc in normalized coordinates.
        Eigen::Vector3d u;
        u[0] = -2.0 * residual * sample_grad[0] * 0.5 * (dims.h - 1);
        u[1] = -2.0 * residual * sample_grad[1] * 0.5 * (dims.w - 1);
        u[2] = -2.0 * residual * sample_grad[2] * 0.5 * (dims.d - 1);

        // Spline coefficients: d(q) = phi^T C, linear in C.
        grad_coeffs.noalias() += phi * u.transpose();

        // Affine: c = q + d(q); dc_m/dq_i = delta + dd_m/dq_i.
        tps::basis_gradient(q, dphi);
        const Eigen::Matrix3d dd_dq = dphi * field.coeffs;  // rows: d/dq_i of d_m
        const Eigen::Vector3d v = u + dd_dq * u;            // (J^T u) with J = I + dd
        const Eigen::Vector4d ph(p.x(), p.y(), p.z(), 1.0);
        grad_affine.noalias() += v * ph.transpose();
      }

  if (gradient) {
    gradient->resize(kThetaDim);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j)
        (*gradient)[i * 4 + j] = grad_affine(i, j) * inv_count;
    const Eigen::MatrixXd grad_disp = tps::coefficient_map().transpose() * grad_coeffs;
    for (int c = 0; c < kTpsControlCount; ++c)
      for (int m = 0; m < 3; ++m)
        (*gradient)[kAffineParamCount + c * 3 + m] = grad_disp(c, m) * inv_count;
  }
  return loss * inv_count;
}

}  // namespace detail

inline PairFitResult fit_pair(const Volume3D& target, const Volume3D& moving,
                              const AlignConfig& config) {
  AugmentParams theta = AugmentParams::identity();
  Eigen::VectorXd theta_vec = theta.to_vector();
  Eigen::VectorXd gradient;

  PairFitResult result;
  result.initial_mse =
      detail::alignment_loss_and_gradient(target, moving, theta, nullptr);
  double best = result.initial_mse;
  Eigen::VectorXd best_theta = theta_vec;
  double previous = result.initial_mse;
  int increases = 0;

  for (int it = 0; it < config.iterations; ++it) {
    const double loss =
        detail::alignment_loss_and_gradient(target, moving, theta, &gradient);
    if (loss < best) {
      best = loss;
      best_theta = theta_vec;
    }
    if (loss > previous) {
      if (++increases >= config.divergence_patience) {
        result.converged = false;
        break;
      }
    } else {
      increases = 0;
    }
    previous = loss;
    theta_vec -= config.step_size * gradient;
    theta = AugmentParams::from_vector(theta_vec);
  }
  const double final_loss =
      detail::alignment_loss_and_gradient(target, moving, theta, nullptr);
  if (final_loss < best) {
    best = final_loss;
    best_theta = theta_vec;
  }
  result.theta = AugmentParams::from_vector(best_theta);
  result.final_mse = best;
  return result;
}

struct ParamDistribution {
  Eigen::VectorXd mu;            // 204
  Eigen::MatrixXd sigma_matrix;  // 204 x 204, symmetric PSD

  void validate() const {
    if (mu.size() != kThetaDim || sigma_matrix.rows() != kThetaDim ||
        sigma_matrix.cols() != kThetaDim)
      throw std::runtime_error("ParamDistribution: wrong dimensions");
    if ((sigma_matrix - sigma_matrix.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw std::runtime_error("ParamDistribution: covariance not symmetric");
  }
};

inline ParamDistribution fit_pairwise_alignment(const Cohort& cohort,
                                                const AlignConfig& config = {},
                                                std::vector<PairFitResult>* pair_log = nullptr) {
  const std::size_t n = cohort.subjects.size();
  // Two subjects are enough to fit pairs; a nondegenerate covariance wants
  // three or more, and shrinkage keeps the small-sample estimate PSD.
  if (n < 2)
    throw std::invalid_argument("fit_pairwise_alignment: need at least 2 subjects");

  std::vector<Eigen::VectorXd> fitted;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      if (!config.ordered_pairs && b < a) continue;
      PairFitResult fit = fit_pair(cohort.subjects[a].volumes.front(),
                                   cohort.subjects[b].volumes.front(), config);
      fit.target_id = cohort.subjects[a].id;
      fit.moving_id = cohort.subjects[b].id;
      if (fit.converged) {
        fitted.push_back(fit.theta.to_vector());
      }
      if (pair_log) pair_log->push_back(fit);
    }
  if (fitted.size() < 2)
    throw std::runtime_error("fit_pairwise_alignment: too few converged pairs");

  ParamDistribution dist;
  dist.mu = Eigen::VectorXd::Zero(kThetaDim);
  for (const auto& v : fitted) dist.mu += v;
  dist.mu /= static_cast<double>(fitted.size());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(kThetaDim, kThetaDim);
  for (const auto& v : fitted) {
    const Eigen::VectorXd dev = v - dist.mu;
    cov.noalias() += dev * dev.transpose();
  }
  cov /= static_cast<double>(fitted.size() - 1);
  // Shrink toward the diagonal; keeps PSD and repairs rank deficiency.
  dist.sigma_matrix = (1.0 - config.shrinkage) * cov +
                      config.shrinkage * Eigen::MatrixXd(cov.diagonal().asDiagonal());
  dist.sigma_matrix = 0.5 * (dist.sigma_matrix + dist.sigma_matrix.transpose());
  return dist;
}

// ---------------------------------------------------------------------------
// Sampling

template <typename Rng>
AugmentParams sample_theta(const ParamDistribution& dist, Rng& rng) {
  dist.validate();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(dist.sigma_matrix);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("sample_theta: eigendecomposition failed");
  Eigen::VectorXd eigenvalues = solver.eigenvalues();
  if (eigenvalues.minCoeff() < -1e-8)
    throw std::runtime_error("sample_theta: covariance not PSD after shrinkage");
  eigenvalues = eigenvalues.cwiseMax(0.0);

  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd xi(kThetaDim);
  for (int i = 0; i < kThetaDim; ++i) xi[i] = gauss(rng);
  const Eigen::VectorXd sample =
      dist.mu + solver.eigenvectors() * (eigenvalues.cwiseSqrt().asDiagonal() * xi);
  return AugmentParams::from_vector(sample);
}

template <typename Rng>
std::vector<Volume3D> augment_batch(const Cohort& cohort, const ParamDistribution& dist,
                                    int per_subject, Rng& rng) {
  std::vector<Volume3D> batch;
  for (const auto& subject : cohort.subjects) {
    if (per_subject > static_cast<int>(subject.volumes.size()))
      throw std::invalid_argument("augment_batch: per_subject exceeds volume count");
    // Draw indices without replacement (partial Fisher-Yates).
    std::vector<int> indices(subject.volumes.size());
    std::iota(indices.begin(), indices.end(), 0);
    for (int i = 0; i < per_subject; ++i) {
      std::uniform_int_distribution<int> pick(i, static_cast<int>(indices.size()) - 1);
      std::swap(indices[i], indices[pick(rng)]);
      const AugmentParams theta = sample_theta(dist, rng);
      batch.push_back(warp_volume(subject.volumes[indices[i]], theta));
    }
  }
  return batch;
}

// Sweep-style parameters: independent uniform draws in [-cap*rho, +cap*rho]
// per component, composed as rotation * (scale + shear) plus translation.
struct DeformCaps {
  double translation = 0.05;
  double scale = 0.05;
  double shear = 0.05;
  double rotation = M_PI / 32.0;
  double tps = 0.05;
};

template <typename Rng>
AugmentParams sample_sweep_theta(const DeformCaps& caps, double rho, Rng& rng) {
  auto u = [&rng](double cap) {
    std::uniform_real_distribution<double> dist(-cap, cap);
    return dist(rng);
  };
  const double rx = u(caps.rotation * rho), ry = u(caps.rotation * rho),
               rz = u(caps.rotation * rho);
  Eigen::Matrix3d rot;
  rot = Eigen::AngleAxisd(rz, Eigen::Vector3d::UnitZ()) *
        Eigen::AngleAxisd(ry, Eigen::Vector3d::UnitY()) *
        Eigen::AngleAxisd(rx, Eigen::Vector3d::UnitX());
  Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
  for (int i = 0; i < 3; ++i) linear(i, i) += u(caps.scale * rho);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) linear(i, j) += u(caps.shear * rho);
  linear = rot * linear;

  AugmentParams theta = AugmentParams::identity();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) theta.affine[i * 4 + j] = linear(i, j);
    theta.affine[i * 4 + 3] = u(caps.translation * rho);
  }
  for (auto& t : theta.tps) t = u(caps.tps * rho);
  return theta;
}

// ---------------------------------------------------------------------------
// Serialization: JSON header + mu, then raw little-endian float32 covariance.

inline void save_distribution(const ParamDistribution& dist, const std::filesystem::path& path) {
  dist.validate();
  nlohmann::json hdr;
  hdr["format_version"] = 1;
  hdr["dim"] = kThetaDim;
  hdr["mu"] = std::vector<double>(dist.mu.data(), dist.mu.data() + dist.mu.size());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_distribution: cannot open " + path.string());
  out << hdr.dump() << "\n";
  std::vector<float> buf(kThetaDim * kThetaDim);
  for (int i = 0; i < kThetaDim; ++i)
    for (int j = 0; j < kThetaDim; ++j)
      buf[static_cast<std::size_t>(i) * kThetaDim + j] =
          static_cast<float>(dist.sigma_matrix(i, j));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("save_distribution: write failed");
}

inline ParamDistribution load_distribution(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_distribution: cannot open " + path.string());
  std::string header_line;
  std::getline(in, header_line);
  nlohmann::json hdr = nlohmann::json::parse(header_line);
  if (hdr.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_distribution: unsupported format version");
  if (hdr.at("dim").get<int>() != kThetaDim)
    throw std::runtime_error("load_distribution: unexpected parameter dimension");

  ParamDistribution dist;
  dist.mu.resize(kThetaDim);
  const auto mu = hdr.at("mu");
  for (int i = 0; i < kThetaDim; ++i) dist.mu[i] = mu[i].get<double>();
  std::vector<float> buf(kThetaDim * kThetaDim);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error("load_distribution: truncated covariance");
  dist.sigma_matrix.resize(kThetaDim, kThetaDim);
  for (int i = 0; i < kThetaDim; ++i)
    for (int j = 0; j < kThetaDim; ++j)
      dist.sigma_matrix(i, j) = buf[static_cast<std::size_t>(i) * kThetaDim + j];
  dist.sigma_matrix = 0.5 * (dist.sigma_matrix + dist.sigma_matrix.transpose());
  return dist;
}

}  // namespace adasmooth
