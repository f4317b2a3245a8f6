// The parameters network: centring against a reference volume, 2x2x2
// max-pooling (ceil semantics at partial edge blocks), and a single-output
// fully-connected layer with softplus, producing sigma per volume.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "adasmooth/volume.hpp"

namespace adasmooth {

inline Dims3 pooled_dims(Dims3 dims) {
  return Dims3{(dims.h + 1) / 2, (dims.w + 1) / 2, (dims.d + 1) / 2};
}

// Overflow-safe softplus and its derivative (the logistic).
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ParamNetWeights {
  std::vector<double> w;  // length = pooled element count
  double b = 0.0;
  Volume3D reference;
};

struct ParamNetTape {
  Volume3D centered;
  std::vector<double> pooled;            // flattened pooled grid
  std::vector<std::size_t> argmax_index; // centered-volume index per pooled cell
  double pre_activation = 0.0;
  double sigma = 0.0;
};

// Xavier/Glorot uniform with fan_in = P, fan_out = 1; bias zero.
inline ParamNetWeights init_weights(const Volume3D& reference, std::uint64_t seed) {
  ParamNetWeights weights;
  weights.reference = reference;
  const Dims3 p = pooled_dims(reference.dims());
  const std::size_t n = static_cast<std::size_t>(p.count());
  const double limit = std::sqrt(6.0 / (static_cast<double>(n) + 1.0));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-limit, limit);
  weights.w.resize(n);
  for (double& x : weights.w) x = u(rng);
  weights.b = 0.0;
  return weights;
}

inline ParamNetTape paramnet_forward(const Volume3D& x, const ParamNetWeights& weights) {
  const Dims3 dims = x.dims();
  if (!(dims == weights.reference.dims()))
    throw std::invalid_argument("paramnet_forward: dims do not match reference");
  const Dims3 pd = pooled_dims(dims);
  if (weights.w.size() != static_cast<std::size_t>(pd.count()))
    throw std::invalid_argument("paramnet_forward: weight length mismatch");

  ParamNetTape tape;
  tape.centered = Volume3D(dims, x.voxel_size_mm());
  for (std::size_t i = 0; i < x.data().size(); ++i)
    tape.centered.data()[i] = x.data()[i] - weights.reference.data()[i];

  tape.pooled.resize(static_cast<std::size_t>(pd.count()));
  tape.argmax_index.resize(tape.pooled.size());
  std::size_t cell = 0;
  for (int ph = 0; ph < pd.h; ++ph)
    for (int pw = 0; pw < pd.w; ++pw)
      for (int pdd = 0; pdd < pd.d; ++pdd, ++cell) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int dh = 0; dh < 2; ++dh)
          for (int dw = 0; dw < 2; ++dw)
            for (int dd = 0; dd < 2; ++dd) {
              const int h = 2 * ph + dh, w = 2 * pw + dw, d = 2 * pdd + dd;
              if (h >= dims.h || w >= dims.w || d >= dims.d) continue;
              const double v = tape.centered.at(h, w, d);
              if (v > best) {  // first-index tie-break
                best = v;
                best_idx = tape.centered.index(h, w, d);
              }
            }
        tape.pooled[cell] = best;
        tape.argmax_index[cell] = best_idx;
      }

  tape.pre_activation = weights.b;
  for (std::size_t i = 0; i < tape.pooled.size(); ++i)
    tape.pre_activation += weights.w[i] * tape.pooled[i];
  tape.sigma = softplus(tape.pre_activation);
  return tape;
}

struct ParamNetGradient {
  std::vector<double> dw;
  double db = 0.0;
};

inline ParamNetGradient paramnet_backward(const ParamNetTape& tape,
                                          const ParamNetWeights& weights,
                                          double dL_dsigma) {
  if (tape.pooled.size() != weights.w.size())
    throw std::invalid_argument("paramnet_backward: stale tape");
  const double dpre = dL_dsigma * logistic(tape.pre_activation);
  ParamNetGradient g;
  g.dw.resize(weights.w.size());
  for (std::size_t i = 0; i < g.dw.size(); ++i) g.dw[i] = dpre * tape.pooled[i];
  g.db = dpre;
  return g;
}

// Input gradient for stacked use: routes through the FC layer and the
// recorded pooling winners (subgradient, all mass to the argmax). The
// centring layer passes gradients through unchanged.
inline Volume3D paramnet_backward_input(const ParamNetTape& tape,
                                        const ParamNetWeights& weights,
                                        double dL_dsigma) {
  const double dpre = dL_dsigma * logistic(tape.pre_activation);
  Volume3D grad(tape.centered.dims(), tape.centered.voxel_size_mm());
  for (std::size_t i = 0; i < tape.pooled.size(); ++i)
    grad.data()[tape.argmax_index[i]] += dpre * weights.w[i];
  return grad;
}

// ---------------------------------------------------------------------------
// Checkpoint format: one-line JSON header, then raw little-endian float32
// w followed by b.

inline void save_paramnet(const ParamNetWeights& weights, const std::filesystem::path& path) {
  nlohmann::json hdr;
  const Dims3 d = weights.reference.dims();
  hdr["format_version"] = 1;
  hdr["dims"] = {d.h, d.w, d.d};
  hdr["voxel_size_mm"] = weights.reference.voxel_size_mm();
  hdr["p"] = weights.w.size();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_paramnet: cannot open " + path.string());
  out << hdr.dump() << "\n";
  auto write_floats = [&out](const std::vector<double>& v) {
    std::vector<float> buf(v.begin(), v.end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  };
  write_floats(weights.w);
  const float b = static_cast<float>(weights.b);
  out.write(reinterpret_cast<const char*>(&b), sizeof(float));
  write_floats(weights.reference.data());
  if (!out) throw std::runtime_error("save_paramnet: write failed");
}

inline ParamNetWeights load_paramnet(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_paramnet: cannot open " + path.string());
  std::string header_line;
  std::getline(in, header_line);
  nlohmann::json hdr = nlohmann::json::parse(header_line);
  if (hdr.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_paramnet: unsupported format version");
  Dims3 dims{hdr["dims"][0].get<int>(), hdr["dims"][1].get<int>(), hdr["dims"][2].get<int>()};
  const double vox = hdr["voxel_size_mm"].get<double>();
  const std::size_t p = hdr["p"].get<std::size_t>();

  auto read_floats = [&in](std::size_t n) {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw std::runtime_error("load_paramnet: truncated payload");
    return std::vector<double>(buf.begin(), buf.end());
  };
  ParamNetWeights weights;
  weights.w = read_floats(p);
  weights.b = read_floats(1)[0];
  weights.reference = Volume3D(dims, vox, read_floats(static_cast<std::size_t>(dims.count())));
  if (weights.w.size() != static_cast<std::size_t>(pooled_dims(dims).count()))
    throw std::runtime_error("load_paramnet: weight length inconsistent with dims");
  return weights;
}

}  // namespace adasmooth
