// Volume data model and raw-float file I/O.
//
// A volume is a dense H x W x D scalar grid with an isotropic physical
// voxel size in millimetres. On disk a volume is a pair of files:
//   <name>.vol   raw little-endian float32, depth index fastest,
//                then width, then height
//   <name>.json  sidecar {"dims":[H,W,D],"voxel_size_mm":3.0}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace adasmooth {

struct Dims3 {
  int h = 0, w = 0, d = 0;

  bool operator==(const Dims3&) const = default;
  std::int64_t count() const {
    return static_cast<std::int64_t>(h) * w * d;
  }
};

class Volume3D {
 public:
  Volume3D() = default;

  Volume3D(Dims3 dims, double voxel_size_mm, double fill = 0.0)
      : dims_(dims), voxel_size_mm_(voxel_size_mm),
        data_(static_cast<std::size_t>(dims.count()), fill) {
    if (dims.h <= 0 || dims.w <= 0 || dims.d <= 0)
      throw std::invalid_argument("Volume3D: dims must be positive");
    if (!(voxel_size_mm > 0.0))
      throw std::invalid_argument("Volume3D: voxel size must be positive");
  }

  Volume3D(Dims3 dims, double voxel_size_mm, std::vector<double> data)
      : Volume3D(dims, voxel_size_mm) {
    if (data.size() != data_.size())
      throw std::invalid_argument("Volume3D: data size does not match dims");
    data_ = std::move(data);
    check_finite();
  }

  const Dims3& dims() const { return dims_; }
  double voxel_size_mm() const { return voxel_size_mm_; }

  double& at(int h, int w, int d) { return data_[index(h, w, d)]; }
  double at(int h, int w, int d) const { return data_[index(h, w, d)]; }

  // Reads 0 outside the grid; the padding convention used by the
  // convolution and the warper alike.
  double at_or_zero(int h, int w, int d) const {
    if (h < 0 || h >= dims_.h || w < 0 || w >= dims_.w || d < 0 || d >= dims_.d)
      return 0.0;
    return data_[index(h, w, d)];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::size_t index(int h, int w, int d) const {
    return (static_cast<std::size_t>(h) * dims_.w + w) * dims_.d + d;
  }

  void check_finite() const {
    for (double v : data_)
      if (!std::isfinite(v))
        throw std::runtime_error("Volume3D: non-finite value");
  }

  double min_value() const { return *std::min_element(data_.begin(), data_.end()); }
  double max_value() const { return *std::max_element(data_.begin(), data_.end()); }

 private:
  Dims3 dims_;
  double voxel_size_mm_ = 1.0;
  std::vector<double> data_;
};

enum class Label { kLeft, kRight, kRest };

inline std::string label_name(Label l) {
  switch (l) {
    case Label::kLeft: return "left";
    case Label::kRight: return "right";
    case Label::kRest: return "rest";
  }
  throw std::logic_error("bad label");
}

inline Label label_from_name(const std::string& s) {
  if (s == "left") return Label::kLeft;
  if (s == "right") return Label::kRight;
  if (s == "rest") return Label::kRest;
  throw std::runtime_error("unknown label: " + s);
}

struct Subject {
  std::string id;
  std::vector<Volume3D> volumes;          // a time series
  std::vector<Label> labels;              // empty, or 1:1 with volumes
};

struct Cohort {
  std::vector<Subject> subjects;

  void validate() const {
    if (subjects.empty()) return;
    const Dims3 dims = subjects.front().volumes.front().dims();
    const double vox = subjects.front().volumes.front().voxel_size_mm();
    for (const auto& s : subjects) {
      if (!s.labels.empty() && s.labels.size() != s.volumes.size())
        throw std::runtime_error("Cohort: labels do not align with volumes");
      for (const auto& v : s.volumes) {
        if (!(v.dims() == dims) || v.voxel_size_mm() != vox)
          throw std::runtime_error("Cohort: volumes disagree on dims/voxel size");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// File I/O

inline void save_volume(const Volume3D& v, const std::filesystem::path& stem) {
  namespace fs = std::filesystem;
  const fs::path vol_path = fs::path(stem).replace_extension(".vol");
  const fs::path hdr_path = fs::path(stem).replace_extension(".json");

  std::ofstream out(vol_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_volume: cannot open " + vol_path.string());
  std::vector<float> buf(v.data().size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(v.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("save_volume: write failed on " + vol_path.string());
  out.close();

  nlohmann::json hdr;
  hdr["dims"] = {v.dims().h, v.dims().w, v.dims().d};
  hdr["voxel_size_mm"] = v.voxel_size_mm();
  std::ofstream hout(hdr_path, std::ios::trunc);
  if (!hout) throw std::runtime_error("save_volume: cannot open " + hdr_path.string());
  hout << hdr.dump(2) << "\n";
  if (!hout) throw std::runtime_error("save_volume: write failed on " + hdr_path.string());
}

inline Volume3D load_volume(const std::filesystem::path& stem) {
  namespace fs = std::filesystem;
  const fs::path vol_path = fs::path(stem).replace_extension(".vol");
  const fs::path hdr_path = fs::path(stem).replace_extension(".json");
  if (!fs::exists(vol_path))
    throw std::runtime_error("load_volume: missing " + vol_path.string());
  if (!fs::exists(hdr_path))
    throw std::runtime_error("load_volume: missing sidecar " + hdr_path.string());

  std::ifstream hin(hdr_path);
  nlohmann::json hdr = nlohmann::json::parse(hin);
  const auto dims_json = hdr.at("dims");
  if (dims_json.size() != 3)
    throw std::runtime_error("load_volume: dims must have 3 entries");
  Dims3 dims{dims_json[0].get<int>(), dims_json[1].get<int>(), dims_json[2].get<int>()};
  const double vox = hdr.at("voxel_size_mm").get<double>();
  if (hdr.contains("voxel_size_mm_anisotropic"))
    throw std::runtime_error("load_volume: anisotropic voxels are not supported");

  std::ifstream in(vol_path, std::ios::binary);
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  const std::size_t expected = static_cast<std::size_t>(dims.count()) * sizeof(float);
  if (bytes != expected)
    throw std::runtime_error("load_volume: payload size mismatch in " + vol_path.string() +
                             " (" + std::to_string(bytes) + " bytes, expected " +
                             std::to_string(expected) + ")");
  std::vector<float> buf(static_cast<std::size_t>(dims.count()));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("load_volume: read failed on " + vol_path.string());

  std::vector<double> data(buf.begin(), buf.end());
  return Volume3D(dims, vox, std::move(data));  // ctor rejects non-finite values
}

// Cohort directory layout: cohort/<subject_id>/<index>.vol + cohort/labels.csv
inline void save_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  cohort.validate();
  fs::create_directories(dir);
  std::ofstream labels(dir / "labels.csv", std::ios::trunc);
  labels << "subject_id,index,label\n";
  for (const auto& s : cohort.subjects) {
    fs::create_directories(dir / s.id);
    for (std::size_t i = 0; i < s.volumes.size(); ++i) {
      save_volume(s.volumes[i], dir / s.id / std::to_string(i));
      if (!s.labels.empty())
        labels << s.id << "," << i << "," << label_name(s.labels[i]) << "\n";
    }
  }
}

inline Cohort load_cohort(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir))
    throw std::runtime_error("load_cohort: missing directory " + dir.string());

  std::map<std::string, std::map<int, Label>> label_map;
  if (fs::exists(dir / "labels.csv")) {
    std::ifstream in(dir / "labels.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      label_map[line.substr(0, c1)][std::stoi(line.substr(c1 + 1, c2 - c1 - 1))] =
          label_from_name(line.substr(c2 + 1));
    }
  }

  Cohort cohort;
  std::vector<fs::path> subject_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subject_dirs.push_back(e.path());
  std::sort(subject_dirs.begin(), subject_dirs.end());

  for (const auto& sd : subject_dirs) {
    Subject s;
    s.id = sd.filename().string();
    int idx = 0;
    while (fs::exists(sd / (std::to_string(idx) + ".vol"))) {
      s.volumes.push_back(load_volume(sd / std::to_string(idx)));
      ++idx;
    }
    if (s.volumes.empty())
      throw std::runtime_error("load_cohort: subject " + s.id + " has no volumes");
    if (auto it = label_map.find(s.id); it != label_map.end()) {
      for (int i = 0; i < idx; ++i) {
        auto lit = it->second.find(i);
        if (lit == it->second.end())
          throw std::runtime_error("load_cohort: missing label for " + s.id +
                                   "/" + std::to_string(i));
        s.labels.push_back(lit->second);
      }
    }
    cohort.subjects.push_back(std::move(s));
  }
  cohort.validate();
  return cohort;
}

// ---------------------------------------------------------------------------
// Normalization and reference construction

struct SubjectExtrema {
  double min = 0.0;
  double max = 0.0;
};

// Normalizes a subject's whole series to [0,1] with one shared affine map
// (per-subject extrema, not per-volume).
inline std::vector<Volume3D> normalize_subject(const std::vector<Volume3D>& series,
                                               SubjectExtrema* extrema_out = nullptr) {
  if (series.empty())
    throw std::invalid_argument("normalize_subject: empty series");
  double lo = series.front().min_value();
  double hi = series.front().max_value();
  for (const auto& v : series) {
    lo = std::min(lo, v.min_value());
    hi = std::max(hi, v.max_value());
  }
  if (hi == lo)
    throw std::runtime_error("normalize_subject: constant series (max == min)");
  if (extrema_out) *extrema_out = {lo, hi};

  std::vector<Volume3D> out;
  out.reserve(series.size());
  const double scale = 1.0 / (hi - lo);
  for (const auto& v : series) {
    Volume3D n(v.dims(), v.voxel_size_mm());
    for (std::size_t i = 0; i < v.data().size(); ++i)
      n.data()[i] = (v.data()[i] - lo) * scale;
    out.push_back(std::move(n));
  }
  return out;
}

inline Cohort normalize_cohort(const Cohort& cohort) {
  Cohort out;
  for (const auto& s : cohort.subjects) {
    Subject ns;
    ns.id = s.id;
    ns.labels = s.labels;
    ns.volumes = normalize_subject(s.volumes);
    out.subjects.push_back(std::move(ns));
  }
  return out;
}

// Voxelwise mean of each subject's first volume.
inline Volume3D make_reference(const Cohort& cohort) {
  if (cohort.subjects.empty())
    throw std::invalid_argument("make_reference: empty cohort");
  const Volume3D& first = cohort.subjects.front().volumes.front();
  Volume3D ref(first.dims(), first.voxel_size_mm());
  for (const auto& s : cohort.subjects) {
    if (s.volumes.empty())
      throw std::runtime_error("make_reference: subject with no volumes");
    const auto& v = s.volumes.front();
    if (!(v.dims() == ref.dims()))
      throw std::runtime_error("make_reference: dim mismatch");
    for (std::size_t i = 0; i < ref.data().size(); ++i)
      ref.data()[i] += v.data()[i];
  }
  const double inv_n = 1.0 / static_cast<double>(cohort.subjects.size());
  for (double& x : ref.data()) x *= inv_n;
  return ref;
}

}  // namespace adasmooth
