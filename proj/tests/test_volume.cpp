#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "adasmooth/phantom.hpp"
#include "adasmooth/volume.hpp"

using namespace adasmooth;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "adasmooth_test_volume";
  fs::create_directories(dir);
  return dir;
}

// Random values exactly representable in float32, so disk round trips are
// bit-for-bit.
Volume3D random_float_volume(Dims3 dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Volume3D v(dims, 3.0);
  for (double& x : v.data()) x = static_cast<double>(u(rng));
  return v;
}

}  // namespace

TEST_CASE("save/load round trip is the identity") {
  const fs::path stem = temp_dir() / "roundtrip";
  const Volume3D v = random_float_volume(Dims3{4, 4, 4}, 1);
  save_volume(v, stem);
  const Volume3D loaded = load_volume(stem);
  CHECK(loaded.dims() == v.dims());
  CHECK(loaded.voxel_size_mm() == v.voxel_size_mm());
  for (std::size_t i = 0; i < v.data().size(); ++i)
    CHECK(loaded.data()[i] == v.data()[i]);
}

TEST_CASE("payload size mismatch is rejected") {
  const fs::path stem = temp_dir() / "truncated";
  const Volume3D v = random_float_volume(Dims3{4, 4, 4}, 2);
  save_volume(v, stem);
  // Truncate the payload to 63 floats.
  fs::resize_file(fs::path(stem).replace_extension(".vol"), 63 * sizeof(float));
  CHECK_THROWS_WITH(load_volume(stem), Catch::Matchers::ContainsSubstring("size mismatch"));
}

TEST_CASE("missing file is reported") {
  CHECK_THROWS_WITH(load_volume(temp_dir() / "does_not_exist"),
                    Catch::Matchers::ContainsSubstring("missing"));
}

TEST_CASE("1x1x1 volume writes a 4-byte payload") {
  const fs::path stem = temp_dir() / "tiny";
  save_volume(Volume3D(Dims3{1, 1, 1}, 3.0, 0.0), stem);
  CHECK(fs::file_size(fs::path(stem).replace_extension(".vol")) == 4);
}

TEST_CASE("non-finite values are rejected at construction") {
  std::vector<double> data(8, 0.0);
  data[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(Volume3D(Dims3{2, 2, 2}, 3.0, std::move(data)), std::runtime_error);
}

TEST_CASE("normalize_subject maps the series extrema to [0,1]") {
  Volume3D a(Dims3{2, 2, 2}, 3.0, 2.0);
  Volume3D b(Dims3{2, 2, 2}, 3.0, 6.0);
  a.at(0, 0, 1) = 4.0;
  SubjectExtrema extrema;
  const auto out = normalize_subject({a, b}, &extrema);
  CHECK(extrema.min == 2.0);
  CHECK(extrema.max == 6.0);
  CHECK(out[0].at(0, 0, 1) == 0.5);
  CHECK(out[0].at(0, 0, 0) == 0.0);
  CHECK(out[1].at(0, 0, 0) == 1.0);
}

TEST_CASE("series already spanning [0,1] is unchanged") {
  Volume3D a(Dims3{2, 2, 2}, 3.0, 0.0);
  a.at(1, 1, 1) = 1.0;
  a.at(0, 1, 0) = 0.25;
  const auto out = normalize_subject({a});
  for (std::size_t i = 0; i < a.data().size(); ++i)
    CHECK(out[0].data()[i] == a.data()[i]);
}

TEST_CASE("constant series is a degenerate input") {
  const Volume3D a(Dims3{2, 2, 2}, 3.0, 5.0);
  CHECK_THROWS_WITH(normalize_subject({a, a}),
                    Catch::Matchers::ContainsSubstring("constant"));
  CHECK_THROWS_AS(normalize_subject({}), std::invalid_argument);
}

TEST_CASE("make_reference averages first volumes") {
  SECTION("single subject returns its first volume") {
    Cohort cohort;
    cohort.subjects.push_back({"a", {random_float_volume(Dims3{4, 4, 4}, 3)}, {}});
    const Volume3D ref = make_reference(cohort);
    for (std::size_t i = 0; i < ref.data().size(); ++i)
      CHECK(ref.data()[i] == cohort.subjects[0].volumes[0].data()[i]);
  }

  SECTION("all-0 and all-1 average to 0.5") {
    Cohort cohort;
    cohort.subjects.push_back({"a", {Volume3D(Dims3{3, 3, 3}, 3.0, 0.0)}, {}});
    cohort.subjects.push_back({"b", {Volume3D(Dims3{3, 3, 3}, 3.0, 1.0)}, {}});
    const Volume3D ref = make_reference(cohort);
    for (double v : ref.data()) CHECK(v == 0.5);
  }

  SECTION("15 subjects against a summation oracle, permutation invariant") {
    Cohort cohort;
    for (int s = 0; s < 15; ++s)
      cohort.subjects.push_back(
          {"s" + std::to_string(s), {random_float_volume(Dims3{4, 4, 4}, 100 + s)}, {}});
    const Volume3D ref = make_reference(cohort);
    for (std::size_t i = 0; i < ref.data().size(); ++i) {
      double sum = 0.0;
      for (const auto& subj : cohort.subjects) sum += subj.volumes[0].data()[i];
      CHECK(ref.data()[i] == Catch::Approx(sum / 15.0).epsilon(1e-14));
    }
    std::reverse(cohort.subjects.begin(), cohort.subjects.end());
    const Volume3D ref2 = make_reference(cohort);
    for (std::size_t i = 0; i < ref.data().size(); ++i)
      CHECK(ref.data()[i] == Catch::Approx(ref2.data()[i]).margin(1e-15));
  }

  SECTION("empty cohort is rejected") {
    CHECK_THROWS_AS(make_reference(Cohort{}), std::invalid_argument);
  }
}

TEST_CASE("cohort directory round trip preserves labels and values") {
  const fs::path dir = temp_dir() / "cohort";
  fs::remove_all(dir);
  Cohort cohort = generate_phantom_cohort(3, 2, 4, Dims3{8, 8, 8});
  // Stored payloads are float32; snap in-memory values so equality is exact.
  for (auto& s : cohort.subjects)
    for (auto& v : s.volumes)
      for (double& x : v.data()) x = static_cast<double>(static_cast<float>(x));
  save_cohort(cohort, dir);
  const Cohort loaded = load_cohort(dir);
  REQUIRE(loaded.subjects.size() == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    CHECK(loaded.subjects[s].labels == cohort.subjects[s].labels);
    for (std::size_t v = 0; v < 4; ++v)
      for (std::size_t i = 0; i < cohort.subjects[s].volumes[v].data().size(); ++i)
        CHECK(loaded.subjects[s].volumes[v].data()[i] ==
              cohort.subjects[s].volumes[v].data()[i]);
  }
}

TEST_CASE("phantom cohort is deterministic in the seed") {
  const Cohort a = generate_phantom_cohort(7, 3, 6, Dims3{10, 10, 10});
  const Cohort b = generate_phantom_cohort(7, 3, 6, Dims3{10, 10, 10});
  for (std::size_t s = 0; s < a.subjects.size(); ++s)
    for (std::size_t v = 0; v < a.subjects[s].volumes.size(); ++v)
      for (std::size_t i = 0; i < a.subjects[s].volumes[v].data().size(); ++i)
        CHECK(a.subjects[s].volumes[v].data()[i] == b.subjects[s].volumes[v].data()[i]);
}

TEST_CASE("degenerate phantom generator reproduces the base phantom") {
  PhantomOptions opt;
  opt.deformation_magnitude = 0.0;
  opt.noise_max = 0.0;
  opt.activation_amplitude = 0.0;
  const Cohort cohort = generate_phantom_cohort(1, 2, 3, Dims3{12, 12, 12}, opt);
  const Volume3D base = make_base_phantom(Dims3{12, 12, 12});
  for (const auto& subject : cohort.subjects)
    for (const auto& v : subject.volumes)
      for (std::size_t i = 0; i < v.data().size(); ++i)
        CHECK(v.data()[i] == base.data()[i]);
}

TEST_CASE("left/right activation shows up in the matching lateral half") {
  PhantomOptions opt;
  opt.deformation_magnitude = 0.0;
  opt.noise_max = 0.0;
  const Cohort cohort = generate_phantom_cohort(5, 2, 12, Dims3{12, 12, 12}, opt);
  const auto& subject = cohort.subjects[0];
  auto half_mean = [](const Volume3D& v, bool left) {
    double acc = 0.0;
    int count = 0;
    const Dims3 d = v.dims();
    for (int h = 0; h < d.h; ++h)
      for (int w = left ? 0 : d.w / 2; w < (left ? d.w / 2 : d.w); ++w)
        for (int dd = 0; dd < d.d; ++dd) {
          acc += v.at(h, w, dd);
          ++count;
        }
    return acc / count;
  };
  const Volume3D* left_vol = nullptr;
  const Volume3D* right_vol = nullptr;
  const Volume3D* rest_vol = nullptr;
  for (std::size_t i = 0; i < subject.volumes.size(); ++i) {
    if (subject.labels[i] == Label::kLeft && !left_vol) left_vol = &subject.volumes[i];
    if (subject.labels[i] == Label::kRight && !right_vol) right_vol = &subject.volumes[i];
    if (subject.labels[i] == Label::kRest && !rest_vol) rest_vol = &subject.volumes[i];
  }
  REQUIRE(left_vol);
  REQUIRE(right_vol);
  REQUIRE(rest_vol);
  CHECK(half_mean(*left_vol, true) - half_mean(*rest_vol, true) > 0.0);
  CHECK(half_mean(*right_vol, false) - half_mean(*rest_vol, false) > 0.0);
}

TEST_CASE("phantom rejects tiny dims and single subjects") {
  CHECK_THROWS_AS(generate_phantom_cohort(1, 2, 2, Dims3{4, 4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(generate_phantom_cohort(1, 1, 2, Dims3{8, 8, 8}), std::invalid_argument);
}
