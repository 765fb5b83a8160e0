#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>

#include "mambaseg/data.hpp"
#include "testutil.hpp"

using namespace mambaseg;

namespace {

std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

/// 6-connectivity flood fill over non-Myo voxels seeded at background border
/// voxels. Returns true if any LV voxel is reached (a shell leak).
bool leaks_into_lv(const data::LabeledVolume& v) {
  long d = v.d(), h = v.h(), w = v.w();
  auto at = [&](long z, long y, long x) { return v.labels[static_cast<size_t>((z * h + y) * w + x)]; };
  std::vector<bool> seen(static_cast<size_t>(d * h * w), false);
  std::deque<std::array<long, 3>> queue;
  auto push = [&](long z, long y, long x) {
    long i = (z * h + y) * w + x;
    if (seen[static_cast<size_t>(i)]) return;
    if (at(z, y, x) == 2) return;  // Myo blocks the path
    seen[static_cast<size_t>(i)] = true;
    queue.push_back({z, y, x});
  };
  for (long z = 0; z < d; ++z)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        if ((z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1) &&
            at(z, y, x) == 0)
          push(z, y, x);
  while (!queue.empty()) {
    auto [z, y, x] = queue.front();
    queue.pop_front();
    if (at(z, y, x) == 3) return true;
    if (z > 0) push(z - 1, y, x);
    if (z < d - 1) push(z + 1, y, x);
    if (y > 0) push(z, y - 1, x);
    if (y < h - 1) push(z, y + 1, x);
    if (x > 0) push(z, y, x - 1);
    if (x < w - 1) push(z, y, x + 1);
  }
  return false;
}

}  // namespace

// ---- phantom generation -------------------------------------------------------

TEST_CASE("same spec and seed give bitwise-identical volumes") {
  data::PhantomSpec spec;
  auto a = data::generate_phantom(spec, 42);
  auto b = data::generate_phantom(spec, 42);
  CHECK(a.labels == b.labels);
  CHECK(testutil::max_abs_diff(a.image, b.image) == 0.0f);
  auto c = data::generate_phantom(spec, 43);
  CHECK(a.labels != c.labels);
}

TEST_CASE("every class receives voxels and the image is clamped to [0,1]") {
  data::PhantomSpec spec;
  auto v = data::generate_phantom(spec, 7);
  long counts[4] = {0, 0, 0, 0};
  for (auto l : v.labels) {
    REQUIRE(l <= 3);
    ++counts[l];
  }
  for (int c = 0; c < 4; ++c) CHECK(counts[c] > 0);
  for (long i = 0; i < v.image.numel(); ++i) {
    CHECK(v.image.at(i) >= 0.0f);
    CHECK(v.image.at(i) <= 1.0f);
  }
}

TEST_CASE("the Myo shell separates LV from background (flood-fill oracle)") {
  data::PhantomSpec spec;
  for (unsigned seed : {1u, 2u, 3u, 4u, 5u})
    CHECK(!leaks_into_lv(data::generate_phantom(spec, seed)));
}

TEST_CASE("scaled_spec keeps the anatomy valid at the model input extent") {
  data::PhantomSpec spec = data::scaled_spec(16, 64, 64);
  CHECK(spec.d == 16);
  CHECK(spec.h == 64);
  CHECK(spec.w == 64);
  for (unsigned seed : {11u, 12u, 13u}) {
    auto v = data::generate_phantom(spec, seed);
    long counts[4] = {0, 0, 0, 0};
    for (auto l : v.labels) ++counts[l];
    for (int c = 0; c < 4; ++c) CHECK(counts[c] > 0);
    CHECK(!leaks_into_lv(v));
  }
}

TEST_CASE("impossible geometry is rejected instead of silently clipped") {
  data::PhantomSpec spec;
  spec.h = 16;
  spec.w = 16;  // default radii cannot fit a 16-voxel plane
  CHECK_THROWS_AS(data::generate_phantom(spec, 1), ParameterError);
}

// ---- normalization -------------------------------------------------------------

TEST_CASE("percentile normalization maps a long ramp onto [0,1]") {
  long n = 4000;
  Tensor ramp = Tensor::zeros({1, 1, 1, n});
  for (long i = 0; i < n; ++i) ramp.data()[i] = static_cast<float>(i) / 4.0f;  // 0..1000
  Tensor out = data::normalize_percentile(ramp);
  float mn = 1e9f, mx = -1e9f;
  for (long i = 0; i < n; ++i) {
    mn = std::min(mn, out.at(i));
    mx = std::max(mx, out.at(i));
    CHECK(out.at(i) >= 0.0f);
    CHECK(out.at(i) <= 1.0f);
  }
  CHECK(mn == 0.0f);
  CHECK(mx == 1.0f);
}

TEST_CASE("constant volumes normalize to all zeros") {
  Tensor flat = Tensor::full({1, 2, 2, 2}, 3.7f);
  Tensor out = data::normalize_percentile(flat);
  for (long i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0f);
}

TEST_CASE("normalization rejects bad inputs") {
  Tensor v = Tensor::full({1, 1, 1, 8}, 1.0f);
  CHECK_THROWS_AS(data::normalize_percentile(v, 60.0f, 40.0f), ParameterError);
  v.data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(data::normalize_percentile(v), ParameterError);
}

// ---- patch extraction -----------------------------------------------------------

TEST_CASE("a patch the size of the volume is the volume") {
  auto v = data::generate_phantom(data::scaled_spec(8, 32, 32), 3);
  auto patches = data::extract_patches(v, 8, 32, 32, 1, true, 9);
  REQUIRE(patches.size() == 1);
  CHECK(patches[0].labels == v.labels);
  CHECK(testutil::max_abs_diff(patches[0].image, v.image) == 0.0f);
}

TEST_CASE("require_label guarantees foreground in every patch") {
  auto v = data::generate_phantom(data::PhantomSpec{}, 21);
  auto patches = data::extract_patches(v, 8, 32, 32, 100, true, 5);
  REQUIRE(patches.size() == 100);
  for (const auto& p : patches) {
    CHECK(p.d() == 8);
    CHECK(p.h() == 32);
    CHECK(p.w() == 32);
    bool fg = false;
    for (auto l : p.labels) fg = fg || l != 0;
    CHECK(fg);
  }
}

TEST_CASE("patches larger than the volume are a parameter error") {
  auto v = data::generate_phantom(data::scaled_spec(8, 32, 32), 4);
  CHECK_THROWS_AS(data::extract_patches(v, 9, 32, 32, 1, false, 1), ParameterError);
}

TEST_CASE("patch sampling is a pure function of the seed") {
  auto v = data::generate_phantom(data::PhantomSpec{}, 30);
  auto a = data::extract_patches(v, 8, 24, 24, 5, true, 77);
  auto b = data::extract_patches(v, 8, 24, 24, 5, true, 77);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].labels == b[i].labels);
}

// ---- augmentation ----------------------------------------------------------------

TEST_CASE("flips and quarter-turns permute voxels without changing content") {
  auto v = data::generate_phantom(data::scaled_spec(6, 24, 24), 8);
  // Tag the image with the voxel index so we can verify image/label pairs
  // travel together.
  for (long i = 0; i < v.image.numel(); ++i) v.image.data()[i] = static_cast<float>(i);

  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 8; ++rep) {
    auto w = data::augment_flip_rot(v, rng);
    REQUIRE(w.labels.size() == v.labels.size());
    // Histogram of labels is invariant under any flip/rotation.
    long before[4] = {0, 0, 0, 0}, after[4] = {0, 0, 0, 0};
    for (auto l : v.labels) ++before[l];
    for (auto l : w.labels) ++after[l];
    for (int c = 0; c < 4; ++c) CHECK(before[c] == after[c]);
    // Every voxel's (image, label) pair must be preserved by the move.
    for (long i = 0; i < w.image.numel(); ++i) {
      long src = static_cast<long>(w.image.at(i));
      CHECK(w.labels[static_cast<size_t>(i)] == v.labels[static_cast<size_t>(src)]);
    }
  }
}

TEST_CASE("rectangular planes still flip (rotations need square planes)") {
  auto v = data::generate_phantom(data::scaled_spec(6, 24, 32), 9);
  std::mt19937_64 rng(100);
  auto w = data::augment_flip_rot(v, rng);
  CHECK(w.h() == 24);
  CHECK(w.w() == 32);
}

// ---- volume file format -----------------------------------------------------------

TEST_CASE("write/read roundtrip is bit-exact") {
  std::string path = temp_path("mambaseg_test_vol.msv");
  auto v = data::generate_phantom(data::scaled_spec(6, 24, 24), 12);
  v.spacing = {1.5f, 0.75f, 2.25f};
  data::write_volume(path, v);
  auto r = data::read_volume(path);
  CHECK(r.labels == v.labels);
  CHECK(r.spacing == v.spacing);
  CHECK(r.d() == v.d());
  for (long i = 0; i < v.image.numel(); ++i) CHECK(r.image.at(i) == v.image.at(i));
  std::remove(path.c_str());
}

TEST_CASE("wrong magic and truncated payloads are format errors") {
  std::string path = temp_path("mambaseg_test_bad.msv");
  {
    std::ofstream f(path, std::ios::binary);
    f << "XXXX garbage";
  }
  CHECK_THROWS_AS(data::read_volume(path), FormatError);

  auto v = data::generate_phantom(data::scaled_spec(6, 24, 24), 13);
  data::write_volume(path, v);
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 64);
  CHECK_THROWS_AS(data::read_volume(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("missing volume file is a format error") {
  CHECK_THROWS_AS(data::read_volume(temp_path("mambaseg_absent.msv")), FormatError);
}
