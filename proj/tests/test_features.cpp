#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "support.hpp"
#include "vcore/features.hpp"

using namespace vcore;

namespace {

GrayImage rotate90(const GrayImage& img) {
  // (x, y) -> (H-1-y, x); a clockwise quarter turn on screen.
  GrayImage out(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out.at(img.height() - 1 - y, x) = img.at(x, y);
  return out;
}

double norm(const Descriptor& d) {
  double acc = 0;
  for (float v : d.values) acc += double(v) * v;
  return std::sqrt(acc);
}

double cosine(const Descriptor& a, const Descriptor& b) {
  double acc = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) acc += double(a.values[k]) * b.values[k];
  return acc / (norm(a) * norm(b));
}

}  // namespace

TEST_CASE("uniform image has no keypoints and small images are rejected") {
  CHECK(detect_keypoints(GrayImage(64, 64, 0.5f)).empty());
  CHECK_THROWS_AS(detect_keypoints(GrayImage(31, 64, 0.5f)), FeatureError);
}

TEST_CASE("isotropic blob is found at its centre and scale") {
  GrayImage img(64, 64, 0.2f);
  const double sigma = 4.0, cx = 31.0, cy = 33.0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      img.at(x, y) = 0.2f + 0.6f * float(std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * sigma * sigma)));
  const auto kps = detect_keypoints(img);
  REQUIRE_FALSE(kps.empty());
  bool found = false;
  for (const Keypoint& k : kps) {
    if (std::hypot(k.x - cx, k.y - cy) <= 1.0 && std::abs(k.scale - sigma) <= 1.0) found = true;
  }
  CHECK(found);
}

TEST_CASE("detection is deterministic and ordered") {
  const GrayImage img = testsupport::blob_texture(96, 80, 40, 3);
  const auto a = detect_keypoints(img);
  const auto b = detect_keypoints(img);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].x == b[k].x);
    CHECK(a[k].orientation == b[k].orientation);
  }
  for (std::size_t k = 1; k < a.size(); ++k) {
    const bool ordered = a[k - 1].octave < a[k].octave ||
                         (a[k - 1].octave == a[k].octave &&
                          (a[k - 1].y < a[k].y || (a[k - 1].y == a[k].y && a[k - 1].x <= a[k].x)));
    CHECK(ordered);
  }
  for (const Keypoint& k : a) {
    CHECK(k.scale > 0);
    CHECK(k.orientation >= 0);
    CHECK(k.orientation < 2 * std::numbers::pi);
    CHECK(k.x >= 0);
    CHECK(k.x <= img.width() - 1);
  }
}

TEST_CASE("quarter-turn rotation repeatability") {
  const GrayImage img = testsupport::blob_texture(129, 129, 70, 11);
  const GrayImage rot = rotate90(img);
  const auto a = detect_and_describe(img);
  const auto b = detect_and_describe(rot);
  REQUIRE(a.keypoints.size() >= 10);
  std::size_t repeated = 0, similar = 0;
  for (std::size_t i = 0; i < a.keypoints.size(); ++i) {
    const Keypoint& k = a.keypoints[i];
    const double ex = 128.0 - k.y, ey = k.x;
    const double eo = std::fmod(k.orientation + std::numbers::pi / 2, 2 * std::numbers::pi);
    for (std::size_t j = 0; j < b.keypoints.size(); ++j) {
      const Keypoint& r = b.keypoints[j];
      const double dang = std::abs(std::remainder(r.orientation - eo, 2 * std::numbers::pi));
      if (std::hypot(r.x - ex, r.y - ey) <= 1.0 && dang <= 0.1) {
        ++repeated;
        if (cosine(a.descriptors[i], b.descriptors[j]) >= 0.9) ++similar;
        break;
      }
    }
  }
  CHECK(double(repeated) >= 0.9 * double(a.keypoints.size()));
  CHECK(double(similar) >= 0.9 * double(repeated));
}

TEST_CASE("integer translation equivariance") {
  const GrayImage big = testsupport::blob_texture(200, 180, 120, 5);
  const int dx = 8, dy = 16, w = 160, h = 140;
  GrayImage a(w, h), b(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      a.at(x, y) = big.at(x + dx, y + dy);
      b.at(x, y) = big.at(x, y);
    }
  // b sees the content of a shifted by (+dx, +dy).
  const auto ka = detect_keypoints(a);
  const auto kb = detect_keypoints(b);
  std::size_t considered = 0, matched = 0;
  for (const Keypoint& k : ka) {
    const double margin = std::max(2.0 * k.scale, 24.0);
    const double ex = k.x + dx, ey = k.y + dy;
    if (k.x < margin || k.y < margin || k.x > w - 1 - margin - dx || k.y > h - 1 - margin - dy) continue;
    ++considered;
    for (const Keypoint& r : kb) {
      if (std::hypot(r.x - ex, r.y - ey) <= 0.5 && std::abs(r.scale - k.scale) < 1e-3) {
        ++matched;
        break;
      }
    }
  }
  REQUIRE(considered >= 10);
  CHECK(matched == considered);
}

TEST_CASE("descriptors are unit length and brightness invariant") {
  const GrayImage img = testsupport::blob_texture(100, 100, 50, 9);
  GrayImage bright = img;
  for (float& v : bright) v *= 1.5f;
  const auto batch = detect_and_describe(img);
  REQUIRE_FALSE(batch.descriptors.empty());
  const auto again = compute_descriptors(bright, batch.keypoints);
  REQUIRE(again.descriptors.size() == batch.descriptors.size());
  for (std::size_t i = 0; i < batch.descriptors.size(); ++i) {
    CHECK(norm(batch.descriptors[i]) == doctest::Approx(1.0).epsilon(1e-6));
    for (std::size_t k = 0; k < 128; ++k) {
      REQUIRE(batch.descriptors[i].values[k] >= 0.0f);
      REQUIRE(std::abs(batch.descriptors[i].values[k] - again.descriptors[i].values[k]) <= 1e-3);
    }
  }
  Keypoint outside;
  outside.x = 500;
  outside.y = 3;
  outside.scale = 2;
  const std::vector<Keypoint> bad{outside};
  CHECK(compute_descriptors(img, bad).skipped == 1);
}

TEST_CASE("feature dump round trip") {
  const GrayImage img = testsupport::blob_texture(80, 80, 30, 2);
  const auto batch = detect_and_describe(img);
  const auto path = std::filesystem::temp_directory_path() / "vcore_features_test.bin";
  write_feature_dump(path, batch.keypoints, batch.descriptors);
  CHECK(std::filesystem::file_size(path) == 4 + batch.keypoints.size() * (4 + 128) * 4);
  const auto back = read_feature_dump(path);
  REQUIRE(back.keypoints.size() == batch.keypoints.size());
  for (std::size_t i = 0; i < back.keypoints.size(); ++i) {
    CHECK(back.keypoints[i].x == batch.keypoints[i].x);
    CHECK(back.keypoints[i].orientation == batch.keypoints[i].orientation);
    CHECK(back.descriptors[i].values == batch.descriptors[i].values);
  }
  std::filesystem::remove(path);
}
