#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "vcore/raster.hpp"

namespace testsupport {

inline vcore::BinaryMask disk_mask(int w, int h, double cx, double cy, double r) {
  vcore::BinaryMask m(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) m.at(x, y) = 1;
  return m;
}

inline vcore::BinaryMask random_mask(int w, int h, double density, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution on(density);
  vcore::BinaryMask m(w, h, 0);
  for (auto& v : m) v = on(rng) ? 1 : 0;
  return m;
}

inline vcore::SectionImage solid_section(int w, int h, vcore::Rgb fill) {
  vcore::SectionImage s;
  s.rgb = vcore::Raster<vcore::Rgb>(w, h, fill);
  return s;
}

/// Smooth greyscale blobs for feature and warp tests.
inline vcore::GrayImage blob_texture(int w, int h, int blobs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(8, w - 8), uy(8, h - 8), us(2.0, 6.0), ua(-0.5, 0.5);
  struct B { double x, y, s, a; };
  std::vector<B> list;
  for (int k = 0; k < blobs; ++k) list.push_back({ux(rng), uy(rng), us(rng), ua(rng)});
  vcore::GrayImage img(w, h, 0.5f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0.5;
      for (const B& b : list) v += b.a * std::exp(-((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (2 * b.s * b.s));
      img.at(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return img;
}

}  // namespace testsupport
