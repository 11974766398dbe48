#pragma once

// Pixel-count references for patch extraction.

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include "vcore/volume.hpp"

namespace oracle {

struct PatchCell {
  int x = 0;
  int y = 0;
  std::int64_t tissue = 0;        ///< summed over sections
  std::int64_t least = 0;         ///< smallest per-section count
};

/// Scans every pixel of every mask once and bins it into its grid cell. A cell
/// is kept when tissue * den > num * size^2 * D (mean rule) or, with
/// `per_section`, when least * den > num * size^2.
inline std::vector<PatchCell> retained_cells(const vcore::VolumetricCore& core, int size, std::int64_t num,
                                             std::int64_t den, bool per_section = false) {
  const int cols = core.canvas.width / size, rows = core.canvas.height / size;
  std::vector<std::vector<std::int64_t>> per(core.tissue_masks.size(),
                                             std::vector<std::int64_t>(std::size_t(cols) * rows, 0));
  for (std::size_t d = 0; d < core.tissue_masks.size(); ++d) {
    const vcore::BinaryMask& m = core.tissue_masks[d];
    for (int y = 0; y < m.height(); ++y)
      for (int x = 0; x < m.width(); ++x) {
        if (!m.at(x, y)) continue;
        const int cx = x / size, cy = y / size;
        if (cx < cols && cy < rows) ++per[d][std::size_t(cy) * cols + cx];
      }
  }
  std::vector<PatchCell> out;
  const std::int64_t area = std::int64_t(size) * size;
  const std::int64_t D = static_cast<std::int64_t>(core.tissue_masks.size());
  for (int cy = 0; cy < rows; ++cy)
    for (int cx = 0; cx < cols; ++cx) {
      PatchCell c{cx * size, cy * size, 0, area};
      for (std::size_t d = 0; d < per.size(); ++d) {
        c.tissue += per[d][std::size_t(cy) * cols + cx];
        c.least = std::min(c.least, per[d][std::size_t(cy) * cols + cx]);
      }
      const bool keep = per_section ? c.least * den > num * area : c.tissue * den > num * area * D;
      if (keep) out.push_back(c);
    }
  return out;
}

/// Random blob masks plus two planted cells whose summed tissue sits exactly
/// on and one pixel above the 60% line.
inline vcore::VolumetricCore random_mask_core(int cells_x, int cells_y, int depth, int size, std::uint64_t seed,
                                              std::pair<int, int> on_line = {0, 0},
                                              std::pair<int, int> above_line = {1, 0}) {
  std::mt19937_64 rng(seed);
  vcore::VolumetricCore core;
  core.canvas = {cells_x * size, cells_y * size, 0.0, 0.0};
  const int W = core.canvas.width, H = core.canvas.height;
  std::uniform_real_distribution<double> ux(0, W), uy(0, H), ur(size * 0.2, size * 0.9);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int d = 0; d < depth; ++d) {
    vcore::BinaryMask m(W, H, 0);
    for (int k = 0; k < 6; ++k) {
      const double cx = ux(rng), cy = uy(rng), r = ur(rng);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) m.at(x, y) = 1;
    }
    vcore::SectionImage s;
    s.rgb = vcore::Raster<vcore::Rgb>(W, H);
    for (auto& p : s.rgb)
      p = {static_cast<std::uint8_t>(byte(rng)), static_cast<std::uint8_t>(byte(rng)),
           static_cast<std::uint8_t>(byte(rng))};
    s.section_index = d;
    core.sections.push_back(std::move(s));
    core.tissue_masks.push_back(std::move(m));
  }

  // Fill a cell row-major across sections until `target` pixels are tissue.
  auto plant = [&](std::pair<int, int> cell, std::int64_t target) {
    for (auto& m : core.tissue_masks)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m.at(cell.first * size + x, cell.second * size + y) = 0;
    for (auto& m : core.tissue_masks)
      for (int y = 0; y < size && target > 0; ++y)
        for (int x = 0; x < size && target > 0; ++x, --target) m.at(cell.first * size + x, cell.second * size + y) = 1;
  };
  const std::int64_t area = std::int64_t(size) * size;
  // floor(0.6 * area * D): exactly on the line whenever that product is whole.
  const std::int64_t line = (6 * area * depth) / 10;
  plant(on_line, line);
  plant(above_line, line + 1);
  core.chain.rigid.assign(depth, vcore::SimilarityTransform::identity());
  core.chain.fields.resize(depth);
  core.chain.nonrigid_cost.assign(depth, 0.0);
  return core;
}

}  // namespace oracle
