#pragma once

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcore/register.hpp"
#include "vcore/volume.hpp"

namespace vcore {

struct AlignOptions {
  ChainOptions chain;
  /// Rigid registration runs on sections downsampled by this factor. It is
  /// halved until the thumbnail's shorter side is at least min_thumbnail_side.
  int thumbnail_factor = 16;
  int min_thumbnail_side = 512;
  bool nonrigid = true;
  NonrigidOptions nonrigid_options;
  AssembleOptions assemble;
  /// Also count ratio-test matches per pair for the report.
  bool compare_matchers = true;
};

struct AlignResult {
  VolumetricCore core;
  nlohmann::json report;
  int thumbnail_factor = 1;
};

/// Loads every PNG/TIFF in `dir` (sorted by file name) with its sidecar.
std::vector<SectionImage> load_stack_dir(const std::filesystem::path& dir);

/// Thumbnail rigid chain, propagation to full resolution, canvas assembly and
/// sequential boundary-driven refinement: section i is refined against the
/// finished section i-1, starting from the field of section i-1.
AlignResult align_stack(std::span<const SectionImage> sections, const AlignOptions& options = {});

int effective_thumbnail_factor(std::span<const SectionImage> sections, int requested, int min_side);

/// Canvas position of a section pixel under the core's chain.
Point2 section_to_canvas(const VolumetricCore& core, std::size_t section, Point2 p, bool with_field = true);

/// Per-pair matched positions carried onto the canvas: element k holds
/// (point in section k+1, point in section k) for every stored inlier.
std::vector<std::vector<std::pair<Point2, Point2>>> canvas_match_pairs(const VolumetricCore& core,
                                                                       bool with_fields = true);

/// landmarks[k][i] is landmark k in raw section i. Element i-1 pairs the
/// canvas positions of every landmark in sections i and i-1.
std::vector<std::vector<std::pair<Point2, Point2>>> landmark_canvas_pairs(
    const VolumetricCore& core, const std::vector<std::vector<Point2>>& landmarks, bool with_fields = true);

/// landmarks.json as written by write_stack.
std::vector<std::vector<Point2>> read_landmarks(const std::filesystem::path& path);

}  // namespace vcore
