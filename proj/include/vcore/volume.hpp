#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcore/register.hpp"

namespace vcore {

struct VolumetricCore {
  std::vector<SectionImage> sections;  ///< warped onto the shared canvas
  std::vector<BinaryMask> tissue_masks;
  double mpp = 0.5;
  Canvas canvas;
  RegistrationChain chain;

  int depth() const { return static_cast<int>(sections.size()); }
};

struct AssembleOptions {
  int canvas_multiple = 256;
  TissueMaskOptions tissue;
  int close_radius = 5;
  double min_ribbon_fraction = 0.001;
};

/// Union bounding box of every section's warped frame, with the origin at its
/// top-left and width/height padded up to `multiple` (right and bottom).
Canvas compute_canvas(std::span<const SectionImage> sections, std::span<const SimilarityTransform> rigid,
                      int multiple = 256);

/// Warps each raw section with its chain transforms onto the common canvas and
/// computes tissue masks on the warped images. Fields in the chain must live
/// on the canvas that compute_canvas produces for these inputs.
VolumetricCore assemble_core(std::span<const SectionImage> raws, const RegistrationChain& chain,
                             const AssembleOptions& options = {});

enum class TissueRule { DepthMean, SectionMin };

struct PatchOptions {
  int size = 256;
  double min_tissue = 0.6;
  TissueRule rule = TissueRule::DepthMean;
};

struct VolumetricPatch {
  int x = 0;  ///< canvas origin of the patch
  int y = 0;
  int depth = 0;
  int side = 0;
  double tissue_fraction = 0.0;  ///< depth mean of in-mask fractions
  std::vector<std::uint8_t> voxels;  ///< [d][row][col][rgb]
};

/// Tissue pixel count of the size x size window at (x, y) in every section.
std::vector<std::int64_t> patch_tissue_counts(const VolumetricCore& core, int x, int y, int size);

/// Non-overlapping grid from the canvas origin; a cell is kept when its
/// tissue fraction is strictly above min_tissue (depth mean, or the minimum
/// over sections under TissueRule::SectionMin).
std::vector<VolumetricPatch> extract_patches(const VolumetricCore& core, const PatchOptions& options = {});

// Persistence ---------------------------------------------------------------

nlohmann::json chain_to_json(const RegistrationChain& chain);
RegistrationChain chain_from_json(const nlohmann::json& j);

/// section_XXX.png, mask_XXX.png and core.json with D, mpp, canvas and the
/// chain provenance. `extra` is merged into core.json.
void write_core(const VolumetricCore& core, const std::filesystem::path& dir, const nlohmann::json& extra = {});
VolumetricCore read_core(const std::filesystem::path& dir);

/// Patch blob: u32 D, u32 side (little-endian), then the raw voxels. Writes
/// patch_XXXXX.bin files and patches.json.
void write_patches(std::span<const VolumetricPatch> patches, const std::filesystem::path& dir);
VolumetricPatch read_patch_blob(const std::filesystem::path& path);

}  // namespace vcore
