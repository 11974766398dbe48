#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "vcore/raster.hpp"

namespace vcore {

class FeatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Keypoint {
  float x = 0.f;            ///< sub-pixel column in input-image pixels
  float y = 0.f;            ///< sub-pixel row in input-image pixels
  float scale = 0.f;        ///< blur sigma in input-image pixels
  float orientation = 0.f;  ///< radians in [0, 2pi), atan2(dy, dx) with y down
  float response = 0.f;     ///< |DoG| at the refined extremum
  int octave = -1;          ///< -1: derive from scale
  float layer = 0.f;        ///< fractional scale index inside the octave
};

struct Descriptor {
  std::array<float, 128> values{};
};

struct SiftOptions {
  int octaves = 4;
  int scales_per_octave = 3;
  double contrast_thresh = 0.04;
  double edge_thresh = 10.0;
  double sigma = 1.6;
  double input_blur = 0.5;
  /// Keep only the strongest N keypoints (0 keeps all).
  std::size_t max_keypoints = 0;
};

struct DescriptorBatch {
  std::vector<Keypoint> keypoints;  ///< keypoints that produced a descriptor
  std::vector<Descriptor> descriptors;
  std::size_t skipped = 0;          ///< out-of-bounds keypoints
};

/// Gaussian scale space and its difference-of-Gaussians stack.
class ScaleSpace {
 public:
  ScaleSpace(const GrayImage& image, const SiftOptions& options);

  int octaves() const { return static_cast<int>(gauss_.size()); }
  const GrayImage& gaussian(int octave, int layer) const { return gauss_[octave][layer]; }
  const GrayImage& dog(int octave, int layer) const { return dog_[octave][layer]; }
  const SiftOptions& options() const { return options_; }

 private:
  SiftOptions options_;
  std::vector<std::vector<GrayImage>> gauss_;
  std::vector<std::vector<GrayImage>> dog_;
};

/// Separable Gaussian blur with reflect-101 borders.
GrayImage gaussian_blur(const GrayImage& image, double sigma);

/// DoG extrema with quadratic sub-pixel refinement, contrast and edge
/// rejection, and 36-bin orientation assignment. Output is ordered by
/// (octave, y, x, scale). When `mask` is given, keypoints whose rounded
/// position falls outside it are dropped. Throws FeatureError for images
/// smaller than 32x32.
std::vector<Keypoint> detect_keypoints(const GrayImage& image, const SiftOptions& options = {},
                                       const BinaryMask* mask = nullptr);
std::vector<Keypoint> detect_keypoints(const ScaleSpace& space, const BinaryMask* mask = nullptr);

/// 4x4x8 gradient histograms in the keypoint frame, clamped at 0.2 and
/// L2-normalised.
DescriptorBatch compute_descriptors(const GrayImage& image, std::span<const Keypoint> keypoints,
                                    const SiftOptions& options = {});
DescriptorBatch compute_descriptors(const ScaleSpace& space, std::span<const Keypoint> keypoints);

DescriptorBatch detect_and_describe(const GrayImage& image, const SiftOptions& options = {},
                                    const BinaryMask* mask = nullptr);

// Cache format, little-endian: u32 count, then per record f32 x, y, scale,
// orientation followed by 128 f32 descriptor values.
void write_feature_dump(const std::filesystem::path& path, std::span<const Keypoint> keypoints,
                        std::span<const Descriptor> descriptors);
DescriptorBatch read_feature_dump(const std::filesystem::path& path);

}  // namespace vcore
