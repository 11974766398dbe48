#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vcore {

/// Dense row-major 2D grid. Element (x, y) lives at y * width + x.
template <class T>
class Raster {
 public:
  using value_type = T;

  Raster() = default;
  Raster(int width, int height, T fill = T{})
      : width_(width), height_(height) {
    if (width < 0 || height < 0) {
      throw std::invalid_argument("Raster: negative dimensions");
    }
    data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool contains(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  T& at(int x, int y) { return data_[index(x, y)]; }
  const T& at(int x, int y) const { return data_[index(x, y)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool same_shape(const Raster& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }
  template <class U>
  bool same_shape(const Raster<U>& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline constexpr Rgb kGlassWhite{255, 255, 255};

/// H in degrees [0, 360), S and V in [0, 1].
struct Hsv {
  double h = 0.0;
  double s = 0.0;
  double v = 0.0;
};

using BinaryMask = Raster<std::uint8_t>;
using GrayImage = Raster<float>;
using ScalarField = Raster<double>;
using HsvImage = Raster<Hsv>;
using LabelImage = Raster<int>;

/// One serial-section raster with its physical scale.
struct SectionImage {
  Raster<Rgb> rgb;
  double mpp = 0.5;  ///< microns per pixel (0.25 at 40x, 0.5 at 20x)
  int level = 0;     ///< pyramid level index, 0 = full resolution
  int section_index = 0;

  int width() const { return rgb.width(); }
  int height() const { return rgb.height(); }

  /// Throws std::invalid_argument unless width*height > 0 and mpp > 0.
  void validate() const;
};

/// Half-open bounding box [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct RibbonLabel {
  int label_id = 0;  ///< 1-based, in output order
  BoundingBox bounding_box;
  std::int64_t pixel_count = 0;
};

struct RibbonLabeling {
  std::vector<RibbonLabel> ribbons;
  LabelImage labels;  ///< 0 = background or filtered, otherwise label_id
};

struct TissueMaskOptions {
  double hue_lo = 270.0;  ///< degrees; window wraps when hue_lo > hue_hi
  double hue_hi = 30.0;
  double sat_min = 0.05;
};

// Colour space.
Hsv rgb_to_hsv(Rgb px);
Rgb hsv_to_rgb(const Hsv& hsv);
HsvImage rgb_to_hsv(const SectionImage& image);

/// Luma 0.299/0.587/0.114, scaled to [0, 1].
GrayImage to_gray(const SectionImage& image);

bool hue_in_window(double hue, double lo, double hi);

BinaryMask tissue_mask(const SectionImage& image, const TissueMaskOptions& options = {});

// Morphology with a discrete disk structuring element. Out-of-image pixels
// take no part in either operation, so close() is extensive and idempotent.
BinaryMask dilate(const BinaryMask& mask, int radius);
BinaryMask erode(const BinaryMask& mask, int radius);
BinaryMask morphological_close(const BinaryMask& mask, int radius);

/// 8-connected components with at least `min_area` pixels, ordered by
/// bounding-box origin (top-to-bottom, then left-to-right).
RibbonLabeling label_components(const BinaryMask& mask, std::int64_t min_area);
std::vector<RibbonLabel> label_ribbons(const BinaryMask& mask, std::int64_t min_area);

/// Mask pixels that touch an unset pixel (or the image edge) through a
/// 4-neighbour.
BinaryMask boundary_of(const BinaryMask& mask);

/// Sets every background pixel not 4-connected to the image edge.
BinaryMask fill_holes(const BinaryMask& mask);

/// Value used by signed_distance when the mask has no boundary pixels.
inline constexpr double kUnreachableDistance = 1e9;

/// Exact Euclidean distance to the nearest boundary_of(mask) pixel, negated
/// inside the mask. Boundary pixels are 0. Empty masks yield
/// kUnreachableDistance everywhere.
ScalarField signed_distance(const BinaryMask& mask);

/// Unsigned exact Euclidean distance to the nearest set pixel of `sites`
/// (separable lower-envelope transform). No sites gives kUnreachableDistance.
ScalarField distance_to(const BinaryMask& sites);

std::int64_t count_set(const BinaryMask& mask);
BinaryMask mask_of_label(const LabelImage& labels, int label_id);

/// Tissue mask, closed, with components below `min_area_fraction` of the
/// image area dropped and holes filled.
BinaryMask ribbon_mask(const SectionImage& image, const TissueMaskOptions& tissue,
                       int close_radius, double min_area_fraction);

/// Box-filter downsample by an integer factor; partial edge blocks average
/// the pixels they contain. mpp and level are updated.
SectionImage downsample(const SectionImage& image, int factor);

SectionImage crop(const SectionImage& image, const BoundingBox& box);

}  // namespace vcore
