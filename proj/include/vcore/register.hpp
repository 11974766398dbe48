#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcore/features.hpp"
#include "vcore/geometry.hpp"
#include "vcore/matching.hpp"
#include "vcore/raster.hpp"

namespace vcore {

class RegistrationFailure : public std::runtime_error {
 public:
  enum class Kind { TooFewMatches, DegenerateGeometry, EmptyBoundary, ShapeMismatch };
  RegistrationFailure(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// A correspondence: `src` in the moving section, `dst` in the fixed one.
struct PointPair {
  Point2 src;
  Point2 dst;
};

struct RansacOptions {
  int iterations = 2000;
  double inlier_px = 3.0;
  double min_scale = 0.5;
  double max_scale = 2.0;
  std::uint64_t seed = 0x5eed;
};

struct SimilarityEstimate {
  SimilarityTransform transform;
  std::vector<bool> inliers;
  std::size_t inlier_count = 0;
  double rms_residual = 0.0;  ///< over inliers, pixels
};

/// Closed-form least-squares similarity (complex-number Procrustes).
/// Two distinct pairs are interpolated exactly.
SimilarityTransform fit_similarity(std::span<const PointPair> pairs);

/// RANSAC over 2-pair samples, then least-squares refit on the consensus set
/// (repeated while the consensus grows). Deterministic for a fixed seed.
SimilarityEstimate estimate_similarity(std::span<const PointPair> pairs, const RansacOptions& options = {});

/// Translation multiplied by `factor`; scale and rotation kept. The level
/// decreases by log2(factor) unless `target_level` is given.
SimilarityTransform propagate_to_level(const SimilarityTransform& t, double factor,
                                       std::optional<int> target_level = std::nullopt);

// ---------------------------------------------------------------------------
// Cubic B-spline displacement field

/// Control point (i, j) sits at ((i-1)*spacing, (j-1)*spacing), so a domain of
/// width W needs floor((W-1)/spacing) + 4 control columns.
class DisplacementField {
 public:
  DisplacementField() = default;
  DisplacementField(int width, int height, double spacing);

  int width() const { return width_; }
  int height() const { return height_; }
  double spacing() const { return spacing_; }
  int grid_x() const { return gx_; }
  int grid_y() const { return gy_; }

  Point2& control(int i, int j) { return control_[static_cast<std::size_t>(j) * gx_ + i]; }
  const Point2& control(int i, int j) const { return control_[static_cast<std::size_t>(j) * gx_ + i]; }
  std::span<Point2> controls() { return control_; }
  std::span<const Point2> controls() const { return control_; }

  /// u(x, y); arguments are clamped into the domain.
  Point2 displacement(double x, double y) const;

  /// Largest control-vector magnitude.
  double max_control_magnitude() const;

  /// Solves c + u(c) = y by fixed-point iteration.
  Point2 invert(Point2 y, int max_iters = 50, double tol = 1e-6) const;

  /// Cubic basis weights for the cell containing coordinate `v` along an axis.
  /// Returns the first control index of the 4-wide support.
  static int basis(double v, double spacing, int extent, double weights[4]);

 private:
  int width_ = 0;
  int height_ = 0;
  double spacing_ = 64.0;
  int gx_ = 0;
  int gy_ = 0;
  std::vector<Point2> control_;
};

/// Mean over control nodes of squared second differences (xx, yy and twice
/// xy), summed over both components. Zero for any affine control grid.
double bending_energy(const DisplacementField& field);

enum class NonrigidOptimizer { Lbfgs, GradientDescent };

struct NonrigidOptions {
  double grid_spacing = 48.0;
  double lambda_bend = 0.01;
  int max_iters = 300;
  int patience = 10;
  double max_disp_factor = 2.0;  ///< control vectors capped at factor * spacing
  NonrigidOptimizer optimizer = NonrigidOptimizer::Lbfgs;
};

struct NonrigidResult {
  DisplacementField field;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  bool diverged = false;
};

/// Boundary objective for a fixed/moving pair. A fixed-boundary pixel x is
/// carried to x + u(x); its cost is the moving signed distance there, squared.
/// Inputs may be boundaries or filled masks: both are normalised through
/// fill_holes and boundary_of.
class BoundaryObjective {
 public:
  BoundaryObjective(const BinaryMask& fixed, const BinaryMask& moving, double grid_spacing, double lambda_bend);

  std::size_t parameter_count() const { return 2 * static_cast<std::size_t>(gx_) * gy_; }
  DisplacementField make_field(std::span<const double> params) const;

  /// Total cost; fills `grad` when non-empty.
  double evaluate(std::span<const double> params, std::span<double> grad) const;

  /// Mean squared distance term only.
  double data_cost(const DisplacementField& field) const;

  /// Mean |D_moving(x + u(x))| over fixed-boundary pixels.
  double mean_abs_residual(const DisplacementField& field) const;

  std::size_t boundary_size() const { return samples_.size(); }

 private:
  struct Sample {
    double x, y;
    int ix, iy;
    double wx[4], wy[4];
  };
  double sample_distance(double x, double y, double* dx, double* dy) const;

  int width_, height_;
  double spacing_, lambda_;
  int gx_, gy_;
  ScalarField distance_;
  std::vector<Sample> samples_;
};

/// `initial`, when given, seeds the optimisation and must match the grid that
/// the options imply for this domain.
NonrigidResult nonrigid_refine(const BinaryMask& fixed_boundary, const BinaryMask& moving_boundary,
                               const NonrigidOptions& options = {}, const DisplacementField* initial = nullptr);

// ---------------------------------------------------------------------------
// Warping

/// Output raster geometry: output pixel (c, r) sits at reference coordinates
/// (c + origin_x, r + origin_y).
struct Canvas {
  int width = 0;
  int height = 0;
  double origin_x = 0.0;
  double origin_y = 0.0;
};

/// Backward warp: output pixel c samples the input at
/// rigid^-1(c + origin + u(c)) with bilinear interpolation; samples outside
/// the input are white. The field, when present, lives on the canvas grid.
SectionImage apply_warp(const SectionImage& image, const SimilarityTransform& rigid,
                        const DisplacementField* field = nullptr, std::optional<Canvas> canvas = std::nullopt);

/// Nearest-neighbour counterpart of apply_warp for masks (outside = 0).
BinaryMask warp_mask(const BinaryMask& mask, const SimilarityTransform& rigid,
                     const DisplacementField* field = nullptr, std::optional<Canvas> canvas = std::nullopt);

/// Canvas position of a point given in section pixels, i.e. the inverse of the
/// sampling map used by apply_warp.
Point2 map_to_canvas(Point2 section_point, const SimilarityTransform& rigid, const DisplacementField* field,
                     const Canvas& canvas);

// ---------------------------------------------------------------------------
// Sequential chain

enum class MatcherKind { Sinkhorn, RatioTest };

struct ChainOptions {
  SiftOptions sift{.max_keypoints = 600};
  SinkhornOptions sinkhorn;
  MatcherKind matcher = MatcherKind::Sinkhorn;
  double ratio = 0.8;
  RansacOptions ransac;
  std::size_t min_matches = 8;
  TissueMaskOptions tissue;
  int close_radius = 5;
  double min_ribbon_fraction = 0.001;
  int mask_dilation = 8;
  bool restrict_to_ribbon = true;
};

struct SectionFeatures {
  DescriptorBatch batch;
  BinaryMask ribbon;  ///< filled ribbon mask at detection level
};

struct PairDiagnostics {
  std::size_t moving = 0;  ///< section index; the fixed one is moving - 1
  std::size_t match_count = 0;
  std::size_t inlier_count = 0;
  double inlier_ratio = 0.0;
  double residual_px = 0.0;
  bool failed = false;
  std::string failure;
  SimilarityTransform pairwise;  ///< maps section `moving` into section `moving - 1`
  std::vector<PointPair> inliers;
};

struct RegistrationChain {
  std::size_t reference_index = 0;
  std::vector<SimilarityTransform> rigid;        ///< section -> reference
  std::vector<std::optional<DisplacementField>> fields;
  std::vector<PairDiagnostics> pairs;            ///< pairs[i-1] describes (i, i-1)
  std::vector<double> nonrigid_cost;             ///< final boundary cost per section (0 for reference)

  std::size_t size() const { return rigid.size(); }
};

SectionFeatures extract_section_features(const SectionImage& section, const ChainOptions& options = {});

/// Matched keypoint positions of `moving` (src) against `fixed` (dst).
std::vector<PointPair> correspond(const SectionFeatures& moving, const SectionFeatures& fixed,
                                  const ChainOptions& options = {});

/// Chain from precomputed correspondences; `pairs[k]` holds matches of section
/// k+1 against section k. Failed pairs compose identity and are flagged.
RegistrationChain chain_from_correspondences(std::span<const std::vector<PointPair>> pairs,
                                             const ChainOptions& options = {}, int level = 0);

RegistrationChain chain_register(std::span<const SectionImage> sections, const ChainOptions& options = {});

}  // namespace vcore
