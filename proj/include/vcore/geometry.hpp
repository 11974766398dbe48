#pragma once

#include <cmath>

namespace vcore {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// p -> scale * R(rotation) * p + translation, in pixels of `level`.
struct SimilarityTransform {
  double scale = 1.0;
  double rotation = 0.0;  ///< radians
  double tx = 0.0;
  double ty = 0.0;
  int level = 0;

  static SimilarityTransform identity(int level = 0) { return {1.0, 0.0, 0.0, 0.0, level}; }

  Point2 apply(Point2 p) const {
    const double c = scale * std::cos(rotation);
    const double s = scale * std::sin(rotation);
    return {c * p.x - s * p.y + tx, s * p.x + c * p.y + ty};
  }

  SimilarityTransform inverse() const {
    SimilarityTransform inv;
    inv.scale = 1.0 / scale;
    inv.rotation = -rotation;
    inv.level = level;
    const Point2 t = inv.apply({-tx, -ty});
    inv.tx = t.x;
    inv.ty = t.y;
    return inv;
  }

  /// (this o other)(p) = this(other(p)).
  SimilarityTransform compose(const SimilarityTransform& other) const {
    SimilarityTransform out;
    out.scale = scale * other.scale;
    out.rotation = std::remainder(rotation + other.rotation, 2.0 * M_PI);
    out.level = level;
    const Point2 t = apply({other.tx, other.ty});
    out.tx = t.x;
    out.ty = t.y;
    return out;
  }
};

/// Angle difference wrapped to (-pi, pi].
inline double angle_difference(double a, double b) { return std::remainder(a - b, 2.0 * M_PI); }

}  // namespace vcore
