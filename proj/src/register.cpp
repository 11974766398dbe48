#include "vcore/register.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <deque>
#include <limits>
#include <numeric>
#include <random>

namespace vcore {

namespace {

using cplx = std::complex<double>;

cplx to_c(Point2 p) { return {p.x, p.y}; }

SimilarityTransform from_complex(cplx a, cplx b, int level) {
  SimilarityTransform t;
  t.scale = std::abs(a);
  t.rotation = std::arg(a);
  t.tx = b.real();
  t.ty = b.imag();
  t.level = level;
  return t;
}

// Least squares for dst = a * src + b over the selected pairs.
bool fit_complex(std::span<const PointPair> pairs, const std::vector<std::size_t>& idx, cplx& a, cplx& b) {
  if (idx.size() < 2) return false;
  cplx ms = 0, md = 0;
  for (std::size_t k : idx) {
    ms += to_c(pairs[k].src);
    md += to_c(pairs[k].dst);
  }
  ms /= double(idx.size());
  md /= double(idx.size());
  cplx num = 0;
  double den = 0;
  for (std::size_t k : idx) {
    const cplx s = to_c(pairs[k].src) - ms;
    const cplx d = to_c(pairs[k].dst) - md;
    num += d * std::conj(s);
    den += std::norm(s);
  }
  if (!(den > 1e-12)) return false;
  a = num / den;
  b = md - a * ms;
  return std::abs(a) > 0;
}

double residual(const SimilarityTransform& t, const PointPair& p) { return distance(t.apply(p.src), p.dst); }

}  // namespace

SimilarityTransform fit_similarity(std::span<const PointPair> pairs) {
  if (pairs.size() < 2) {
    throw RegistrationFailure(RegistrationFailure::Kind::TooFewMatches, "fit_similarity: need at least 2 pairs");
  }
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  cplx a, b;
  if (!fit_complex(pairs, idx, a, b)) {
    throw RegistrationFailure(RegistrationFailure::Kind::DegenerateGeometry, "fit_similarity: coincident points");
  }
  return from_complex(a, b, 0);
}

SimilarityEstimate estimate_similarity(std::span<const PointPair> pairs, const RansacOptions& options) {
  const std::size_t n = pairs.size();
  if (n < 2) {
    throw RegistrationFailure(RegistrationFailure::Kind::TooFewMatches, "estimate_similarity: need at least 2 pairs");
  }
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);

  auto in_gate = [&](double s) { return s >= options.min_scale && s <= options.max_scale; };
  auto consensus = [&](const SimilarityTransform& t, std::vector<std::size_t>& out, double& err) {
    out.clear();
    err = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double r = residual(t, pairs[k]);
      if (r < options.inlier_px) {
        out.push_back(k);
        err += r * r;
      }
    }
  };

  std::vector<std::size_t> best, current;
  double best_err = std::numeric_limits<double>::infinity();
  bool any_valid = false;
  const int iterations = std::max(1, options.iterations);
  for (int it = 0; it < iterations; ++it) {
    std::size_t i = pick(rng), j = pick(rng);
    if (n == 2) {
      i = 0;
      j = 1;
    }
    if (i == j) continue;
    if (distance(pairs[i].src, pairs[j].src) < 1e-9 || distance(pairs[i].dst, pairs[j].dst) < 1e-9) continue;
    cplx a, b;
    if (!fit_complex(pairs, {i, j}, a, b)) continue;
    const SimilarityTransform t = from_complex(a, b, 0);
    if (!in_gate(t.scale)) continue;
    any_valid = true;
    double err = 0;
    consensus(t, current, err);
    if (current.size() > best.size() || (current.size() == best.size() && err < best_err)) {
      best = current;
      best_err = err;
    }
    if (n == 2) break;
  }
  if (!any_valid || best.size() < 2) {
    throw RegistrationFailure(RegistrationFailure::Kind::DegenerateGeometry,
                              "estimate_similarity: no non-degenerate sample within the scale gate");
  }

  // Refit on the consensus set while it keeps growing.
  cplx a, b;
  if (!fit_complex(pairs, best, a, b)) {
    throw RegistrationFailure(RegistrationFailure::Kind::DegenerateGeometry, "estimate_similarity: degenerate consensus");
  }
  SimilarityTransform t = from_complex(a, b, 0);
  for (int round = 0; round < 10; ++round) {
    double err = 0;
    consensus(t, current, err);
    if (current.size() < best.size() || current.size() < 2) break;
    cplx a2, b2;
    if (!fit_complex(pairs, current, a2, b2)) break;
    const bool grew = current.size() > best.size();
    best = current;
    t = from_complex(a2, b2, 0);
    if (!grew) break;
  }

  SimilarityEstimate est;
  est.transform = t;
  est.inliers.assign(n, false);
  double sq = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double r = residual(t, pairs[k]);
    if (r < options.inlier_px) {
      est.inliers[k] = true;
      ++est.inlier_count;
      sq += r * r;
    }
  }
  est.rms_residual = est.inlier_count ? std::sqrt(sq / double(est.inlier_count)) : 0.0;
  return est;
}

SimilarityTransform propagate_to_level(const SimilarityTransform& t, double factor, std::optional<int> target_level) {
  if (!(factor > 0)) throw std::invalid_argument("propagate_to_level: factor must be > 0");
  SimilarityTransform out = t;
  out.tx *= factor;
  out.ty *= factor;
  out.level = target_level ? *target_level : t.level - static_cast<int>(std::lround(std::log2(factor)));
  return out;
}

// ---------------------------------------------------------------------------
// DisplacementField

DisplacementField::DisplacementField(int width, int height, double spacing)
    : width_(width), height_(height), spacing_(spacing) {
  if (width < 1 || height < 1) throw std::invalid_argument("DisplacementField: empty domain");
  if (!(spacing > 0)) throw std::invalid_argument("DisplacementField: spacing must be > 0");
  gx_ = static_cast<int>(std::floor((width - 1) / spacing)) + 4;
  gy_ = static_cast<int>(std::floor((height - 1) / spacing)) + 4;
  control_.assign(static_cast<std::size_t>(gx_) * gy_, Point2{});
}

int DisplacementField::basis(double v, double spacing, int extent, double w[4]) {
  v = std::clamp(v, 0.0, double(extent - 1));
  const double t = v / spacing;
  const int max_cell = static_cast<int>(std::floor((extent - 1) / spacing));
  const int cell = std::clamp(static_cast<int>(std::floor(t)), 0, max_cell);
  const double u = t - cell;
  const double u2 = u * u, u3 = u2 * u;
  w[0] = (1 - u) * (1 - u) * (1 - u) / 6.0;
  w[1] = (3 * u3 - 6 * u2 + 4) / 6.0;
  w[2] = (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0;
  w[3] = u3 / 6.0;
  return cell;
}

Point2 DisplacementField::displacement(double x, double y) const {
  double wx[4], wy[4];
  const int ix = basis(x, spacing_, width_, wx);
  const int iy = basis(y, spacing_, height_, wy);
  Point2 u;
  for (int b = 0; b < 4; ++b) {
    for (int a = 0; a < 4; ++a) {
      const double w = wx[a] * wy[b];
      const Point2& c = control(ix + a, iy + b);
      u.x += w * c.x;
      u.y += w * c.y;
    }
  }
  return u;
}

double DisplacementField::max_control_magnitude() const {
  double m = 0;
  for (const Point2& c : control_) m = std::max(m, std::hypot(c.x, c.y));
  return m;
}

Point2 DisplacementField::invert(Point2 y, int max_iters, double tol) const {
  Point2 c = y;
  for (int it = 0; it < max_iters; ++it) {
    const Point2 next = y - displacement(c.x, c.y);
    const double step = distance(next, c);
    c = next;
    if (step < tol) break;
  }
  return c;
}

double bending_energy(const DisplacementField& field) {
  const int gx = field.grid_x(), gy = field.grid_y();
  double e = 0;
  for (int comp = 0; comp < 2; ++comp) {
    auto c = [&](int i, int j) { return comp == 0 ? field.control(i, j).x : field.control(i, j).y; };
    for (int j = 0; j < gy; ++j) {
      for (int i = 1; i + 1 < gx; ++i) {
        const double d = c(i - 1, j) - 2 * c(i, j) + c(i + 1, j);
        e += d * d;
      }
    }
    for (int j = 1; j + 1 < gy; ++j) {
      for (int i = 0; i < gx; ++i) {
        const double d = c(i, j - 1) - 2 * c(i, j) + c(i, j + 1);
        e += d * d;
      }
    }
    for (int j = 0; j + 1 < gy; ++j) {
      for (int i = 0; i + 1 < gx; ++i) {
        const double d = c(i + 1, j + 1) - c(i + 1, j) - c(i, j + 1) + c(i, j);
        e += 2 * d * d;
      }
    }
  }
  return e / (double(gx) * gy);
}

// ---------------------------------------------------------------------------
// BoundaryObjective

BoundaryObjective::BoundaryObjective(const BinaryMask& fixed, const BinaryMask& moving, double grid_spacing,
                                     double lambda_bend)
    : width_(fixed.width()), height_(fixed.height()), spacing_(grid_spacing), lambda_(lambda_bend) {
  if (!fixed.same_shape(moving)) {
    throw RegistrationFailure(RegistrationFailure::Kind::ShapeMismatch, "nonrigid: boundary masks differ in size");
  }
  const BinaryMask fixed_filled = fill_holes(fixed);
  const BinaryMask moving_filled = fill_holes(moving);
  const BinaryMask fixed_ring = boundary_of(fixed_filled);
  if (count_set(fixed_ring) == 0 || count_set(moving_filled) == 0) {
    throw RegistrationFailure(RegistrationFailure::Kind::EmptyBoundary, "nonrigid: empty boundary");
  }
  const DisplacementField probe(width_, height_, spacing_);
  gx_ = probe.grid_x();
  gy_ = probe.grid_y();
  distance_ = signed_distance(moving_filled);
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      if (!fixed_ring.at(x, y)) continue;
      Sample s{};
      s.x = x;
      s.y = y;
      s.ix = DisplacementField::basis(x, spacing_, width_, s.wx);
      s.iy = DisplacementField::basis(y, spacing_, height_, s.wy);
      samples_.push_back(s);
    }
  }
}

DisplacementField BoundaryObjective::make_field(std::span<const double> params) const {
  DisplacementField field(width_, height_, spacing_);
  auto ctrl = field.controls();
  for (std::size_t k = 0; k < ctrl.size(); ++k) ctrl[k] = {params[2 * k], params[2 * k + 1]};
  return field;
}

double BoundaryObjective::sample_distance(double x, double y, double* dx, double* dy) const {
  const double cx = std::clamp(x, 0.0, double(width_ - 1));
  const double cy = std::clamp(y, 0.0, double(height_ - 1));
  const int x0 = std::min(static_cast<int>(std::floor(cx)), std::max(width_ - 2, 0));
  const int y0 = std::min(static_cast<int>(std::floor(cy)), std::max(height_ - 2, 0));
  const int x1 = std::min(x0 + 1, width_ - 1);
  const int y1 = std::min(y0 + 1, height_ - 1);
  const double fx = cx - x0, fy = cy - y0;
  const double d00 = distance_.at(x0, y0), d10 = distance_.at(x1, y0);
  const double d01 = distance_.at(x0, y1), d11 = distance_.at(x1, y1);
  if (dx) *dx = (x == cx) ? (1 - fy) * (d10 - d00) + fy * (d11 - d01) : 0.0;
  if (dy) *dy = (y == cy) ? (1 - fx) * (d01 - d00) + fx * (d11 - d10) : 0.0;
  return (1 - fy) * ((1 - fx) * d00 + fx * d10) + fy * ((1 - fx) * d01 + fx * d11);
}

double BoundaryObjective::evaluate(std::span<const double> params, std::span<double> grad) const {
  if (params.size() != parameter_count()) throw std::invalid_argument("BoundaryObjective: parameter size");
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
  const double inv_n = 1.0 / double(samples_.size());
  double data = 0;
  for (const Sample& s : samples_) {
    double ux = 0, uy = 0;
    for (int b = 0; b < 4; ++b) {
      for (int a = 0; a < 4; ++a) {
        const std::size_t k = static_cast<std::size_t>(s.iy + b) * gx_ + (s.ix + a);
        const double w = s.wx[a] * s.wy[b];
        ux += w * params[2 * k];
        uy += w * params[2 * k + 1];
      }
    }
    double ddx = 0, ddy = 0;
    const double d = sample_distance(s.x + ux, s.y + uy, &ddx, &ddy);
    data += d * d;
    if (want_grad) {
      const double gx = 2 * d * ddx * inv_n, gy = 2 * d * ddy * inv_n;
      for (int b = 0; b < 4; ++b) {
        for (int a = 0; a < 4; ++a) {
          const std::size_t k = static_cast<std::size_t>(s.iy + b) * gx_ + (s.ix + a);
          const double w = s.wx[a] * s.wy[b];
          grad[2 * k] += w * gx;
          grad[2 * k + 1] += w * gy;
        }
      }
    }
  }
  data *= inv_n;

  // Bending energy and its gradient, same stencil as bending_energy().
  const double scale = lambda_ / (double(gx_) * gy_);
  double bend = 0;
  auto at = [&](int i, int j, int comp) { return (static_cast<std::size_t>(j) * gx_ + i) * 2 + comp; };
  for (int comp = 0; comp < 2; ++comp) {
    for (int j = 0; j < gy_; ++j) {
      for (int i = 1; i + 1 < gx_; ++i) {
        const double d = params[at(i - 1, j, comp)] - 2 * params[at(i, j, comp)] + params[at(i + 1, j, comp)];
        bend += d * d;
        if (want_grad) {
          grad[at(i - 1, j, comp)] += scale * 2 * d;
          grad[at(i, j, comp)] -= scale * 4 * d;
          grad[at(i + 1, j, comp)] += scale * 2 * d;
        }
      }
    }
    for (int j = 1; j + 1 < gy_; ++j) {
      for (int i = 0; i < gx_; ++i) {
        const double d = params[at(i, j - 1, comp)] - 2 * params[at(i, j, comp)] + params[at(i, j + 1, comp)];
        bend += d * d;
        if (want_grad) {
          grad[at(i, j - 1, comp)] += scale * 2 * d;
          grad[at(i, j, comp)] -= scale * 4 * d;
          grad[at(i, j + 1, comp)] += scale * 2 * d;
        }
      }
    }
    for (int j = 0; j + 1 < gy_; ++j) {
      for (int i = 0; i + 1 < gx_; ++i) {
        const double d = params[at(i + 1, j + 1, comp)] - params[at(i + 1, j, comp)] - params[at(i, j + 1, comp)] +
                         params[at(i, j, comp)];
        bend += 2 * d * d;
        if (want_grad) {
          grad[at(i + 1, j + 1, comp)] += scale * 4 * d;
          grad[at(i + 1, j, comp)] -= scale * 4 * d;
          grad[at(i, j + 1, comp)] -= scale * 4 * d;
          grad[at(i, j, comp)] += scale * 4 * d;
        }
      }
    }
  }
  return data + scale * bend;
}

double BoundaryObjective::data_cost(const DisplacementField& field) const {
  double acc = 0;
  for (const Sample& s : samples_) {
    const Point2 u = field.displacement(s.x, s.y);
    const double d = sample_distance(s.x + u.x, s.y + u.y, nullptr, nullptr);
    acc += d * d;
  }
  return acc / double(samples_.size());
}

double BoundaryObjective::mean_abs_residual(const DisplacementField& field) const {
  double acc = 0;
  for (const Sample& s : samples_) {
    const Point2 u = field.displacement(s.x, s.y);
    acc += std::abs(sample_distance(s.x + u.x, s.y + u.y, nullptr, nullptr));
  }
  return acc / double(samples_.size());
}

// ---------------------------------------------------------------------------
// Optimiser

namespace {

double dotv(std::span<const double> a, std::span<const double> b) {
  double acc = 0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

void project(std::vector<double>& x, double cap) {
  for (std::size_t k = 0; k + 1 < x.size(); k += 2) {
    const double m = std::hypot(x[k], x[k + 1]);
    if (m > cap) {
      x[k] *= cap / m;
      x[k + 1] *= cap / m;
    }
  }
}

// L-BFGS (or gradient descent) from x; returns the best iterate seen.
NonrigidResult optimise(const BoundaryObjective& objective, std::vector<double> x,
                              const NonrigidOptions& options) {
  const std::size_t n = objective.parameter_count();
  const double cap = options.max_disp_factor * options.grid_spacing;
  constexpr int kMemory = 7;
  constexpr double kArmijo = 1e-4;

  std::vector<double> g(n), x_new(n), g_new(n), d(n);
  project(x, cap);
  double f = objective.evaluate(x, g);

  NonrigidResult result;
  result.initial_cost = f;
  std::vector<double> best_x = x;
  double best_f = f;

  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;
  double gd_step = 0.0;
  int stalled = 0;

  for (int it = 0; it < options.max_iters; ++it) {
    double gmax = 0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax < 1e-12) break;

    bool use_lbfgs = options.optimizer == NonrigidOptimizer::Lbfgs && !s_hist.empty();
    if (use_lbfgs) {
      // Two-loop recursion.
      std::vector<double> q = g;
      std::vector<double> alpha(s_hist.size());
      for (std::size_t k = s_hist.size(); k-- > 0;) {
        alpha[k] = rho_hist[k] * dotv(s_hist[k], q);
        for (std::size_t m = 0; m < n; ++m) q[m] -= alpha[k] * y_hist[k][m];
      }
      const double gamma = dotv(s_hist.back(), y_hist.back()) / dotv(y_hist.back(), y_hist.back());
      for (double& v : q) v *= gamma;
      for (std::size_t k = 0; k < s_hist.size(); ++k) {
        const double beta = rho_hist[k] * dotv(y_hist[k], q);
        for (std::size_t m = 0; m < n; ++m) q[m] += s_hist[k][m] * (alpha[k] - beta);
      }
      for (std::size_t m = 0; m < n; ++m) d[m] = -q[m];
      if (dotv(d, g) >= 0) use_lbfgs = false;
    }
    double step = 1.0;
    if (!use_lbfgs) {
      // Steepest descent, first trial moves the largest control by ~1 px.
      for (std::size_t m = 0; m < n; ++m) d[m] = -g[m];
      step = gd_step > 0 ? 2.0 * gd_step : 1.0 / gmax;
    }

    bool accepted = false;
    double f_new = f;
    for (int ls = 0; ls < 40; ++ls) {
      for (std::size_t m = 0; m < n; ++m) x_new[m] = x[m] + step * d[m];
      project(x_new, cap);
      double decrease = 0;
      for (std::size_t m = 0; m < n; ++m) decrease += g[m] * (x_new[m] - x[m]);
      f_new = objective.evaluate(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + kArmijo * decrease && f_new < f) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    result.iterations = it + 1;
    if (!accepted) {
      if (!s_hist.empty()) {
        s_hist.clear();
        y_hist.clear();
        rho_hist.clear();
        continue;
      }
      break;
    }
    if (!use_lbfgs) gd_step = step;

    std::vector<double> s(n), yv(n);
    for (std::size_t m = 0; m < n; ++m) {
      s[m] = x_new[m] - x[m];
      yv[m] = g_new[m] - g[m];
    }
    const double sy = dotv(s, yv);
    if (sy > 1e-12 * std::max(1.0, dotv(yv, yv))) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > kMemory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }

    const double improvement = f - f_new;
    x.swap(x_new);
    g.swap(g_new);
    f = f_new;
    if (f < best_f) {
      best_f = f;
      best_x = x;
    }
    stalled = improvement < 1e-10 * std::max(1.0, f) ? stalled + 1 : 0;
    if (stalled >= options.patience) break;
  }

  result.field = objective.make_field(best_x);
  result.final_cost = best_f;
  return result;
}

std::vector<double> to_params(const DisplacementField& field) {
  std::vector<double> x;
  x.reserve(2 * field.controls().size());
  for (const Point2& c : field.controls()) {
    x.push_back(c.x);
    x.push_back(c.y);
  }
  return x;
}

}  // namespace

NonrigidResult nonrigid_refine(const BinaryMask& fixed_boundary, const BinaryMask& moving_boundary,
                               const NonrigidOptions& options, const DisplacementField* initial) {
  if (options.max_iters < 0) throw std::invalid_argument("nonrigid_refine: max_iters must be >= 0");
  if (initial && (initial->width() != fixed_boundary.width() || initial->height() != fixed_boundary.height() ||
                  initial->spacing() != options.grid_spacing)) {
    throw RegistrationFailure(RegistrationFailure::Kind::ShapeMismatch, "nonrigid: initial field grid differs");
  }
  const BoundaryObjective objective(fixed_boundary, moving_boundary, options.grid_spacing, options.lambda_bend);
  std::vector<double> start(objective.parameter_count(), 0.0);
  if (initial) start = to_params(*initial);
  return optimise(objective, std::move(start), options);
}

// ---------------------------------------------------------------------------
// Warping

namespace {

Canvas default_canvas(int w, int h) { return Canvas{w, h, 0.0, 0.0}; }

void check_field(const DisplacementField* field, const Canvas& canvas) {
  if (field && (field->width() != canvas.width || field->height() != canvas.height)) {
    throw RegistrationFailure(RegistrationFailure::Kind::ShapeMismatch, "apply_warp: field domain differs from canvas");
  }
}

template <class Sampler>
void for_each_source(const SimilarityTransform& rigid, const DisplacementField* field, const Canvas& canvas,
                     Sampler&& sampler) {
  const SimilarityTransform inv = rigid.inverse();
  const double c = inv.scale * std::cos(inv.rotation);
  const double s = inv.scale * std::sin(inv.rotation);
  for (int r = 0; r < canvas.height; ++r) {
    for (int col = 0; col < canvas.width; ++col) {
      double px = col + canvas.origin_x;
      double py = r + canvas.origin_y;
      if (field) {
        const Point2 u = field->displacement(col, r);
        px += u.x;
        py += u.y;
      }
      sampler(col, r, c * px - s * py + inv.tx, s * px + c * py + inv.ty);
    }
  }
}

}  // namespace

SectionImage apply_warp(const SectionImage& image, const SimilarityTransform& rigid, const DisplacementField* field,
                        std::optional<Canvas> canvas) {
  const Canvas cv = canvas.value_or(default_canvas(image.width(), image.height()));
  check_field(field, cv);
  SectionImage out;
  out.mpp = image.mpp;
  out.level = image.level;
  out.section_index = image.section_index;
  out.rgb = Raster<Rgb>(cv.width, cv.height, kGlassWhite);
  const int w = image.width(), h = image.height();
  constexpr double kTol = 1e-9;
  for_each_source(rigid, field, cv, [&](int col, int r, double sx, double sy) {
    if (sx < -kTol || sy < -kTol || sx > w - 1 + kTol || sy > h - 1 + kTol) return;
    sx = std::clamp(sx, 0.0, double(w - 1));
    sy = std::clamp(sy, 0.0, double(h - 1));
    const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = sx - x0, fy = sy - y0;
    const Rgb& p00 = image.rgb.at(x0, y0);
    const Rgb& p10 = image.rgb.at(x1, y0);
    const Rgb& p01 = image.rgb.at(x0, y1);
    const Rgb& p11 = image.rgb.at(x1, y1);
    auto mix = [&](std::uint8_t Rgb::*ch) {
      const double v = (1 - fy) * ((1 - fx) * (p00.*ch) + fx * (p10.*ch)) + fy * ((1 - fx) * (p01.*ch) + fx * (p11.*ch));
      return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    };
    out.rgb.at(col, r) = Rgb{mix(&Rgb::r), mix(&Rgb::g), mix(&Rgb::b)};
  });
  return out;
}

BinaryMask warp_mask(const BinaryMask& mask, const SimilarityTransform& rigid, const DisplacementField* field,
                     std::optional<Canvas> canvas) {
  const Canvas cv = canvas.value_or(default_canvas(mask.width(), mask.height()));
  check_field(field, cv);
  BinaryMask out(cv.width, cv.height, 0);
  for_each_source(rigid, field, cv, [&](int col, int r, double sx, double sy) {
    const long x = std::lround(sx), y = std::lround(sy);
    if (x < 0 || y < 0 || x >= mask.width() || y >= mask.height()) return;
    out.at(col, r) = mask.at(static_cast<int>(x), static_cast<int>(y)) ? 1 : 0;
  });
  return out;
}

Point2 map_to_canvas(Point2 section_point, const SimilarityTransform& rigid, const DisplacementField* field,
                     const Canvas& canvas) {
  const Point2 q = rigid.apply(section_point) - Point2{canvas.origin_x, canvas.origin_y};
  return field ? field->invert(q) : q;
}

// ---------------------------------------------------------------------------
// Chain

SectionFeatures extract_section_features(const SectionImage& section, const ChainOptions& options) {
  SectionFeatures out;
  const GrayImage gray = to_gray(section);
  out.ribbon = ribbon_mask(section, options.tissue, options.close_radius, options.min_ribbon_fraction);
  if (options.restrict_to_ribbon && count_set(out.ribbon) > 0) {
    const BinaryMask detect = dilate(out.ribbon, options.mask_dilation);
    out.batch = detect_and_describe(gray, options.sift, &detect);
  } else {
    out.batch = detect_and_describe(gray, options.sift, nullptr);
  }
  return out;
}

std::vector<PointPair> correspond(const SectionFeatures& moving, const SectionFeatures& fixed,
                                  const ChainOptions& options) {
  const MatchSet matches = options.matcher == MatcherKind::Sinkhorn
                               ? match_descriptors(moving.batch.descriptors, fixed.batch.descriptors, options.sinkhorn)
                               : match_ratio_test(moving.batch.descriptors, fixed.batch.descriptors, options.ratio);
  std::vector<PointPair> out;
  out.reserve(matches.pairs.size());
  for (const Match& m : matches.pairs) {
    const Keypoint& a = moving.batch.keypoints[m.left];
    const Keypoint& b = fixed.batch.keypoints[m.right];
    out.push_back({{a.x, a.y}, {b.x, b.y}});
  }
  return out;
}

RegistrationChain chain_from_correspondences(std::span<const std::vector<PointPair>> pairs,
                                             const ChainOptions& options, int level) {
  RegistrationChain chain;
  chain.rigid.push_back(SimilarityTransform::identity(level));
  chain.fields.emplace_back();
  chain.nonrigid_cost.push_back(0.0);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    PairDiagnostics diag;
    diag.moving = k + 1;
    diag.match_count = pairs[k].size();
    diag.pairwise = SimilarityTransform::identity(level);
    if (pairs[k].size() < options.min_matches) {
      diag.failed = true;
      diag.failure = "too few matches";
    } else {
      try {
        const SimilarityEstimate est = estimate_similarity(pairs[k], options.ransac);
        diag.inlier_count = est.inlier_count;
        diag.inlier_ratio = double(est.inlier_count) / double(pairs[k].size());
        diag.residual_px = est.rms_residual;
        if (est.inlier_count < options.min_matches) {
          diag.failed = true;
          diag.failure = "too few inliers";
        } else if (est.transform.scale < options.ransac.min_scale || est.transform.scale > options.ransac.max_scale) {
          diag.failed = true;
          diag.failure = "scale outside sanity gate";
        } else {
          diag.pairwise = est.transform;
          diag.pairwise.level = level;
          for (std::size_t m = 0; m < pairs[k].size(); ++m) {
            if (est.inliers[m]) diag.inliers.push_back(pairs[k][m]);
          }
        }
      } catch (const RegistrationFailure& e) {
        diag.failed = true;
        diag.failure = e.what();
      }
    }
    chain.rigid.push_back(chain.rigid.back().compose(diag.pairwise));
    chain.fields.emplace_back();
    chain.nonrigid_cost.push_back(0.0);
    chain.pairs.push_back(std::move(diag));
  }
  return chain;
}

RegistrationChain chain_register(std::span<const SectionImage> sections, const ChainOptions& options) {
  if (sections.empty()) throw std::invalid_argument("chain_register: no sections");
  std::vector<SectionFeatures> features;
  features.reserve(sections.size());
  for (const SectionImage& s : sections) features.push_back(extract_section_features(s, options));
  std::vector<std::vector<PointPair>> pairs;
  for (std::size_t i = 1; i < sections.size(); ++i) pairs.push_back(correspond(features[i], features[i - 1], options));
  return chain_from_correspondences(pairs, options, sections.front().level);
}

}  // namespace vcore
