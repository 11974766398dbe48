#include "vcore/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vcore {

namespace {

double dot(const Descriptor& a, const Descriptor& b) {
  double acc = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) acc += double(a.values[k]) * b.values[k];
  return acc;
}

double log_sum_exp(const double* begin, std::size_t n, std::size_t stride, const double* offsets) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, begin[k * stride] + offsets[k]);
  if (!std::isfinite(mx)) return mx;
  double acc = 0;
  for (std::size_t k = 0; k < n; ++k) acc += std::exp(begin[k * stride] + offsets[k] - mx);
  return mx + std::log(acc);
}

}  // namespace

CostMatrix similarity_scores(std::span<const Descriptor> left, std::span<const Descriptor> right,
                             double temperature, double dustbin_score) {
  if (!(temperature > 0)) throw std::invalid_argument("similarity_scores: temperature must be > 0");
  CostMatrix cost;
  cost.dustbin_score = dustbin_score;
  cost.scores = Matrix(left.size(), right.size());
  for (std::size_t i = 0; i < left.size(); ++i) {
    for (std::size_t j = 0; j < right.size(); ++j) cost.scores(i, j) = dot(left[i], right[j]) / temperature;
  }
  return cost;
}

TransportPlan sinkhorn_assign(const CostMatrix& cost, int iters, double eps) {
  if (iters < 1) throw std::invalid_argument("sinkhorn_assign: iters must be >= 1");
  const std::size_t m = cost.scores.rows;
  const std::size_t n = cost.scores.cols;
  const std::size_t rows = m + 1;
  const std::size_t cols = n + 1;

  Matrix z(rows, cols, cost.dustbin_score);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) z(i, j) = cost.scores(i, j);
  }
  for (double v : z.values) {
    if (!std::isfinite(v)) throw std::invalid_argument("sinkhorn_assign: non-finite score");
  }

  if (m == 0 || n == 0) {
    // Everything goes to the opposite dustbin.
    TransportPlan trivial;
    trivial.plan = Matrix(rows, cols, 0.0);
    for (std::size_t i = 0; i < m; ++i) trivial.plan(i, n) = 1.0;
    for (std::size_t j = 0; j < n; ++j) trivial.plan(m, j) = 1.0;
    trivial.converged = true;
    return trivial;
  }

  std::vector<double> log_mu(rows, 0.0), log_nu(cols, 0.0);
  std::vector<double> mu(rows, 1.0), nu(cols, 1.0);
  log_mu[m] = std::log(static_cast<double>(n));
  log_nu[n] = std::log(static_cast<double>(m));
  mu[m] = static_cast<double>(n);
  nu[n] = static_cast<double>(m);

  std::vector<double> u(rows, 0.0), v(cols, 0.0), row_lse(rows, 0.0);
  TransportPlan result;

  auto update_row_lse = [&]() {
    for (std::size_t i = 0; i < rows; ++i) row_lse[i] = log_sum_exp(&z(i, 0), cols, 1, v.data());
  };

  update_row_lse();
  for (int it = 1; it <= iters; ++it) {
    for (std::size_t i = 0; i < rows; ++i) u[i] = log_mu[i] - row_lse[i];
    for (std::size_t j = 0; j < cols; ++j) v[j] = log_nu[j] - log_sum_exp(&z(0, j), rows, cols, u.data());
    result.iterations = it;
    // Columns are exact after the v-update, so rows carry the violation.
    update_row_lse();
    double worst = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double row_sum = std::exp(u[i] + row_lse[i]);
      worst = std::max(worst, std::abs(row_sum - mu[i]));
    }
    result.max_violation = worst;
    if (worst < eps) {
      result.converged = true;
      break;
    }
  }

  result.plan = Matrix(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) result.plan(i, j) = std::exp(z(i, j) + u[i] + v[j]);
  }
  return result;
}

MatchSet extract_matches(const TransportPlan& plan, double match_thresh) {
  const std::size_t m = plan.plan.rows - 1;
  const std::size_t n = plan.plan.cols - 1;
  std::vector<std::size_t> row_best(m, n), col_best(n, m);
  for (std::size_t i = 0; i < m; ++i) {
    double best = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (plan.plan(i, j) > best) {
        best = plan.plan(i, j);
        row_best[i] = j;
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    double best = -1;
    for (std::size_t i = 0; i < m; ++i) {
      if (plan.plan(i, j) > best) {
        best = plan.plan(i, j);
        col_best[j] = i;
      }
    }
  }

  MatchSet out;
  std::vector<bool> right_used(n, false);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = row_best[i];
    if (j < n && col_best[j] == i && plan.plan(i, j) >= match_thresh) {
      out.pairs.push_back({i, j, std::clamp(plan.plan(i, j), 0.0, 1.0)});
      right_used[j] = true;
    } else {
      out.unmatched_left.push_back(i);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!right_used[j]) out.unmatched_right.push_back(j);
  }
  return out;
}

MatchSet match_descriptors(std::span<const Descriptor> left, std::span<const Descriptor> right,
                           const SinkhornOptions& options) {
  const CostMatrix cost = similarity_scores(left, right, options.temperature, options.dustbin_score);
  const TransportPlan plan = sinkhorn_assign(cost, options.iters, options.eps);
  return extract_matches(plan, options.match_thresh);
}

MatchSet match_ratio_test(std::span<const Descriptor> left, std::span<const Descriptor> right, double ratio) {
  const std::size_t m = left.size();
  const std::size_t n = right.size();
  auto dist = [](const Descriptor& a, const Descriptor& b) {
    double acc = 0;
    for (std::size_t k = 0; k < a.values.size(); ++k) {
      const double d = double(a.values[k]) - b.values[k];
      acc += d * d;
    }
    return std::sqrt(acc);
  };

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> nn_left(m, n), nn_right(n, m);
  std::vector<double> d1(m, kInf), d2(m, kInf), best_right(n, kInf);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dist(left[i], right[j]);
      if (d < d1[i]) {
        d2[i] = d1[i];
        d1[i] = d;
        nn_left[i] = j;
      } else if (d < d2[i]) {
        d2[i] = d;
      }
      if (d < best_right[j]) {
        best_right[j] = d;
        nn_right[j] = i;
      }
    }
  }

  MatchSet out;
  std::vector<bool> right_used(n, false);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = nn_left[i];
    const bool passes = j < n && nn_right[j] == i && (d2[i] == kInf || d1[i] < ratio * d2[i]);
    if (passes) {
      const double conf = d2[i] == kInf || d2[i] == 0 ? 1.0 : 1.0 - d1[i] / d2[i];
      out.pairs.push_back({i, j, std::clamp(conf, 0.0, 1.0)});
      right_used[j] = true;
    } else {
      out.unmatched_left.push_back(i);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!right_used[j]) out.unmatched_right.push_back(j);
  }
  return out;
}

}  // namespace vcore
