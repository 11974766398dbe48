#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vcore/features.hpp"

namespace vcore {

/// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct CostMatrix {
  Matrix scores;               ///< M x N similarity (higher is better)
  double dustbin_score = 0.3;  ///< alpha, shared by the dustbin row and column
};

struct TransportPlan {
  Matrix plan;  ///< (M+1) x (N+1); last row and column are the dustbins
  bool converged = false;
  int iterations = 0;
  double max_violation = 0.0;  ///< largest |marginal - target| at exit
};

struct Match {
  std::size_t left = 0;
  std::size_t right = 0;
  double confidence = 0.0;
};

struct MatchSet {
  std::vector<Match> pairs;
  std::vector<std::size_t> unmatched_left;
  std::vector<std::size_t> unmatched_right;
};

struct SinkhornOptions {
  double dustbin_score = 0.3;
  double temperature = 0.1;
  double match_thresh = 0.2;
  double eps = 1e-6;
  int iters = 100;
};

/// scores[i][j] = <left_i, right_j> / temperature.
CostMatrix similarity_scores(std::span<const Descriptor> left, std::span<const Descriptor> right,
                             double temperature, double dustbin_score = 0.3);

/// Log-domain Sinkhorn on the dustbin-augmented score matrix. Real rows and
/// columns carry unit mass; the dustbin row carries N and the dustbin column M.
/// Stops once the largest marginal violation drops below `eps`; otherwise
/// returns after `iters` iterations with converged = false.
TransportPlan sinkhorn_assign(const CostMatrix& cost, int iters, double eps);

/// Mutual row/column argmax over the real block, kept when plan >= thresh.
MatchSet extract_matches(const TransportPlan& plan, double match_thresh);

/// Similarity, Sinkhorn and extraction with one set of options.
MatchSet match_descriptors(std::span<const Descriptor> left, std::span<const Descriptor> right,
                           const SinkhornOptions& options = {});

/// Baseline: mutual nearest neighbours in Euclidean descriptor distance that
/// also pass Lowe's ratio test. Confidence is 1 - d1/d2.
MatchSet match_ratio_test(std::span<const Descriptor> left, std::span<const Descriptor> right,
                          double ratio = 0.8);

}  // namespace vcore
