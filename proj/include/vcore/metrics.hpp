#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcore/geometry.hpp"

namespace vcore {

class NoMatches : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Registration error

struct RegistrationError {
  std::vector<double> per_image_median;  ///< um; NaN for a pair without matches
  std::vector<std::size_t> match_counts;
  double core_error = 0.0;               ///< match-count weighted mean of the medians, um
};

/// Element k holds matched positions of one adjacent pair after the final warp,
/// both in canvas pixels.
using MatchedPositions = std::vector<std::pair<Point2, Point2>>;

RegistrationError registration_error(std::span<const MatchedPositions> pairs, double mpp);

double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// Classification

struct ConfusionMatrix {
  std::vector<std::vector<std::int64_t>> counts;  ///< rows = truth, cols = predicted

  std::int64_t total() const;
  std::string to_csv() const;
};

struct ClassificationReport {
  int classes = 0;
  std::size_t samples = 0;
  std::vector<double> auc;  ///< one-vs-rest per class; NaN when undefined
  double macro_auc = 0.0;
  double weighted_auc = 0.0;
  std::vector<double> precision, recall, f1;
  std::vector<std::int64_t> support;
  double weighted_precision = 0.0;
  double weighted_recall = 0.0;
  double weighted_f1 = 0.0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<std::string> notes;
};

/// One-vs-rest ROC area by a threshold sweep over the unique scores, trapezoids
/// between operating points; tied scores move along the diagonal. Returns NaN
/// when either class is empty.
double roc_auc(std::span<const double> scores, std::span<const bool> positive);

/// `scores[n]` holds class probabilities for sample n (rows must sum to 1).
/// Predictions are the first argmax. Macro AUC averages the defined per-class
/// values; weighted metrics use class support.
ClassificationReport classification_report(const std::vector<std::vector<double>>& scores,
                                           std::span<const int> labels);

// ---------------------------------------------------------------------------
// Agreement and paired tests

/// Ratings are category indices in [0, categories).
double quadratic_kappa(std::span<const int> a, std::span<const int> b, int categories);

struct McNemarResult {
  std::int64_t b = 0;  ///< first right, second wrong
  std::int64_t c = 0;  ///< first wrong, second right
  double statistic = 0.0;  ///< continuity-corrected chi-square
  double p_value = 1.0;
  bool exact = false;
};

/// Exact two-sided binomial below 25 discordant pairs, chi-square with
/// continuity correction otherwise. b = c = 0 gives p = 1.
McNemarResult mcnemar(std::int64_t b, std::int64_t c);
McNemarResult mcnemar(std::span<const bool> first_correct, std::span<const bool> second_correct);

double mcnemar_exact_p(std::int64_t b, std::int64_t c);
double mcnemar_asymptotic_p(std::int64_t b, std::int64_t c);

void to_json(nlohmann::json& j, const RegistrationError& e);
void to_json(nlohmann::json& j, const ClassificationReport& r);
void to_json(nlohmann::json& j, const McNemarResult& r);

}  // namespace vcore
