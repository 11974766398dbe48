#include "vcore/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

namespace vcore {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + n / 2, v.end());
  const double hi = v[n / 2];
  if (n % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + n / 2));
}

RegistrationError registration_error(std::span<const MatchedPositions> pairs, double mpp) {
  if (!(mpp > 0)) throw std::invalid_argument("registration_error: mpp must be > 0");
  RegistrationError out;
  double num = 0;
  std::size_t den = 0;
  for (const MatchedPositions& pair : pairs) {
    std::vector<double> d;
    d.reserve(pair.size());
    for (const auto& [a, b] : pair) d.push_back(distance(a, b) * mpp);
    const double m = median(d);
    out.per_image_median.push_back(m);
    out.match_counts.push_back(pair.size());
    if (!pair.empty()) {
      num += m * double(pair.size());
      den += pair.size();
    }
  }
  if (den == 0) throw NoMatches("registration_error: no pair has any match");
  out.core_error = num / double(den);
  return out;
}

// ---------------------------------------------------------------------------

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

std::string ConfusionMatrix::to_csv() const {
  std::ostringstream s;
  s << "truth\\predicted";
  for (std::size_t c = 0; c < counts.size(); ++c) s << ',' << c;
  s << '\n';
  for (std::size_t r = 0; r < counts.size(); ++r) {
    s << r;
    for (std::int64_t v : counts[r]) s << ',' << v;
    s << '\n';
  }
  return s.str();
}

double roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("roc_auc: length mismatch");
  std::int64_t P = 0, N = 0;
  for (bool p : positive) (p ? P : N) += 1;
  if (P == 0 || N == 0) return kNaN;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  // Twice the area in units of one positive x one negative, kept integral.
  std::int64_t twice_area = 0, tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::int64_t dtp = 0, dfp = 0;
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (positive[order[i]] ? dtp : dfp) += 1;
    twice_area += dfp * (2 * tp + dtp);
    tp += dtp;
  }
  return double(twice_area) / double(2 * P * N);
}

ClassificationReport classification_report(const std::vector<std::vector<double>>& scores,
                                           std::span<const int> labels) {
  if (scores.empty()) throw std::invalid_argument("classification_report: no samples");
  if (scores.size() != labels.size()) throw std::invalid_argument("classification_report: length mismatch");
  const int C = static_cast<int>(scores[0].size());
  if (C < 2) throw std::invalid_argument("classification_report: need at least two classes");
  for (const auto& row : scores) {
    if (static_cast<int>(row.size()) != C) throw std::invalid_argument("classification_report: ragged scores");
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("classification_report: score rows must sum to 1");
  }
  for (int l : labels)
    if (l < 0 || l >= C) throw std::invalid_argument("classification_report: label out of range");

  const std::size_t n = scores.size();
  ClassificationReport r;
  r.classes = C;
  r.samples = n;
  r.confusion.counts.assign(C, std::vector<std::int64_t>(C, 0));
  for (std::size_t k = 0; k < n; ++k) {
    const int pred = static_cast<int>(std::max_element(scores[k].begin(), scores[k].end()) - scores[k].begin());
    ++r.confusion.counts[labels[k]][pred];
  }

  r.support.assign(C, 0);
  std::int64_t correct = 0;
  for (int c = 0; c < C; ++c) {
    r.support[c] = std::accumulate(r.confusion.counts[c].begin(), r.confusion.counts[c].end(), std::int64_t{0});
    correct += r.confusion.counts[c][c];
  }
  r.accuracy = double(correct) / double(n);

  double auc_sum = 0, auc_w = 0;
  std::int64_t auc_support = 0;
  int auc_defined = 0;
  std::vector<double> column(n);
  const std::unique_ptr<bool[]> pos(new bool[n]);
  for (int c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < n; ++k) {
      column[k] = scores[k][c];
      pos[k] = labels[k] == c;
    }
    const double auc = roc_auc(column, std::span<const bool>(pos.get(), n));
    r.auc.push_back(auc);
    if (std::isnan(auc)) {
      r.notes.push_back("auc undefined for class " + std::to_string(c) +
                        (r.support[c] == 0 ? ": no positive samples" : ": no negative samples"));
    } else {
      auc_sum += auc;
      auc_w += auc * double(r.support[c]);
      auc_support += r.support[c];
      ++auc_defined;
    }

    std::int64_t predicted = 0;
    for (int t = 0; t < C; ++t) predicted += r.confusion.counts[t][c];
    const double tp = double(r.confusion.counts[c][c]);
    const double prec = predicted ? tp / double(predicted) : 0.0;
    const double rec = r.support[c] ? tp / double(r.support[c]) : 0.0;
    if (!predicted && r.support[c]) r.notes.push_back("class " + std::to_string(c) + " never predicted: precision set to 0");
    r.precision.push_back(prec);
    r.recall.push_back(rec);
    r.f1.push_back(prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0);
  }
  r.macro_auc = auc_defined ? auc_sum / auc_defined : kNaN;
  r.weighted_auc = auc_support ? auc_w / double(auc_support) : kNaN;
  for (int c = 0; c < C; ++c) {
    const double w = double(r.support[c]) / double(n);
    r.weighted_precision += w * r.precision[c];
    r.weighted_recall += w * r.recall[c];
    r.weighted_f1 += w * r.f1[c];
  }
  return r;
}

// ---------------------------------------------------------------------------

double quadratic_kappa(std::span<const int> a, std::span<const int> b, int categories) {
  if (a.empty()) throw std::invalid_argument("quadratic_kappa: empty input");
  if (a.size() != b.size()) throw std::invalid_argument("quadratic_kappa: length mismatch");
  if (categories < 2) throw std::invalid_argument("quadratic_kappa: need at least two categories");
  const int C = categories;
  // With integer weights (i - j)^2 the (C - 1)^2 scale cancels and the
  // expected matrix is ra * rb / n, so kappa = 1 - n * sum(w O) / sum(w ra rb).
  std::vector<std::int64_t> ra(C, 0), rb(C, 0);
  std::int64_t observed = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k] < 0 || a[k] >= C || b[k] < 0 || b[k] >= C) throw std::invalid_argument("quadratic_kappa: rating out of range");
    ++ra[a[k]];
    ++rb[b[k]];
    observed += std::int64_t(a[k] - b[k]) * (a[k] - b[k]);
  }
  std::int64_t expected = 0;
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j) expected += std::int64_t(i - j) * (i - j) * ra[i] * rb[j];
  // No expected disagreement means both raters used one and the same category.
  if (expected == 0) return 1.0;
  return 1.0 - double(observed * std::int64_t(a.size())) / double(expected);
}

double mcnemar_exact_p(std::int64_t b, std::int64_t c) {
  if (b < 0 || c < 0) throw std::invalid_argument("mcnemar: negative count");
  const std::int64_t n = b + c;
  if (n == 0) return 1.0;
  const std::int64_t k = std::min(b, c);
  if (n <= 60) {
    // Exact binomial coefficients; the tail sum is exact while below 2^53.
    std::uint64_t coef = 1, sum = 0;
    for (std::int64_t i = 0; i <= k; ++i) {
      sum += coef;
      coef = coef * std::uint64_t(n - i) / std::uint64_t(i + 1);
    }
    return std::min(1.0, 2.0 * std::ldexp(double(sum), -static_cast<int>(n)));
  }
  double tail = 0;
  for (std::int64_t i = 0; i <= k; ++i) {
    tail += std::exp(std::lgamma(double(n) + 1) - std::lgamma(double(i) + 1) - std::lgamma(double(n - i) + 1) -
                     double(n) * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

double mcnemar_asymptotic_p(std::int64_t b, std::int64_t c) {
  if (b < 0 || c < 0) throw std::invalid_argument("mcnemar: negative count");
  if (b + c == 0) return 1.0;
  const double d = std::max(0.0, std::abs(double(b - c)) - 1.0);
  const double chi2 = d * d / double(b + c);
  return std::erfc(std::sqrt(chi2 / 2.0));
}

McNemarResult mcnemar(std::int64_t b, std::int64_t c) {
  if (b < 0 || c < 0) throw std::invalid_argument("mcnemar: negative count");
  McNemarResult r;
  r.b = b;
  r.c = c;
  if (b + c > 0) {
    const double d = std::max(0.0, std::abs(double(b - c)) - 1.0);
    r.statistic = d * d / double(b + c);
  }
  r.exact = b + c < 25;
  r.p_value = r.exact ? mcnemar_exact_p(b, c) : mcnemar_asymptotic_p(b, c);
  return r;
}

McNemarResult mcnemar(std::span<const bool> first, std::span<const bool> second) {
  if (first.size() != second.size()) throw std::invalid_argument("mcnemar: length mismatch");
  std::int64_t b = 0, c = 0;
  for (std::size_t k = 0; k < first.size(); ++k) {
    b += first[k] && !second[k];
    c += !first[k] && second[k];
  }
  return mcnemar(b, c);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const RegistrationError& e) {
  j = {{"core_error_um", e.core_error}, {"per_image_median_um", e.per_image_median}, {"match_counts", e.match_counts}};
}

void to_json(nlohmann::json& j, const ClassificationReport& r) {
  j = {{"classes", r.classes},
       {"samples", r.samples},
       {"auc", r.auc},
       {"macro_auc", r.macro_auc},
       {"weighted_auc", r.weighted_auc},
       {"precision", r.precision},
       {"recall", r.recall},
       {"f1", r.f1},
       {"support", r.support},
       {"weighted_precision", r.weighted_precision},
       {"weighted_recall", r.weighted_recall},
       {"weighted_f1", r.weighted_f1},
       {"accuracy", r.accuracy},
       {"confusion", r.confusion.counts},
       {"notes", r.notes}};
}

void to_json(nlohmann::json& j, const McNemarResult& r) {
  j = {{"b", r.b}, {"c", r.c}, {"statistic", r.statistic}, {"p_value", r.p_value}, {"exact", r.exact}};
}

}  // namespace vcore
