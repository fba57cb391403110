#pragma once

// Evaluation statistics: shadow score, ROI regression, Bland-Altman
// agreement and the Wilcoxon signed-rank test.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

/// Population variance of chi over the gray-matter mask, ppm^2.
inline double shadow_score(const ScalarVolume& chi, const MaskVolume& gray) {
  require_same_grid(chi.grid(), gray.grid(), "shadow_score");
  if (gray.empty()) throw InvalidArgument("shadow_score: empty mask");
  const double mean = masked_mean(chi, gray);
  double s = 0.0;
  for (std::size_t n = 0; n < chi.size(); ++n)
    if (gray[n]) s += (chi[n] - mean) * (chi[n] - mean);
  return s / static_cast<double>(gray.count());
}

struct Regression {
  double slope = 0.0, intercept = 0.0, r = 0.0;
  std::size_t n = 0;
};

/// OLS of y on x with Pearson r.
inline Regression linear_regression(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidArgument("regression: length mismatch");
  if (x.size() < 2) throw InvalidArgument("regression: need at least two points");
  const double k = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / k;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / k;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw InvalidArgument("regression: degenerate predictor (all values equal)");
  Regression r;
  r.n = x.size();
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  r.r = syy == 0.0 ? 0.0 : sxy / std::sqrt(sxx * syy);
  return r;
}

/// Regress ROI means of chi_a on ROI means of chi_b.
inline Regression roi_regression(const ScalarVolume& chi_a, const ScalarVolume& chi_b,
                                 const std::vector<MaskVolume>& rois) {
  require_same_grid(chi_a.grid(), chi_b.grid(), "roi_regression");
  if (rois.size() < 3) throw InvalidArgument("roi_regression: at least 3 ROIs required");
  std::vector<double> a, b;
  for (const auto& roi : rois) {
    require_same_grid(chi_a.grid(), roi.grid(), "roi_regression");
    if (roi.empty()) throw InvalidArgument("roi_regression: empty ROI");
    a.push_back(masked_mean(chi_a, roi));
    b.push_back(masked_mean(chi_b, roi));
  }
  return linear_regression(b, a);
}

struct BlandAltman {
  double bias = 0.0, loa_low = 0.0, loa_high = 0.0;
};

inline BlandAltman bland_altman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidArgument("bland_altman: length mismatch");
  if (a.size() < 2) throw InvalidArgument("bland_altman: need at least two pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, mean - 1.96 * sd, mean + 1.96 * sd};
}

struct WilcoxonResult {
  double statistic = 0.0;  // W+, sum of ranks of positive differences
  double p = 1.0;          // two-sided
  std::size_t n = 0;       // nonzero pairs used
  bool exact = false;
};

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped and
/// ties get average ranks. Exact null distribution for n <= 25, normal
/// approximation with tie correction otherwise.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidArgument("wilcoxon: length mismatch");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  if (d.empty()) throw InvalidArgument("wilcoxon: all differences zero");
  if (d.size() < 5) throw InvalidArgument("wilcoxon: need at least 5 non-zero differences");
  const std::size_t n = d.size();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> rank(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  WilcoxonResult res;
  res.n = n;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) res.statistic += rank[i];

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  if (n <= 25) {
    // Distribution of the doubled statistic over all 2^n sign patterns, with
    // the observed (possibly tied) ranks.
    std::vector<long> r2(n);
    long total = 0;
    for (std::size_t i = 0; i < n; ++i) total += r2[i] = std::lround(2.0 * rank[i]);
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    for (long r : r2)
      for (long s = total; s >= r; --s) count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - r)];
    // the doubled statistic is centred on total / 2
    const long obs = std::lround(2.0 * res.statistic);
    const long dev = std::abs(2 * obs - total);
    double tail = 0.0;
    for (long s = 0; s <= total; ++s)
      if (std::abs(2 * s - total) >= dev) tail += count[static_cast<std::size_t>(s)];
    res.p = std::min(1.0, tail / std::ldexp(1.0, static_cast<int>(n)));
    res.exact = true;
  } else {
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double z = (res.statistic - mean) / std::sqrt(var);
    res.p = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  }
  return res;
}

}  // namespace qsm
