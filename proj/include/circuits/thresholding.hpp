#pragma once

// Tail thresholds: peaks-over-threshold with a generalized Pareto fit, plus
// percentile, IQR and mean rules.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuits/tensor.hpp"

namespace circuits {

enum class ThresholdMethod { pot, percentile, iqr };

inline std::string threshold_method_name(ThresholdMethod m) {
  switch (m) {
    case ThresholdMethod::pot: return "pot-gpd";
    case ThresholdMethod::percentile: return "percentile";
    case ThresholdMethod::iqr: return "iqr";
  }
  return "?";
}

struct PotConfig {
  double q0 = 0.95;    // initial quantile u
  double risk = 1e-2;  // tail probability q
  std::size_t min_exceedances = 8;
  ThresholdMethod method = ThresholdMethod::pot;
};

struct GpdFit {
  double sigma = 0.0;
  double xi = 0.0;
  double u = 0.0;
  std::size_t n_exceed = 0;
  double log_likelihood = 0.0;
};

/// Outcome of one threshold estimate; kept for run reports.
struct ThresholdDecision {
  double tau = 0.0;
  double u = 0.0;
  bool fallback = false;
  std::optional<GpdFit> fit;
  std::string note;
};

/// Linear-interpolation empirical quantile (the common "type 7" definition).
inline double empirical_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw Error("quantile of empty list");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace detail {

constexpr double kXiMin = -0.5;
constexpr double kXiMax = 1.0;
constexpr double kXiZero = 1e-9;

inline double gpd_loglik(std::span<const double> x, double xi, double sigma) {
  const double n = static_cast<double>(x.size());
  if (!(sigma > 0.0)) return -std::numeric_limits<double>::infinity();
  if (std::abs(xi) < kXiZero) {
    double s = 0.0;
    for (double v : x) s += v;
    return -n * std::log(sigma) - s / sigma;
  }
  double s = 0.0;
  for (double v : x) {
    const double z = 1.0 + xi * v / sigma;
    if (!(z > 0.0)) return -std::numeric_limits<double>::infinity();
    s += std::log(z);
  }
  return -n * std::log(sigma) - (1.0 + 1.0 / xi) * s;
}

/// Maximum-likelihood scale for a fixed shape. For xi > -1 the score in
/// sigma has a single sign change, so bisection on log(sigma) finds it.
inline double gpd_sigma_for_xi(std::span<const double> x, double xi, double xmax, double mean) {
  if (std::abs(xi) < kXiZero) return mean;
  const double n = static_cast<double>(x.size());
  auto score = [&](double log_sigma) {
    const double sigma = std::exp(log_sigma);
    double h = 0.0;
    for (double v : x) {
      const double y = xi * v / sigma;
      h += y / (1.0 + y);
    }
    return -n + (1.0 + 1.0 / xi) * h;
  };
  double lo = xi < 0.0 ? std::log(-xi * xmax) + 1e-12 : std::log(mean * std::min(1.0, xi) * 1e-3);
  double hi = std::log(xmax * 20.0);
  for (int i = 0; i < 60 && score(lo) <= 0.0; ++i) lo = xi < 0.0 ? (lo + std::log(-xi * xmax)) / 2 : lo - 5.0;
  for (int i = 0; i < 60 && score(hi) >= 0.0; ++i) hi += 5.0;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    (score(mid) > 0.0 ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace detail

/// Generalized Pareto maximum-likelihood fit to positive exceedances. Profile
/// over the shape on [-0.5, 1]: a 0.01 grid, then golden-section refinement
/// around the best grid point.
inline GpdFit fit_gpd(std::span<const double> exceedances, std::size_t min_exceedances = 8) {
  if (exceedances.size() < std::max<std::size_t>(min_exceedances, 2))
    throw Error("insufficient tail data");
  double xmax = 0.0, xmin = std::numeric_limits<double>::infinity(), sum = 0.0;
  for (double v : exceedances) {
    if (!(v > 0.0) || !std::isfinite(v)) throw Error("exceedances must be positive and finite");
    xmax = std::max(xmax, v);
    xmin = std::min(xmin, v);
    sum += v;
  }
  if (xmax - xmin <= 1e-12 * xmax) throw Error("insufficient tail variation");
  const double mean = sum / static_cast<double>(exceedances.size());

  auto profile = [&](double xi) {
    const double sigma = detail::gpd_sigma_for_xi(exceedances, xi, xmax, mean);
    return std::pair{detail::gpd_loglik(exceedances, xi, sigma), sigma};
  };

  double best_xi = 0.0;
  auto [best_ll, best_sigma] = profile(0.0);
  for (int i = 0; i <= 150; ++i) {
    const double xi = detail::kXiMin + 0.01 * i;
    auto [ll, sigma] = profile(xi);
    if (ll > best_ll) best_xi = xi, best_ll = ll, best_sigma = sigma;
  }

  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = std::max(detail::kXiMin, best_xi - 0.01), b = std::min(detail::kXiMax, best_xi + 0.01);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = profile(c).first, fd = profile(d).first;
  for (int i = 0; i < 40; ++i) {
    if (fc > fd) {
      b = d, d = c, fd = fc;
      c = b - phi * (b - a);
      fc = profile(c).first;
    } else {
      a = c, c = d, fc = fd;
      d = a + phi * (b - a);
      fd = profile(d).first;
    }
  }
  const double refined = 0.5 * (a + b);
  if (auto [ll, sigma] = profile(refined); ll > best_ll)
    best_xi = refined, best_ll = ll, best_sigma = sigma;

  return {best_sigma, best_xi, 0.0, exceedances.size(), best_ll};
}

/// Tail quantile at risk `q` implied by a GPD fit over threshold u, with n
/// total observations.
inline double gpd_tail_quantile(const GpdFit& fit, double q, std::size_t n) {
  const double ratio = q * static_cast<double>(n) / static_cast<double>(fit.n_exceed);
  if (std::abs(fit.xi) < detail::kXiZero) return fit.u - fit.sigma * std::log(ratio);
  return fit.u + (fit.sigma / fit.xi) * (std::pow(ratio, -fit.xi) - 1.0);
}

inline ThresholdDecision iqr_threshold(std::span<const double> scores) {
  std::vector<double> v(scores.begin(), scores.end());
  const double q1 = empirical_quantile(v, 0.25), q3 = empirical_quantile(v, 0.75);
  ThresholdDecision d;
  d.u = q3;
  d.tau = q3 + 1.5 * (q3 - q1);
  d.note = "q3 + 1.5 iqr";
  return d;
}

/// Peaks-over-threshold cut. Falls back to u itself when the tail is too
/// thin or degenerate to fit; never returns less than u.
inline ThresholdDecision pot_threshold(std::span<const double> scores, const PotConfig& cfg = {}) {
  if (scores.empty()) throw Error("threshold of empty score list");
  if (cfg.method == ThresholdMethod::iqr) return iqr_threshold(scores);

  ThresholdDecision d;
  d.u = empirical_quantile(std::vector<double>(scores.begin(), scores.end()), cfg.q0);
  d.tau = d.u;
  if (cfg.method == ThresholdMethod::percentile) {
    d.note = "percentile";
    return d;
  }
  std::vector<double> exceed;
  for (double s : scores)
    if (s > d.u) exceed.push_back(s - d.u);
  try {
    GpdFit fit = fit_gpd(exceed, cfg.min_exceedances);
    fit.u = d.u;
    const double tau = gpd_tail_quantile(fit, cfg.risk, scores.size());
    d.fit = fit;
    if (std::isfinite(tau)) {
      d.tau = std::max(tau, d.u);
      d.note = tau < d.u ? "gpd quantile below u; clamped" : "gpd";
    } else {
      d.fallback = true;
      d.note = "non-finite gpd quantile";
    }
  } catch (const Error& e) {
    d.fallback = true;
    d.note = e.what();
  }
  return d;
}

/// Arithmetic mean of the flow scores over all candidate targets.
inline double mean_threshold(std::span<const double> flow_scores) {
  if (flow_scores.empty()) throw Error("threshold of empty score list");
  return std::accumulate(flow_scores.begin(), flow_scores.end(), 0.0) /
         static_cast<double>(flow_scores.size());
}

}  // namespace circuits
