#include "moesim/decay_fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>

#include "moesim/core.hpp"

namespace moesim {

double DecayFit::operator()(double t) const { return a * std::exp(-b * t) + c; }

namespace {

struct Profile {
  double a = 0.0;
  double c = 0.0;
  double rss = 0.0;
};

// Optimal (a, c) for a fixed decay rate, in closed form.
Profile project(std::span<const DecayPoint> s, double b) {
  const double n = static_cast<double>(s.size());
  double phi_mean = 0.0, y_mean = 0.0;
  for (const auto& p : s) {
    phi_mean += std::exp(-b * p.step);
    y_mean += p.value;
  }
  phi_mean /= n;
  y_mean /= n;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& p : s) {
    const double dx = std::exp(-b * p.step) - phi_mean;
    sxx += dx * dx;
    sxy += dx * (p.value - y_mean);
  }
  Profile out;
  if (sxx > 1e-24 * n) {
    out.a = sxy / sxx;
    out.c = y_mean - out.a * phi_mean;
  } else {
    out.a = 0.0;
    out.c = y_mean;
  }
  for (const auto& p : s) {
    const double r = p.value - (out.a * std::exp(-b * p.step) + out.c);
    out.rss += r * r;
  }
  return out;
}

double rss_of(std::span<const DecayPoint> s, double a, double b, double c) {
  double rss = 0.0;
  for (const auto& p : s) {
    const double r = p.value - (a * std::exp(-b * p.step) + c);
    rss += r * r;
  }
  return rss;
}

// Levenberg-Marquardt polish on (a, b, c); keeps the start if nothing improves.
DecayFit polish(std::span<const DecayPoint> s, DecayFit fit) {
  double rss = rss_of(s, fit.a, fit.b, fit.c);
  double lambda = 1e-6;
  for (int iter = 0; iter < 100 && rss > 0.0; ++iter) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (const auto& p : s) {
      const double e = std::exp(-fit.b * p.step);
      const Eigen::Vector3d j(e, -fit.a * p.step * e, 1.0);
      const double r = p.value - (fit.a * e + fit.c);
      jtj += j * j.transpose();
      jtr += j * r;
    }
    bool improved = false;
    for (int tries = 0; tries < 20; ++tries) {
      Eigen::Matrix3d damped = jtj;
      damped.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::Vector3d step = damped.colPivHouseholderQr().solve(jtr);
      if (!step.allFinite()) break;
      const double a = fit.a + step[0];
      const double b = fit.b + step[1];
      const double c = fit.c + step[2];
      if (b >= 0.0) {
        const double trial = rss_of(s, a, b, c);
        if (trial < rss) {
          const double gain = rss - trial;
          fit.a = a;
          fit.b = b;
          fit.c = c;
          rss = trial;
          lambda = std::max(lambda * 0.3, 1e-12);
          improved = gain > 1e-30 * std::max(1.0, rss);
          break;
        }
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  fit.residual_norm = std::sqrt(rss);
  return fit;
}

void check_series(std::span<const DecayPoint> series) {
  if (series.size() < 3) throw ConfigError("decay fit needs at least 3 points");
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (!std::isfinite(series[i].step) || !std::isfinite(series[i].value)) {
      throw ConfigError("decay fit points must be finite");
    }
    if (i > 0 && !(series[i].step > series[i - 1].step)) {
      throw ConfigError("decay fit steps must be strictly increasing");
    }
  }
}

std::vector<double> rate_grid(std::span<const DecayPoint> s) {
  // Rates from "barely decays over the span" to "gone after one step".
  const double span = std::max(s.back().step - s.front().step, 1e-9);
  const double lo = 1e-3 / span;
  const double hi = 50.0 / std::max(1e-9, std::min(span / static_cast<double>(s.size()), 1.0));
  std::vector<double> grid{0.0};
  constexpr int kPoints = 96;
  for (int i = 0; i < kPoints; ++i) {
    grid.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (kPoints - 1)));
  }
  return grid;
}

}  // namespace

std::vector<DecayFit> fit_decay_candidates(std::span<const DecayPoint> series) {
  check_series(series);
  const auto grid = rate_grid(series);
  std::vector<double> rss(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) rss[i] = project(series, grid[i]).rss;

  std::vector<DecayFit> out;
  auto add = [&](double b) {
    const auto p = project(series, b);
    out.push_back(polish(series, DecayFit{p.a, b, p.c, std::sqrt(p.rss)}));
  };
  const auto objective = [&](double b) { return project(series, b).rss; };
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const bool left_ok = i == 0 || rss[i] <= rss[i - 1];
    const bool right_ok = i + 1 == grid.size() || rss[i] <= rss[i + 1];
    if (!(left_ok && right_ok)) continue;
    if (i == 0 || i + 1 == grid.size()) {
      add(grid[i]);
      continue;
    }
    const auto [b, value] = boost::math::tools::brent_find_minima(
        objective, grid[i - 1], grid[i + 1], std::numeric_limits<double>::digits);
    (void)value;
    add(b);
  }
  return out;
}

DecayFit fit_decay(std::span<const DecayPoint> series) {
  const auto candidates = fit_decay_candidates(series);
  return *std::min_element(candidates.begin(), candidates.end(),
                           [](const DecayFit& x, const DecayFit& y) {
                             return x.residual_norm < y.residual_norm;
                           });
}

CurveGap compare_curves(const DecayFit& primary, const DecayFit& baseline) {
  return CurveGap{primary, baseline};
}

}  // namespace moesim
