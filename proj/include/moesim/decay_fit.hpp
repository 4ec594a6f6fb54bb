#pragma once

#include <span>
#include <utility>
#include <vector>

namespace moesim {

/// f(t) = a * exp(-b t) + c
struct DecayFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double residual_norm = 0.0;  // ||y - f(t)||_2 at the returned parameters

  double operator()(double t) const;
};

struct DecayPoint {
  double step = 0.0;
  double value = 0.0;
};

/// Least-squares fit of an exponential decay.
///
/// For fixed b the model is linear in (a, c), so the residual is minimized over
/// b alone (variable projection): the residual is scanned on a grid of decay
/// rates, every grid-local minimum is refined with Brent's method, and the best
/// refined start is polished with damped Gauss-Newton on all three parameters.
/// b is constrained to be >= 0. Throws ConfigError on fewer than 3 points or
/// steps that are not strictly increasing.
DecayFit fit_decay(std::span<const DecayPoint> series);

/// Every start the multi-start search refined, in grid order. Exposed so the
/// chosen fit can be checked against the alternatives.
std::vector<DecayFit> fit_decay_candidates(std::span<const DecayPoint> series);

/// Gap between two fitted accuracy curves, P(t) - G(t).
struct CurveGap {
  DecayFit primary;
  DecayFit baseline;

  double at(double t) const { return primary(t) - baseline(t); }
  double asymptote() const { return primary.c - baseline.c; }
};

CurveGap compare_curves(const DecayFit& primary, const DecayFit& baseline);

}  // namespace moesim
