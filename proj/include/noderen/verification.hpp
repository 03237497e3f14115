#pragma once

#include "noderen/core.hpp"
#include "noderen/integrators.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace noderen {

struct PdResult {
  bool positive = false;
  double lambda_min = 0.0;
};

/// Symmetrizes `m`, then reports lambda_min and whether it exceeds `tol`.
/// Throws InputError on non-finite entries.
PdResult pd_check(const Mat& m, double tol = 0.0);

/// W = 2 Lambda - Lambda D11 - D11' Lambda.
Mat multiplier_block(const ExplicitParams& e, const Certificate& cert);

/// [[-A'P - PA - 2 rate P, -C1' Lambda - P B1], [*, W]].
Mat assemble_contractivity_lmi(const ExplicitParams& e, const Certificate& cert, double rate = 0.0);

/// The (n+q+m) square dissipation LMI for the supply rate (Q, S, R), including the
/// [C2'; D21'; D22'] Q [C2'; D21'; D22']' term.
Mat assemble_iqc_lmi(const ExplicitParams& e, const Certificate& cert, const SupplyRate& sr);

/// Schur complement of the contraction LMI on its W block:
/// Phi = (-A'P - PA) - (C1' Lambda + P B1) W^{-1} (C1' Lambda + P B1)'.
Mat contraction_schur(const ExplicitParams& e, const Certificate& cert);

/// Largest c such that V(dx) = dx' P dx certifies |dx(t)| <= kappa e^{-c t} |dx(0)|:
/// c = omega / 2 with omega = lambda_min(P^{-1/2} Phi P^{-1/2}). Throws ConstructionError when
/// W is singular.
double certified_rate(const ExplicitParams& e, const Certificate& cert);

/// The cruder bound lambda_min(Phi) / (2 lambda_max(P)) <= certified_rate.
double certified_rate_conservative(const ExplicitParams& e, const Certificate& cert);

/// Piecewise-constant input on equal segments of [0, horizon].
struct InputSignal {
  std::vector<Vec> levels;
  double horizon = 1.0;

  int segments() const { return static_cast<int>(levels.size()); }
  double segment_length() const { return horizon / static_cast<double>(levels.size()); }
  const Vec& at_segment(int k) const { return levels[static_cast<std::size_t>(k)]; }
};

InputSignal random_input(int m, int segments, double horizon, double amplitude, std::mt19937_64& rng);
InputSignal constant_input(const Vec& u, int segments, double horizon);

struct PairSpec {
  Vec a, b;
  InputSignal u1, u2;
  int samples_per_segment = 5;
  double rtol = 1e-9;
  double atol = 1e-9;
};

/// Two runs of the same model sampled on a common grid (segment boundaries included).
struct TrajectoryPair {
  std::vector<double> times;
  std::vector<Vec> x1, x2, y1, y2, u1, u2;
  std::vector<double> supply_integral;  // int_0^t s(du, dy)
  std::vector<double> dy_sq_integral;   // int_0^t |dy|^2
  std::vector<double> du_sq_integral;   // int_0^t |du|^2
  long nfe = 0;

  Vec dx(std::size_t k) const { return x1[k] - x2[k]; }
  Vec dy(std::size_t k) const { return y1[k] - y2[k]; }
  Vec du(std::size_t k) const { return u1[k] - u2[k]; }
};

/// Simulates both trajectories jointly with dopri5, restarting at every input breakpoint.
/// When `sr` is non-null the running supply integral (and the |dy|^2, |du|^2 integrals) are
/// carried as extra states.
TrajectoryPair simulate_pair(const ExplicitParams& e, const Activation& act, const PairSpec& spec,
                             const SupplyRate* sr = nullptr);

struct ContractionReport {
  double kappa_fit = 0.0;
  double rate_fit = 0.0;
  double certified_rate = 0.0;
  bool monotone_V = true;
  double worst_V_increase = 0.0;  // max_k (V_{k+1} - V_k) / V_0
};

/// Equal-input pair: checks V(dx) is nonincreasing across samples (relative slack
/// `slack` of V at t=0) and fits log|dx(t)| ~ log(kappa |a-b|) - c t by least squares.
ContractionReport empirical_contraction(const ExplicitParams& e, const Activation& act, const Certificate& cert,
                                        const PairSpec& spec, double slack = 1e-9);

struct DissipationReport {
  double max_slack = 0.0;  // max over sample pairs of V(t1) - V(t0) - int_{t0}^{t1} s dt
  double scale = 0.0;      // max V + max |int s|
  double dy_l2 = 0.0;      // ||dy||_{L2}
  double du_l2 = 0.0;      // ||du||_{L2}

  bool holds(double tol = 1e-7) const { return max_slack <= tol * (1.0 + scale); }
};

DissipationReport empirical_dissipation(const ExplicitParams& e, const Activation& act, const Certificate& cert,
                                        const SupplyRate& sr, const PairSpec& spec);

}  // namespace noderen
