#pragma once

#include "noderen/core.hpp"

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace noderen {

enum class Method { euler, rk4, dopri5 };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct SolverConfig {
  Method method = Method::rk4;
  int steps = 100;  // fixed-step methods: uniform steps over [t0, t1]
  double rtol = 1e-6;
  double atol = 1e-6;
  int max_steps = 100000;  // dopri5 accepted + rejected attempts
  double t0 = 0.0;
  double t1 = 1.0;

  void validate() const;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<Vec> outputs;
  long nfe = 0;
  long accepted = 0;  // dopri5 only
  long rejected = 0;  // dopri5 only
};

using Rhs = std::function<void(double t, const Vec& x, Vec& dxdt)>;
using OutputFn = std::function<Vec(double t, const Vec& x)>;

/// Integrates dx/dt = rhs(t, x) from cfg.t0 and returns states (and outputs, when `out`
/// is set) at exactly `sample_times`, which must be ascending and inside [t0, t1].
///
/// Fixed-step methods insert every sample time as a step boundary. dopri5 uses its
/// 4th-order dense output between accepted steps. nfe counts rhs calls; for dopri5 it is
/// 6 * (accepted + rejected) + 1.
Trajectory integrate(const Rhs& rhs, const Vec& x0, const SolverConfig& cfg, std::span<const double> sample_times,
                     const OutputFn& out = {});

/// Butcher tableau of an explicit Runge-Kutta method.
struct Tableau {
  int stages = 0;
  std::vector<std::vector<double>> a;  // strictly lower
  std::vector<double> b;
  std::vector<double> c;

  static const Tableau& euler();
  static const Tableau& rk4();
  static const Tableau& of(Method m);
};

/// Step boundaries for a fixed-step run: the uniform grid t0 + k (t1 - t0)/steps merged
/// with the sample times.
std::vector<double> fixed_step_grid(const SolverConfig& cfg, std::span<const double> sample_times);

/// One explicit RK step. `stage_states` / `stage_slopes` receive the stage arguments and
/// derivatives when non-null (used by the gradient tape).
Vec rk_step(const Tableau& tab, const Rhs& rhs, double t, const Vec& x, double h, std::vector<Vec>* stage_states,
            std::vector<Vec>* stage_slopes);

/// Least-squares slope of log(error) against log(h) over the given fixed-step counts on
/// the problem dx/dt = rhs with known exact final state.
double order_probe(Method method, const Rhs& rhs, const Vec& x0, double t1, const Vec& exact_final,
                   std::span<const int> step_counts);

/// CSV with header t,x1..xn,y1..yp and 17 significant digits.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);

}  // namespace noderen
