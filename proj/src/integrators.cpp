#include "noderen/integrators.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace noderen {

std::string to_string(Method m) {
  switch (m) {
    case Method::euler:
      return "euler";
    case Method::rk4:
      return "rk4";
    case Method::dopri5:
      return "dopri5";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "euler") return Method::euler;
  if (s == "rk4") return Method::rk4;
  if (s == "dopri5") return Method::dopri5;
  throw InputError("unknown solver '" + s + "'");
}

void SolverConfig::validate() const {
  if (!(t1 > t0) || !std::isfinite(t0) || !std::isfinite(t1)) throw InputError("solver: need t1 > t0");
  if (method != Method::dopri5 && steps < 1) throw InputError("solver: steps must be >= 1");
  if (method == Method::dopri5) {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw InputError("solver: rtol and atol must be positive");
    if (max_steps < 1) throw InputError("solver: max_steps must be >= 1");
  }
}

const Tableau& Tableau::euler() {
  static const Tableau t{1, {{}}, {1.0}, {0.0}};
  return t;
}

const Tableau& Tableau::rk4() {
  static const Tableau t{4, {{}, {0.5}, {0.0, 0.5}, {0.0, 0.0, 1.0}}, {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0},
                         {0.0, 0.5, 0.5, 1.0}};
  return t;
}

const Tableau& Tableau::of(Method m) {
  switch (m) {
    case Method::euler:
      return euler();
    case Method::rk4:
      return rk4();
    case Method::dopri5:
      break;
  }
  throw InputError("no fixed-step tableau for dopri5");
}

namespace {

void check_samples(const SolverConfig& cfg, std::span<const double> ts) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!(ts[i] >= cfg.t0 && ts[i] <= cfg.t1)) {
      throw InputError("sample time " + std::to_string(ts[i]) + " outside the integration span");
    }
    if (i > 0 && !(ts[i] > ts[i - 1])) throw InputError("sample times must be strictly ascending");
  }
}

void record(Trajectory& tr, double t, const Vec& x, const OutputFn& out) {
  tr.times.push_back(t);
  tr.states.push_back(x);
  if (out) tr.outputs.push_back(out(t, x));
}

Trajectory integrate_fixed(const Rhs& rhs, const Vec& x0, const SolverConfig& cfg,
                           std::span<const double> samples, const OutputFn& out) {
  const Tableau& tab = Tableau::of(cfg.method);
  const auto grid = fixed_step_grid(cfg, samples);
  Trajectory tr;
  std::size_t next = 0;
  Vec x = x0;
  if (next < samples.size() && samples[next] == grid.front()) record(tr, samples[next++], x, out);
  for (std::size_t k = 0; k + 1 < grid.size() && next < samples.size(); ++k) {
    const double t = grid[k];
    x = rk_step(tab, rhs, t, x, grid[k + 1] - t, nullptr, nullptr);
    tr.nfe += tab.stages;
    if (!x.allFinite()) throw NumericalError("state became non-finite", t);
    if (samples[next] == grid[k + 1]) record(tr, samples[next++], x, out);
  }
  return tr;
}

// Dormand-Prince 5(4) coefficients.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784, a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;
constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                 d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                 d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;

double rms_scaled(const Vec& v, const Vec& scale) {
  return std::sqrt((v.array() / scale.array()).square().mean());
}

Trajectory integrate_dopri5(const Rhs& rhs, const Vec& x0, const SolverConfig& cfg,
                            std::span<const double> samples, const OutputFn& out) {
  constexpr double safety = 0.9;
  constexpr double beta = 0.04;
  constexpr double expo1 = 0.2 - beta * 0.75;
  constexpr double fac_min = 0.2;  // hnew / h >= 0.2
  constexpr double fac_max = 10.0;

  Trajectory tr;
  const auto n = x0.size();
  const double span = cfg.t1 - cfg.t0;
  std::size_t next = 0;
  double t = cfg.t0;
  Vec x = x0;
  if (next < samples.size() && samples[next] == t) record(tr, samples[next++], x, out);
  if (next >= samples.size()) return tr;

  Vec k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), xs(n), x1(n), err(n), sk(n);
  rhs(t, x, k1);
  tr.nfe = 1;

  // Starting step from the scaled magnitudes of x0 and f(x0).
  sk = cfg.atol + cfg.rtol * x.array().abs();
  const double dn0 = rms_scaled(x, sk);
  const double dn1 = rms_scaled(k1, sk);
  double h = (dn0 < 1e-5 || dn1 < 1e-5) ? 1e-6 : 0.01 * dn0 / dn1;
  h = std::min(h, span);

  double facold = 1e-4;
  bool last_rejected = false;
  long attempts = 0;

  while (next < samples.size()) {
    if (attempts >= cfg.max_steps) {
      throw NumericalError("dopri5 exceeded max_steps=" + std::to_string(cfg.max_steps) +
                               " (last accepted t=" + std::to_string(t) + ")",
                           t);
    }
    ++attempts;
    bool final_step = false;
    if (t + 1.01 * h >= cfg.t1) {
      h = cfg.t1 - t;
      final_step = true;
    }
    if (!(h > std::abs(t) * 1e-15) || !(h > 0.0)) {
      throw NumericalError("dopri5 step size underflow at t=" + std::to_string(t), t);
    }

    xs = x + h * a21 * k1;
    rhs(t + c2 * h, xs, k2);
    xs = x + h * (a31 * k1 + a32 * k2);
    rhs(t + c3 * h, xs, k3);
    xs = x + h * (a41 * k1 + a42 * k2 + a43 * k3);
    rhs(t + c4 * h, xs, k4);
    xs = x + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    rhs(t + c5 * h, xs, k5);
    xs = x + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    const double t_new = final_step ? cfg.t1 : t + h;
    rhs(t_new, xs, k6);
    x1 = x + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    rhs(t_new, x1, k7);
    tr.nfe += 6;

    err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    sk = cfg.atol + cfg.rtol * x.array().abs().max(x1.array().abs());
    double en = rms_scaled(err, sk);
    if (!std::isfinite(en) || !x1.allFinite()) en = std::numeric_limits<double>::infinity();

    if (en <= 1.0) {
      ++tr.accepted;
      // Dense output coefficients on [t, t_new].
      const Vec ydiff = x1 - x;
      const Vec bspl = h * k1 - ydiff;
      const Vec r4 = ydiff - h * k7 - bspl;
      const Vec r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
      while (next < samples.size() && samples[next] <= t_new) {
        const double ts = samples[next];
        if (ts == t_new) {
          record(tr, ts, x1, out);
        } else {
          const double th = (ts - t) / h;
          const double th1 = 1.0 - th;
          const Vec xi = x + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)));
          record(tr, ts, xi, out);
        }
        ++next;
      }

      const double fac11 = std::pow(en, expo1);
      double fac = fac11 / std::pow(facold, beta);
      fac = std::clamp(fac / safety, 1.0 / fac_max, 1.0 / fac_min);
      double h_new = h / fac;
      if (last_rejected) h_new = std::min(h_new, h);
      facold = std::max(en, 1e-4);
      last_rejected = false;

      t = t_new;
      x = x1;
      k1 = k7;  // first-same-as-last
      h = std::min(h_new, span);
      if (final_step) break;
    } else {
      ++tr.rejected;
      double shrink = std::isfinite(en) ? std::min(1.0 / fac_min, std::pow(en, expo1) / safety) : 1.0 / fac_min;
      h /= shrink;
      last_rejected = true;
    }
  }
  if (next < samples.size()) throw NumericalError("dopri5 stopped before the last sample time", t);
  return tr;
}

}  // namespace

std::vector<double> fixed_step_grid(const SolverConfig& cfg, std::span<const double> sample_times) {
  std::vector<double> grid;
  grid.reserve(static_cast<std::size_t>(cfg.steps) + 1 + sample_times.size());
  const double h = (cfg.t1 - cfg.t0) / cfg.steps;
  // Uniform points within rounding distance of a sample are absorbed by the sample, so
  // no near-zero steps appear.
  const double snap = 1e-9 * h;
  std::size_t s = 0;
  for (int k = 0; k <= cfg.steps; ++k) {
    const double t = k == cfg.steps ? cfg.t1 : cfg.t0 + k * h;
    while (s < sample_times.size() && sample_times[s] < t - snap) ++s;
    if (k > 0 && k < cfg.steps && s < sample_times.size() && std::abs(sample_times[s] - t) <= snap) continue;
    grid.push_back(t);
  }
  std::vector<double> merged;
  merged.reserve(grid.size() + sample_times.size());
  std::merge(grid.begin(), grid.end(), sample_times.begin(), sample_times.end(), std::back_inserter(merged));
  merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
  return merged;
}

Vec rk_step(const Tableau& tab, const Rhs& rhs, double t, const Vec& x, double h, std::vector<Vec>* stage_states,
            std::vector<Vec>* stage_slopes) {
  std::vector<Vec> local;
  std::vector<Vec>& k = stage_slopes ? *stage_slopes : local;
  k.assign(static_cast<std::size_t>(tab.stages), Vec(x.size()));
  if (stage_states) stage_states->assign(static_cast<std::size_t>(tab.stages), Vec());
  Vec xi(x.size());
  for (int i = 0; i < tab.stages; ++i) {
    xi = x;
    for (int j = 0; j < i; ++j) {
      const double a = tab.a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (a != 0.0) xi += (h * a) * k[static_cast<std::size_t>(j)];
    }
    rhs(t + tab.c[static_cast<std::size_t>(i)] * h, xi, k[static_cast<std::size_t>(i)]);
    if (stage_states) (*stage_states)[static_cast<std::size_t>(i)] = xi;
  }
  Vec x_next = x;
  for (int i = 0; i < tab.stages; ++i) x_next += (h * tab.b[static_cast<std::size_t>(i)]) * k[static_cast<std::size_t>(i)];
  return x_next;
}

Trajectory integrate(const Rhs& rhs, const Vec& x0, const SolverConfig& cfg, std::span<const double> sample_times,
                     const OutputFn& out) {
  cfg.validate();
  check_samples(cfg, sample_times);
  if (!x0.allFinite()) throw InputError("initial state has non-finite entries");
  if (cfg.method == Method::dopri5) return integrate_dopri5(rhs, x0, cfg, sample_times, out);
  return integrate_fixed(rhs, x0, cfg, sample_times, out);
}

double order_probe(Method method, const Rhs& rhs, const Vec& x0, double t1, const Vec& exact_final,
                   std::span<const int> step_counts) {
  if (step_counts.size() < 2) throw InputError("order_probe needs at least two step counts");
  std::vector<double> lh, le;
  for (int steps : step_counts) {
    SolverConfig cfg;
    cfg.method = method;
    cfg.steps = steps;
    cfg.t0 = 0.0;
    cfg.t1 = t1;
    const double ts[] = {t1};
    const auto tr = integrate(rhs, x0, cfg, ts);
    lh.push_back(std::log(t1 / steps));
    le.push_back(std::log((tr.states.back() - exact_final).norm()));
  }
  const double k = static_cast<double>(lh.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lh.size(); ++i) {
    sx += lh[i];
    sy += le[i];
    sxx += lh[i] * lh[i];
    sxy += lh[i] * le[i];
  }
  return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  const auto n = traj.states.empty() ? 0 : traj.states.front().size();
  const auto p = traj.outputs.empty() ? 0 : traj.outputs.front().size();
  os << "t";
  for (Eigen::Index i = 0; i < n; ++i) os << ",x" << (i + 1);
  for (Eigen::Index i = 0; i < p; ++i) os << ",y" << (i + 1);
  os << "\n" << std::setprecision(17);
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    os << traj.times[k];
    for (Eigen::Index i = 0; i < n; ++i) os << "," << traj.states[k](i);
    if (!traj.outputs.empty()) {
      for (Eigen::Index i = 0; i < p; ++i) os << "," << traj.outputs[k](i);
    }
    os << "\n";
  }
}

}  // namespace noderen
