#include "noderen/sysid.hpp"

#include "noderen/dynamics.hpp"
#include "noderen/verification.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

namespace noderen {

namespace {

// Second stream for sample times and noise, so initial conditions depend on the seed only.
constexpr std::uint64_t kSampleStream = 0x9e3779b97f4a7c15ULL;

}  // namespace

void PendulumConfig::validate() const {
  if (!(length > 0.0) || !std::isfinite(length)) throw InputError("pendulum: length must be positive");
  if (!(damping > 0.0) || !std::isfinite(damping)) throw InputError("pendulum: damping must be positive");
  if (!std::isfinite(gravity)) throw InputError("pendulum: gravity must be finite");
}

Vec pendulum_rhs(const PendulumConfig& cfg, const Vec& state) {
  Vec d(2);
  d(0) = state(1);
  d(1) = -(cfg.damping / cfg.length) * state(1) - (cfg.gravity / cfg.length) * std::sin(state(0));
  return d;
}

double pendulum_energy(const PendulumConfig& cfg, const Vec& state) {
  return 0.5 * cfg.length * state(1) * state(1) + cfg.gravity * (1.0 - std::cos(state(0)));
}

Trajectory simulate_pendulum(const PendulumConfig& cfg, const Vec& init, double t_end, std::span<const double> times,
                             double tol) {
  if (init.size() != 2) throw InputError("pendulum: initial state must have two entries");
  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.rtol = tol;
  sc.atol = tol;
  sc.t0 = 0.0;
  sc.t1 = t_end;
  const Rhs rhs = [&](double, const Vec& x, Vec& dx) { dx = pendulum_rhs(cfg, x); };
  return integrate(rhs, init, sc, times);
}

std::string to_string(Sampling s) { return s == Sampling::irregular ? "irregular" : "uniform"; }

Sampling sampling_from_string(const std::string& s) {
  if (s == "irregular") return Sampling::irregular;
  if (s == "uniform") return Sampling::uniform;
  throw InputError("unknown sampling '" + s + "' (expected irregular or uniform)");
}

std::size_t Dataset::total_samples() const {
  std::size_t n = 0;
  for (const auto& e : experiments) n += e.times.size();
  return n;
}

std::vector<Vec> draw_initial_conditions(int n_exp, std::uint64_t seed) {
  if (n_exp < 1) throw InputError("need at least one experiment");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-std::numbers::pi / 2.0, std::numbers::pi / 2.0);
  std::uniform_real_distribution<double> rate(-1.0, 1.0);
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(n_exp));
  for (int i = 0; i < n_exp; ++i) {
    Vec v(2);
    v(0) = angle(rng);
    v(1) = rate(rng);
    out.push_back(v);
  }
  return out;
}

Dataset generate_dataset(const PendulumConfig& plant, const GenerateOptions& opt) {
  return generate_dataset(plant, opt, draw_initial_conditions(opt.n_exp, opt.seed));
}

Dataset generate_dataset(const PendulumConfig& plant, const GenerateOptions& opt, const std::vector<Vec>& inits) {
  plant.validate();
  if (opt.n_exp < 1) throw InputError("need at least one experiment");
  if (static_cast<int>(inits.size()) != opt.n_exp) throw InputError("initial condition count does not match n_exp");
  if (!(opt.t_end > 0.0) || !std::isfinite(opt.t_end)) throw InputError("t_end must be positive");
  if (!(opt.noise_std >= 0.0)) throw InputError("noise_std must be nonnegative");
  if (opt.min_samples < 1 || opt.max_samples < opt.min_samples) throw InputError("invalid samples-per-experiment range");

  Dataset ds;
  ds.plant = plant;
  ds.t_end = opt.t_end;
  ds.noise_std = opt.noise_std;
  ds.sampling = opt.sampling;
  ds.seed = opt.seed;

  std::mt19937_64 rng(opt.seed ^ kSampleStream);
  std::uniform_int_distribution<int> count(opt.min_samples, opt.max_samples);
  std::uniform_real_distribution<double> when(0.0, opt.t_end);
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int i = 0; i < opt.n_exp; ++i) {
    Experiment ex;
    ex.init = inits[static_cast<std::size_t>(i)];
    if (opt.sampling == Sampling::irregular) {
      const int ni = count(rng);
      while (static_cast<int>(ex.times.size()) < ni) {
        const double t = when(rng);
        if (t <= 0.0) continue;
        ex.times.push_back(t);
        std::sort(ex.times.begin(), ex.times.end());
        ex.times.erase(std::unique(ex.times.begin(), ex.times.end()), ex.times.end());
      }
    } else {
      const int ni = opt.max_samples;
      for (int j = 1; j <= ni; ++j) ex.times.push_back(j == ni ? opt.t_end : opt.t_end * j / ni);
    }
    const Trajectory tr = simulate_pendulum(plant, ex.init, opt.t_end, ex.times);
    ex.z.reserve(ex.times.size());
    for (const auto& s : tr.states) {
      Vec z = s;
      for (Eigen::Index c = 0; c < z.size(); ++c) z(c) += opt.noise_std * noise(rng);
      ex.z.push_back(z);
    }
    ds.experiments.push_back(std::move(ex));
  }
  return ds;
}

Vec augment_initial_state(const Vec& observed, int n) {
  if (observed.size() > n) throw InputError("initial condition longer than the state dimension");
  Vec x = Vec::Zero(n);
  x.head(observed.size()) = observed;
  return x;
}

std::vector<Sequence> to_sequences(const Dataset& data, const Dims& dims) {
  if (dims.p != 2) throw InputError("pendulum models need p = 2 outputs");
  if (dims.n < 2) throw InputError("pendulum models need n >= 2 states");
  std::vector<Sequence> out;
  out.reserve(data.experiments.size());
  for (const auto& ex : data.experiments) {
    Sequence s;
    s.x0 = augment_initial_state(ex.init, dims.n);
    s.u = Vec::Zero(dims.m);
    s.times = ex.times;
    s.targets = ex.z;
    out.push_back(std::move(s));
  }
  return out;
}

double certificate_margin(const Model& model) {
  if (model.mode == Mode::general) return std::numeric_limits<double>::quiet_NaN();
  Realization real;
  try {
    real = model.realize();
  } catch (const ConstructionError&) {
    return -std::numeric_limits<double>::infinity();
  }
  const Mat lmi = model.mode == Mode::iqc ? assemble_iqc_lmi(real.params, real.cert, *model.supply)
                                          : assemble_contractivity_lmi(real.params, real.cert, model.hyper.min_rate);
  if (!lmi.allFinite()) return -std::numeric_limits<double>::infinity();
  return min_eig_sym(lmi);
}

TrainResult train_sysid(const Dataset& train, const TrainOptions& opt) {
  std::optional<SupplyRate> sr;
  if (opt.mode == Mode::iqc) {
    if (!opt.property) throw InputError("iqc mode requires an incremental property");
    sr = supply_rate_for(*opt.property, opt.dims.m, opt.dims.p);
  }
  if (opt.epochs < 0) throw InputError("epochs must be nonnegative");
  const auto data = to_sequences(train, opt.dims);
  SolverConfig solver = opt.solver;
  solver.t0 = 0.0;
  solver.t1 = train.t_end;
  solver.validate();

  TrainResult res;
  res.model = init_model(opt.mode, opt.dims, opt.act, opt.hyper, sr, opt.seed);
  res.initial = res.model;
  const ParamLayout layout = res.model.layout();
  const ParamBlock bias = bias_block(layout);

  AdamConfig adam = opt.adam;
  AdamState state = AdamState::zeros(res.model.theta.size());
  // Last accepted step, replayed with a smaller lr when the next epoch blows up.
  Vec prev_theta;
  AdamState prev_state;
  Vec prev_grad;

  const bool certify = opt.mode != Mode::general && opt.verify_each_epoch;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto t_start = std::chrono::steady_clock::now();
    LossReport rep;
    try {
      rep = grad_reverse(res.model, data, solver);
      if (!std::isfinite(rep.value) || !rep.grad.allFinite()) throw NumericalError("non-finite loss or gradient", 0.0);
    } catch (const NumericalError&) {
      if (opt.mode != Mode::general || prev_theta.size() == 0 || res.retries >= opt.max_retries) {
        if (opt.mode != Mode::general) throw;
        res.diverged = true;
        if (prev_theta.size() != 0) res.model.theta = prev_theta;
        break;
      }
      ++res.retries;
      adam.lr *= 0.5;
      res.model.theta = prev_theta;
      state = prev_state;
      adam_step(res.model.theta, state, prev_grad, adam);
      --epoch;
      continue;
    }
    if (opt.freeze_bias) rep.grad.segment(bias.offset, bias.size()).setZero();

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = rep.value;
    em.grad_norm = rep.grad.norm();
    em.lmi_lambda_min = std::numeric_limits<double>::quiet_NaN();
    if (certify) {
      em.lmi_lambda_min = certificate_margin(res.model);
      if (!(em.lmi_lambda_min > 0.0)) res.certified_throughout = false;
    }

    prev_theta = res.model.theta;
    prev_state = state;
    prev_grad = rep.grad;
    adam_step(res.model.theta, state, rep.grad, adam);

    em.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
    res.metrics.push_back(em);
  }

  if (certify && !(certificate_margin(res.model) > 0.0)) res.certified_throughout = false;
  try {
    res.final_train_loss = mse_loss(res.model, data, solver).value;
  } catch (const NumericalError&) {
    res.final_train_loss = std::numeric_limits<double>::infinity();
    if (opt.mode == Mode::general) res.diverged = true;
  }
  return res;
}

LossReport evaluate(const ExplicitParams& e, const Activation& act, const Dataset& test, SolverConfig solver) {
  const auto data = to_sequences(test, e.dims());
  solver.t0 = 0.0;
  solver.t1 = test.t_end;
  return mse_loss(e, act, data, solver);
}

LossReport evaluate(const Model& model, const Dataset& test, SolverConfig solver) {
  const auto real = model.realize();
  return evaluate(real.params, model.act, test, solver);
}

TubeResult tube_experiment(const ExplicitParams& e, const Activation& act, const Certificate* cert,
                           const Vec& base_init, const TubeOptions& opt) {
  e.validate();
  const Dims d = e.dims();
  if (opt.count < 2) throw InputError("tube: count must be at least 2");
  if (!(opt.radius >= 0.0)) throw InputError("tube: radius must be nonnegative");
  if (!(opt.horizon > 0.0)) throw InputError("tube: horizon must be positive");
  if (opt.n_times < 2) throw InputError("tube: need at least two output times");
  const Vec base = augment_initial_state(base_init, d.n);
  const Eigen::Index k = base_init.size();

  TubeResult tube;
  tube.p_weighted = cert != nullptr;
  for (int j = 0; j < opt.n_times; ++j) {
    tube.times.push_back(j + 1 == opt.n_times ? opt.horizon : opt.horizon * j / (opt.n_times - 1));
  }

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Vec> inits{base};
  for (int i = 1; i < opt.count; ++i) {
    Vec dir(k);
    for (Eigen::Index c = 0; c < k; ++c) dir(c) = normal(rng);
    const double r = opt.radius * std::pow(unif(rng), 1.0 / static_cast<double>(k));
    Vec x = base;
    if (dir.norm() > 0.0) x.head(k) += r * dir / dir.norm();
    inits.push_back(x);
  }

  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.rtol = opt.tol;
  sc.atol = opt.tol;
  sc.t0 = 0.0;
  sc.t1 = opt.horizon;
  const Vec u = Vec::Zero(d.m);
  const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(e, act, x, u, dx); };
  const OutputFn out = [&](double, const Vec& x) { return output_map(e, act, x, u); };
  for (const auto& x0 : inits) {
    const Trajectory tr = integrate(rhs, x0, sc, tube.times, out);
    tube.states.push_back(tr.states);
    tube.outputs.push_back(tr.outputs);
  }

  const std::size_t T = tube.times.size();
  for (std::size_t j = 0; j < T; ++j) {
    Vec lo = tube.outputs[0][j];
    Vec hi = lo;
    double diam = 0.0;
    for (std::size_t a = 0; a < inits.size(); ++a) {
      lo = lo.cwiseMin(tube.outputs[a][j]);
      hi = hi.cwiseMax(tube.outputs[a][j]);
      for (std::size_t b = a + 1; b < inits.size(); ++b) {
        const Vec dx = tube.states[a][j] - tube.states[b][j];
        const double dist = cert ? std::sqrt(std::max(0.0, dx.dot(cert->P * dx))) : dx.norm();
        diam = std::max(diam, dist);
      }
    }
    tube.y_min.push_back(lo);
    tube.y_max.push_back(hi);
    tube.diameter.push_back(diam);
  }
  return tube;
}

TubeResult tube_experiment(const Model& model, const Vec& base_init, const TubeOptions& opt) {
  const auto real = model.realize();
  return tube_experiment(real.params, model.act, model.mode == Mode::general ? nullptr : &real.cert, base_init, opt);
}

void write_tube_csv(std::ostream& os, const TubeResult& tube) {
  const Eigen::Index p = tube.y_min.empty() ? 0 : tube.y_min.front().size();
  os << "t";
  for (Eigen::Index i = 1; i <= p; ++i) os << ",y" << i << "_min,y" << i << "_max";
  os << ",diameter\n";
  os.precision(17);
  for (std::size_t j = 0; j < tube.times.size(); ++j) {
    os << tube.times[j];
    for (Eigen::Index i = 0; i < p; ++i) os << ',' << tube.y_min[j](i) << ',' << tube.y_max[j](i);
    os << ',' << tube.diameter[j] << '\n';
  }
}

void write_tube_members_csv(std::ostream& os, const TubeResult& tube) {
  const Eigen::Index n = tube.states.empty() ? 0 : tube.states.front().front().size();
  const Eigen::Index p = tube.outputs.empty() ? 0 : tube.outputs.front().front().size();
  os << "member,t";
  for (Eigen::Index i = 1; i <= n; ++i) os << ",x" << i;
  for (Eigen::Index i = 1; i <= p; ++i) os << ",y" << i;
  os << '\n';
  os.precision(17);
  for (std::size_t a = 0; a < tube.states.size(); ++a) {
    for (std::size_t j = 0; j < tube.times.size(); ++j) {
      os << a << ',' << tube.times[j];
      for (Eigen::Index i = 0; i < n; ++i) os << ',' << tube.states[a][j](i);
      for (Eigen::Index i = 0; i < p; ++i) os << ',' << tube.outputs[a][j](i);
      os << '\n';
    }
  }
}

std::vector<StudyRow> irregular_sampling_study(const PendulumConfig& plant, const StudyOptions& opt) {
  if (opt.n_datasets < 1) throw InputError("study: need at least one dataset");
  const auto inits = draw_initial_conditions(opt.train_gen.n_exp, opt.train_gen.seed);
  const Dataset test = generate_dataset(plant, opt.test_gen);
  std::vector<StudyRow> rows;
  for (int k = 0; k < opt.n_datasets; ++k) {
    GenerateOptions g = opt.train_gen;
    g.sampling = Sampling::irregular;
    g.seed = opt.train_gen.seed + 1 + static_cast<std::uint64_t>(k);
    StudyRow row;
    row.index = k;
    row.seed = g.seed;
    try {
      const Dataset train = generate_dataset(plant, g, inits);
      const TrainResult tr = train_sysid(train, opt.train);
      row.certified = tr.certified_throughout;
      row.test_loss = evaluate(tr.model, test, opt.eval_solver).value;
    } catch (const Error& err) {
      row.failed = true;
      row.certified = false;
      row.test_loss = std::numeric_limits<double>::quiet_NaN();
      row.error = err.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace noderen
