#include "noderen/gradients.hpp"

#include <cmath>

namespace noderen {

namespace {

void check_sequence(const Sequence& s, const Dims& d, std::size_t idx) {
  if (s.x0.size() != d.n || s.u.size() != d.m) {
    throw InputError("experiment " + std::to_string(idx) + ": initial state or input has wrong dimension");
  }
  if (s.times.size() != s.targets.size() || s.times.empty()) {
    throw InputError("experiment " + std::to_string(idx) + ": need matching, non-empty times and targets");
  }
  for (const auto& z : s.targets) {
    if (z.size() != d.p) throw InputError("experiment " + std::to_string(idx) + ": target has wrong dimension");
  }
}

ExplicitParams zeros_like(const ExplicitParams& e) { return ExplicitParams::zeros(e.dims()); }

void add_scaled(ExplicitParams& acc, const ExplicitParams& g, double s) {
  acc.A += s * g.A;
  acc.B1 += s * g.B1;
  acc.B2 += s * g.B2;
  acc.C1 += s * g.C1;
  acc.D11 += s * g.D11;
  acc.D12 += s * g.D12;
  acc.C2 += s * g.C2;
  acc.D21 += s * g.D21;
  acc.D22 += s * g.D22;
  acc.bx += s * g.bx;
  acc.bv += s * g.bv;
  acc.by += s * g.by;
}

}  // namespace

LossReport mse_loss(const ExplicitParams& e, const Activation& act, std::span<const Sequence> data,
                    const SolverConfig& cfg) {
  if (data.empty()) throw InputError("mse_loss: empty dataset");
  const Dims d = e.dims();
  LossReport rep;
  rep.per_experiment.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    check_sequence(s, d, i);
    const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(e, act, x, s.u, dx); };
    const OutputFn out = [&](double, const Vec& x) { return output_map(e, act, x, s.u); };
    Trajectory tr;
    try {
      tr = integrate(rhs, s.x0, cfg, s.times, out);
    } catch (const NumericalError& err) {
      throw ExperimentError(i, err);
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < s.times.size(); ++j) acc += (tr.outputs[j] - s.targets[j]).squaredNorm();
    rep.per_experiment.push_back(acc / static_cast<double>(s.times.size()));
  }
  double total = 0.0;
  for (double v : rep.per_experiment) total += v;
  rep.value = total / static_cast<double>(data.size());
  return rep;
}

LossReport mse_loss(const Model& model, std::span<const Sequence> data, const SolverConfig& cfg) {
  const auto real = model.realize();
  return mse_loss(real.params, model.act, data, cfg);
}

GradTape build_tape(const ExplicitParams& e, const Activation& act, const Sequence& seq, const SolverConfig& cfg) {
  cfg.validate();
  if (cfg.method == Method::dopri5) throw InputError("gradient tape requires a fixed-step solver (euler or rk4)");
  const Tableau& tab = Tableau::of(cfg.method);
  const auto grid = fixed_step_grid(cfg, seq.times);
  for (double t : seq.times) {
    if (!(t >= cfg.t0 && t <= cfg.t1)) throw InputError("sample time outside the integration span");
  }

  GradTape tape;
  const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(e, act, x, seq.u, dx); };
  auto take_sample = [&](const Vec& x, std::size_t after) {
    GradTape::Sample smp;
    smp.after_step = after;
    smp.x = x;
    smp.channels = solve_w(e, act, x, seq.u);
    smp.y = e.C2 * x + e.D21 * smp.channels.w + e.D22 * seq.u + e.by;
    tape.samples.push_back(std::move(smp));
  };

  std::size_t next = 0;
  Vec x = seq.x0;
  if (next < seq.times.size() && seq.times[next] == grid.front()) {
    take_sample(x, 0);
    ++next;
  }
  std::vector<Vec> stage_states;
  for (std::size_t k = 0; k + 1 < grid.size() && next < seq.times.size(); ++k) {
    GradTape::Step step;
    step.t = grid[k];
    step.h = grid[k + 1] - grid[k];
    step.x = x;
    x = rk_step(tab, rhs, step.t, x, step.h, &stage_states, nullptr);
    if (!x.allFinite()) throw NumericalError("state became non-finite", step.t);
    step.stages.reserve(stage_states.size());
    for (auto& xs : stage_states) {
      GradTape::Stage st;
      st.channels = solve_w(e, act, xs, seq.u);
      st.state = std::move(xs);
      step.stages.push_back(std::move(st));
    }
    tape.steps.push_back(std::move(step));
    if (seq.times[next] == grid[k + 1]) {
      take_sample(x, tape.steps.size());
      ++next;
    }
  }
  tape.x_final = x;
  return tape;
}

LossReport explicit_grad(const ExplicitParams& e, const Activation& act, std::span<const Sequence> data,
                         const SolverConfig& cfg, ExplicitParams& grad_out) {
  if (data.empty()) throw InputError("explicit_grad: empty dataset");
  if (cfg.method == Method::dopri5) {
    throw InputError("reverse-mode gradients are only available for fixed-step solvers (euler, rk4)");
  }
  const Dims d = e.dims();
  const Tableau& tab = Tableau::of(cfg.method);
  grad_out = zeros_like(e);
  LossReport rep;
  const double inv_N = 1.0 / static_cast<double>(data.size());
  const Vec zero_n = Vec::Zero(d.n);
  const Vec zero_p = Vec::Zero(d.p);

  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    check_sequence(s, d, i);
    GradTape tape;
    try {
      tape = build_tape(e, act, s, cfg);
    } catch (const NumericalError& err) {
      throw ExperimentError(i, err);
    }
    const double w = 1.0 / static_cast<double>(s.times.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < tape.samples.size(); ++j) acc += (tape.samples[j].y - s.targets[j]).squaredNorm();
    rep.per_experiment.push_back(acc * w);

    ExplicitParams g = zeros_like(e);
    Vec x_bar = Vec::Zero(d.n);
    auto inject_sample = [&](std::size_t j) {
      const auto& smp = tape.samples[j];
      const Vec y_bar = (2.0 * w * inv_N) * (smp.y - s.targets[j]);
      x_bar += vector_field_vjp(e, act, smp.channels, smp.x, s.u, zero_n, y_bar, g);
    };

    std::size_t sj = tape.samples.size();
    for (std::size_t k = tape.steps.size(); k-- > 0;) {
      while (sj > 0 && tape.samples[sj - 1].after_step == k + 1) inject_sample(--sj);
      const auto& step = tape.steps[k];
      std::vector<Vec> k_bar(static_cast<std::size_t>(tab.stages));
      for (int st = 0; st < tab.stages; ++st) k_bar[static_cast<std::size_t>(st)] = (step.h * tab.b[static_cast<std::size_t>(st)]) * x_bar;
      Vec x_prev_bar = x_bar;
      for (int st = tab.stages - 1; st >= 0; --st) {
        const auto& stage = step.stages[static_cast<std::size_t>(st)];
        const Vec X_bar =
            vector_field_vjp(e, act, stage.channels, stage.state, s.u, k_bar[static_cast<std::size_t>(st)], zero_p, g);
        x_prev_bar += X_bar;
        for (int j = 0; j < st; ++j) {
          const double a = tab.a[static_cast<std::size_t>(st)][static_cast<std::size_t>(j)];
          if (a != 0.0) k_bar[static_cast<std::size_t>(j)] += (step.h * a) * X_bar;
        }
      }
      x_bar = std::move(x_prev_bar);
    }
    while (sj > 0) inject_sample(--sj);
    add_scaled(grad_out, g, 1.0);
  }
  double total = 0.0;
  for (double v : rep.per_experiment) total += v;
  rep.value = total * inv_N;
  return rep;
}

LossReport grad_reverse(const Model& model, std::span<const Sequence> data, const SolverConfig& cfg) {
  const auto real = model.realize();
  ExplicitParams g;
  LossReport rep = explicit_grad(real.params, model.act, data, cfg, g);
  rep.grad = pullback(model, real, g);
  return rep;
}

Vec grad_fd(const Model& model, std::span<const Sequence> data, const SolverConfig& cfg, double rel_step) {
  Vec grad(model.theta.size());
  Model probe = model;
  for (Eigen::Index i = 0; i < model.theta.size(); ++i) {
    const double t0 = model.theta(i);
    const double h = rel_step * std::max(1.0, std::abs(t0));
    auto f = [&](double step) {
      probe.theta(i) = t0 + step;
      return mse_loss(probe, data, cfg).value;
    };
    // Fourth-order stencil: the parametrization's curvature makes the plain O(h^2) error
    // visible at 1e-5 relative.
    const double d1 = f(h) - f(-h), d2 = f(2 * h) - f(-2 * h);
    probe.theta(i) = t0;
    grad(i) = (8.0 * d1 - d2) / (12.0 * h);
  }
  return grad;
}

void adam_step(Vec& theta, AdamState& st, const Vec& grad, const AdamConfig& cfg) {
  if (grad.size() != theta.size()) throw InputError("adam_step: gradient has wrong length");
  if (st.m.size() != theta.size()) st = AdamState::zeros(theta.size());
  st.t += 1;
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const Vec m_hat = st.m / bc1;
  const Vec v_hat = st.v / bc2;
  theta.array() -= cfg.lr * m_hat.array() / (v_hat.array().sqrt() + cfg.eps);
}

}  // namespace noderen
