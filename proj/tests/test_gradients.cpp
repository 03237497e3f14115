#include "doctest.h"
#include "support.hpp"

#include "noderen/gradients.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

using namespace noderen;
using testing::max_abs;
using testing::randv;

namespace {

std::vector<Sequence> random_sequences(std::mt19937_64& rng, const Dims& d, int count, double t1) {
  std::uniform_real_distribution<double> ud(0.0, t1);
  std::vector<Sequence> out;
  for (int i = 0; i < count; ++i) {
    Sequence s;
    s.x0 = randv(rng, d.n);
    s.u = randv(rng, d.m, 0.5);
    std::vector<double> ts{ud(rng), ud(rng), t1};
    std::sort(ts.begin(), ts.end());
    s.times = ts;
    for (std::size_t j = 0; j < ts.size(); ++j) s.targets.push_back(randv(rng, d.p, 0.5));
    out.push_back(std::move(s));
  }
  return out;
}

double rel_err(const Vec& a, const Vec& b) { return (a - b).norm() / std::max(b.norm(), 1e-12); }

Model small_model(std::mt19937_64& rng, Mode mode, const Dims& d) {
  std::optional<SupplyRate> sr;
  if (mode == Mode::iqc) sr = supply_rate_for(IncrementalProperty::l2_gain(2.0), d.m, d.p);
  return testing::random_model(rng, mode, d, sr, 0.5);
}

}  // namespace

TEST_CASE("mse_loss hand examples") {
  const Dims d{2, 2, 1, 2};
  const ExplicitParams zero = ExplicitParams::zeros(d);
  SolverConfig sc;
  sc.steps = 4;
  Sequence s;
  s.x0 = Vec::Ones(2);
  s.u = Vec::Zero(1);
  s.times = {0.5, 1.0};
  s.targets = {Vec::Zero(2), Vec::Zero(2)};
  std::vector<Sequence> data{s};
  CHECK(mse_loss(zero, {}, data, sc).value == 0.0);

  s.times = {1.0};
  s.targets = {Vec::Ones(2)};
  data = {s};
  const auto rep = mse_loss(zero, {}, data, sc);
  CHECK(rep.value == doctest::Approx(2.0));
  REQUIRE(rep.per_experiment.size() == 1);
  CHECK(rep.per_experiment[0] == doctest::Approx(2.0));
}

TEST_CASE("mse_loss of an exactly representable linear plant") {
  // xdot = A x, y = x; targets from the matrix exponential.
  const Dims d{2, 1, 1, 2};
  ExplicitParams e = ExplicitParams::zeros(d);
  e.A << -0.5, 2.0, -2.0, -0.5;
  e.C2.setIdentity();
  Eigen::EigenSolver<Mat> es(e.A);
  auto expm = [&](double t) {
    const Eigen::MatrixXcd V = es.eigenvectors();
    const Eigen::VectorXcd ev = (es.eigenvalues() * t).array().exp();
    return Mat((V * ev.asDiagonal() * V.inverse()).real());
  };
  std::mt19937_64 rng(3);
  std::vector<Sequence> data;
  for (int i = 0; i < 4; ++i) {
    Sequence s;
    s.x0 = randv(rng, 2);
    s.u = Vec::Zero(1);
    s.times = {0.1 * (i + 1), 0.77, 1.5, 3.0};
    for (double t : s.times) s.targets.push_back(expm(t) * s.x0);
    data.push_back(s);
  }
  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.rtol = sc.atol = 1e-11;
  sc.t1 = 3.0;
  CHECK(mse_loss(e, {}, data, sc).value < 1e-10);
}

TEST_CASE("mse_loss reports the failing experiment") {
  const Dims d{1, 1, 1, 1};
  ExplicitParams e = ExplicitParams::zeros(d);
  e.A(0, 0) = 1e200;
  SolverConfig sc;
  sc.method = Method::euler;
  sc.steps = 10;
  Sequence ok{Vec::Zero(1), Vec::Zero(1), {1.0}, {Vec::Zero(1)}};
  Sequence bad{Vec::Ones(1), Vec::Zero(1), {1.0}, {Vec::Zero(1)}};
  const std::vector<Sequence> data{ok, bad};
  try {
    mse_loss(e, {}, data, sc);
    FAIL("expected an ExperimentError");
  } catch (const ExperimentError& err) {
    CHECK(err.index() == 1);
  }
}

TEST_CASE("scalar gradient by hand") {
  // xdot = a x, y = x, one euler step: L = x(T)^2 with x(T) = x0 (1 + h a).
  const Dims d{1, 1, 1, 1};
  ExplicitParams raw = ExplicitParams::zeros(d);
  const double a = -0.7, x0 = 1.3, T = 0.4;
  raw.A(0, 0) = a;
  raw.C2(0, 0) = 1.0;
  Model m;
  m.mode = Mode::general;
  m.dims = d;
  m.theta = pack(raw);
  SolverConfig sc;
  sc.method = Method::euler;
  sc.steps = 1;
  sc.t1 = T;
  const std::vector<Sequence> data{{Vec::Constant(1, x0), Vec::Zero(1), {T}, {Vec::Zero(1)}}};
  const auto rep = grad_reverse(m, data, sc);
  const double xT = x0 * (1 + T * a);
  CHECK(rep.value == doctest::Approx(xT * xT));
  const int ia = m.layout().block("A").offset;
  CHECK(rep.grad(ia) == doctest::Approx(2 * xT * T * x0).epsilon(1e-14));
  const int ic = m.layout().block("C2").offset;
  CHECK(rep.grad(ic) == doctest::Approx(2 * xT * xT).epsilon(1e-14));
}

TEST_CASE("gradient vanishes on a zero-residual fit") {
  std::mt19937_64 rng(4);
  const Dims d{3, 4, 1, 2};
  for (auto mode : {Mode::contractive, Mode::iqc, Mode::general}) {
    const Model m = small_model(rng, mode, d);
    SolverConfig sc;
    sc.steps = 10;
    auto data = random_sequences(rng, d, 3, 1.0);
    const auto real = m.realize();
    for (auto& s : data) {
      const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(real.params, m.act, x, s.u, dx); };
      const auto tr = integrate(rhs, s.x0, sc, s.times);
      for (std::size_t j = 0; j < s.times.size(); ++j) s.targets[j] = output_map(real.params, m.act, tr.states[j], s.u);
    }
    const auto rep = grad_reverse(m, data, sc);
    CHECK(rep.value < 1e-28);
    CHECK(rep.grad.norm() < 1e-8);
  }
}

TEST_CASE("reverse gradient matches finite differences") {
  std::mt19937_64 rng(5);
  for (auto mode : {Mode::contractive, Mode::iqc, Mode::general}) {
    for (auto method : {Method::euler, Method::rk4}) {
      for (int k = 0; k < 4; ++k) {
        const Dims d{2 + k % 3, 2 + (k * 2) % 5, 1 + k % 2, 2};
        const Model m = small_model(rng, mode, d);
        SolverConfig sc;
        sc.method = method;
        sc.steps = 5 + 5 * k;
        const auto data = random_sequences(rng, d, 2, 1.0);
        const auto rep = grad_reverse(m, data, sc);
        const Vec fd = grad_fd(m, data, sc);
        CAPTURE(to_string(mode));
        CAPTURE(to_string(method));
        CHECK(rel_err(rep.grad, fd) < 1e-5);
        CHECK(rep.value == doctest::Approx(mse_loss(m, data, sc).value).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("reverse gradient is deterministic and rejects dopri5") {
  std::mt19937_64 rng(6);
  const Dims d{3, 3, 1, 2};
  const Model m = small_model(rng, Mode::contractive, d);
  const auto data = random_sequences(rng, d, 3, 1.0);
  SolverConfig sc;
  sc.steps = 8;
  const auto a = grad_reverse(m, data, sc), b = grad_reverse(m, data, sc);
  CHECK(a.value == b.value);
  CHECK(a.grad == b.grad);

  sc.method = Method::dopri5;
  CHECK_THROWS_AS(grad_reverse(m, data, sc), InputError);
  CHECK(std::isfinite(mse_loss(m, data, sc).value));
}

TEST_CASE("adam examples") {
  AdamConfig cfg;
  Vec theta(3);
  theta << 1.0, -2.0, 0.5;
  const Vec start = theta;
  AdamState st = AdamState::zeros(3);
  adam_step(theta, st, Vec::Zero(3), cfg);
  CHECK(theta == start);

  Vec g(3);
  g << 0.3, -4.0, 1e-3;
  theta = start;
  st = AdamState::zeros(3);
  adam_step(theta, st, g, cfg);
  for (int i = 0; i < 3; ++i) CHECK(theta(i) == doctest::Approx(start(i) - cfg.lr * g(i) / (std::abs(g(i)) + cfg.eps)).epsilon(1e-12));

  // Hand recurrence over several steps.
  std::mt19937_64 rng(7);
  theta = start;
  st = AdamState::zeros(3);
  Vec m = Vec::Zero(3), v = Vec::Zero(3), ref = start;
  for (int t = 1; t <= 5; ++t) {
    const Vec gt = randv(rng, 3);
    adam_step(theta, st, gt, cfg);
    m = cfg.beta1 * m + (1 - cfg.beta1) * gt;
    v = cfg.beta2 * v + (1 - cfg.beta2) * gt.cwiseProduct(gt);
    const Vec mh = m / (1 - std::pow(cfg.beta1, t));
    const Vec vh = v / (1 - std::pow(cfg.beta2, t));
    ref -= cfg.lr * (mh.array() / (vh.array().sqrt() + cfg.eps)).matrix();
  }
  CHECK(st.t == 5);
  CHECK(max_abs(theta - ref) < 1e-14);
}
