#include "doctest.h"

#include "noderen/integrators.hpp"

#include <cmath>
#include <sstream>

using namespace noderen;

namespace {

const Rhs decay = [](double, const Vec& x, Vec& dx) { dx = -x; };

Vec one() { return Vec::Ones(1); }

}  // namespace

TEST_CASE("single-step hand values") {
  SolverConfig sc;
  sc.t1 = 0.5;
  sc.steps = 1;
  sc.method = Method::euler;
  const std::vector<double> ts{0.5};
  CHECK(integrate(decay, one(), sc, ts).states[0](0) == doctest::Approx(0.5));
  sc.method = Method::rk4;
  const double h = 0.5;
  const double taylor = 1 - h + h * h / 2 - h * h * h / 6 + h * h * h * h / 24;
  CHECK(integrate(decay, one(), sc, ts).states[0](0) == doctest::Approx(taylor).epsilon(1e-15));
  CHECK(taylor == doctest::Approx(0.6067708333333333));
}

TEST_CASE("dopri5 accuracy on exponential decay") {
  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.rtol = sc.atol = 1e-8;
  const std::vector<double> ts{1.0};
  const auto tr = integrate(decay, one(), sc, ts);
  CHECK(std::abs(tr.states[0](0) - std::exp(-1.0)) < 1e-7);
  CHECK(tr.nfe == 6 * (tr.accepted + tr.rejected) + 1);
}

TEST_CASE("dopri5 dense output at irregular times") {
  // Harmonic oscillator, exact solution (cos t, -sin t).
  const Rhs osc = [](double, const Vec& x, Vec& dx) {
    dx.resize(2);
    dx(0) = x(1);
    dx(1) = -x(0);
  };
  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.rtol = sc.atol = 1e-9;
  sc.t1 = 10.0;
  const std::vector<double> ts{0.0, 0.013, 0.5, 1.2345, 3.3, 7.77, 9.999, 10.0};
  Vec x0(2);
  x0 << 1.0, 0.0;
  const auto tr = integrate(osc, x0, sc, ts);
  REQUIRE(tr.times.size() == ts.size());
  for (std::size_t j = 0; j < ts.size(); ++j) {
    CHECK(tr.times[j] == ts[j]);
    CHECK(std::abs(tr.states[j](0) - std::cos(ts[j])) < 1e-7);
    CHECK(std::abs(tr.states[j](1) + std::sin(ts[j])) < 1e-7);
  }
}

TEST_CASE("dopri5 records rejections in the evaluation count") {
  const Rhs stiffish = [](double t, const Vec& x, Vec& dx) { dx = -50.0 * (x.array() - std::cos(t)).matrix(); };
  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.rtol = sc.atol = 1e-6;
  sc.t1 = 5.0;
  const std::vector<double> ts{5.0};
  const auto tr = integrate(stiffish, one(), sc, ts);
  CHECK(tr.rejected > 0);
  CHECK(tr.nfe == 6 * (tr.accepted + tr.rejected) + 1);
}

TEST_CASE("fixed-step evaluation counts and sample insertion") {
  SolverConfig sc;
  sc.t1 = 1.0;
  sc.steps = 10;
  sc.method = Method::euler;
  const std::vector<double> on_grid{0.5, 1.0};
  CHECK(integrate(decay, one(), sc, on_grid).nfe == 10);
  sc.method = Method::rk4;
  CHECK(integrate(decay, one(), sc, on_grid).nfe == 40);

  // 0.25 splits one step into two.
  const std::vector<double> off_grid{0.25, 1.0};
  const auto grid = fixed_step_grid(sc, off_grid);
  CHECK(grid.size() == 12);
  CHECK(std::find(grid.begin(), grid.end(), 0.25) != grid.end());
  const auto tr = integrate(decay, one(), sc, off_grid);
  CHECK(tr.nfe == 44);
  CHECK(tr.times[0] == 0.25);

  // Integration stops after the last sample.
  const std::vector<double> early{0.3};
  CHECK(integrate(decay, one(), sc, early).nfe == 3 * 4);

  // A sample within rounding of a grid point replaces it.
  const std::vector<double> near{0.3};
  const auto g3 = fixed_step_grid(sc, near);
  CHECK(g3.size() == 11);
  CHECK(std::count(g3.begin(), g3.end(), 0.3) == 1);
}

TEST_CASE("fixed-step samples equal the discrete flow") {
  SolverConfig sc;
  sc.t1 = 1.0;
  sc.steps = 4;
  sc.method = Method::euler;
  const std::vector<double> ts{0.1, 0.25, 1.0};
  const auto tr = integrate(decay, one(), sc, ts);
  CHECK(tr.states[0](0) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(tr.states[1](0) == doctest::Approx(0.9 * 0.85).epsilon(1e-15));
  CHECK(tr.states[2](0) == doctest::Approx(0.9 * 0.85 * std::pow(0.75, 3)).epsilon(1e-15));
}

TEST_CASE("convergence orders") {
  const std::vector<int> counts{8, 16, 32, 64, 128};
  const Vec exact = Vec::Constant(1, std::exp(-1.0));
  const double se = order_probe(Method::euler, decay, one(), 1.0, exact, counts);
  const double sr = order_probe(Method::rk4, decay, one(), 1.0, exact, counts);
  CHECK(se == doctest::Approx(1.0).epsilon(0.1));
  CHECK(std::abs(sr - 4.0) <= 0.2);
}

TEST_CASE("dopri5 work grows as the tolerance tightens") {
  long prev = 0;
  for (double tol : {1e-3, 1e-5, 1e-7, 1e-9}) {
    SolverConfig sc;
    sc.method = Method::dopri5;
    sc.rtol = sc.atol = tol;
    sc.t1 = 8.0;
    const std::vector<double> ts{8.0};
    const auto tr = integrate(decay, one(), sc, ts);
    CHECK(tr.nfe >= prev);
    prev = tr.nfe;
  }
}

TEST_CASE("integrator errors") {
  SolverConfig sc;
  sc.t1 = 1.0;
  const std::vector<double> outside{1.5};
  CHECK_THROWS_AS(integrate(decay, one(), sc, outside), InputError);
  const std::vector<double> unsorted{0.5, 0.2};
  CHECK_THROWS_AS(integrate(decay, one(), sc, unsorted), InputError);
  sc.steps = 0;
  CHECK_THROWS_AS(sc.validate(), InputError);

  SolverConfig bad;
  bad.method = Method::dopri5;
  bad.max_steps = 5;
  bad.t1 = 100.0;
  bad.rtol = bad.atol = 1e-12;
  const std::vector<double> end{100.0};
  try {
    integrate(decay, one(), bad, end);
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    CHECK(e.last_time() > 0.0);
    CHECK(e.last_time() < 100.0);
  }

  const Rhs cubic = [](double, const Vec& x, Vec& dx) { dx = x.array().cube().matrix(); };
  SolverConfig blow;
  blow.method = Method::euler;
  blow.steps = 20;
  blow.t1 = 10.0;
  const std::vector<double> t10{10.0};
  CHECK_THROWS_AS(integrate(cubic, Vec::Constant(1, 10.0), blow, t10), NumericalError);
  CHECK_THROWS_AS(method_from_string("rk45"), InputError);
}

TEST_CASE("integration is deterministic") {
  SolverConfig sc;
  sc.method = Method::dopri5;
  sc.t1 = 3.0;
  const std::vector<double> ts{0.7, 1.9, 3.0};
  const auto a = integrate(decay, one(), sc, ts), b = integrate(decay, one(), sc, ts);
  for (std::size_t j = 0; j < ts.size(); ++j) CHECK(a.states[j](0) == b.states[j](0));
  CHECK(a.nfe == b.nfe);
}

TEST_CASE("trajectory CSV") {
  Trajectory tr;
  tr.times = {0.0, 0.1};
  Vec x(2), y(1);
  x << 1.0 / 3.0, 2.0;
  y << -0.1;
  tr.states = {x, x};
  tr.outputs = {y, y};
  std::ostringstream os;
  write_trajectory_csv(os, tr);
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  CHECK(header == "t,x1,x2,y1");
  std::getline(is, row);
  const double parsed = std::stod(row.substr(row.find(',') + 1));
  CHECK(parsed == 1.0 / 3.0);
}
