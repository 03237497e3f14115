#include "doctest.h"
#include "support.hpp"

#include "noderen/dynamics.hpp"
#include "noderen/integrators.hpp"

#include <cmath>

using namespace noderen;
using testing::max_abs;
using testing::randn;
using testing::randv;

namespace {

// Picard iteration on the implicit channel equation; exact after q sweeps for strictly
// lower-triangular D11.
Vec picard_w(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u) {
  const auto q = e.D11.rows();
  Vec w = Vec::Zero(q);
  for (Eigen::Index it = 0; it <= q; ++it) {
    const Vec v = e.C1 * x + e.D11 * w + e.D12 * u + e.bv;
    for (Eigen::Index i = 0; i < q; ++i) w(i) = act.value(v(i));
  }
  return w;
}

double true_spectral_norm(const Mat& A) {
  Eigen::JacobiSVD<Mat> svd(A);
  return svd.singularValues()(0);
}

}  // namespace

TEST_CASE("solve_w hand-worked recursion") {
  ExplicitParams e = ExplicitParams::zeros({1, 2, 1, 1});
  e.C1 << 1.0, 0.0;
  e.D11 << 0.0, 0.0, 1.0, 0.0;
  Vec x(1);
  x << 2.0;
  const auto ch = solve_w(e, Activation{ActivationKind::relu}, x, Vec::Zero(1));
  CHECK(ch.v(0) == 2.0);
  CHECK(ch.v(1) == 2.0);
  CHECK(ch.w(0) == 2.0);
  CHECK(ch.w(1) == 2.0);
}

TEST_CASE("solve_w without coupling and at the origin") {
  std::mt19937_64 rng(2);
  ExplicitParams e = testing::random_explicit(rng, {3, 4, 2, 2});
  e.D11.setZero();
  const Vec x = randv(rng, 3), u = randv(rng, 2);
  const auto ch = solve_w(e, {}, x, u);
  CHECK(max_abs(ch.v - (e.C1 * x + e.D12 * u + e.bv)) < 1e-15);

  e.bv.setZero();
  const auto z = solve_w(e, {}, Vec::Zero(3), Vec::Zero(2));
  CHECK(max_abs(z.v) == 0.0);
  CHECK(max_abs(z.w) == 0.0);
}

TEST_CASE("solve_w solves the implicit equation") {
  std::mt19937_64 rng(3);
  for (auto kind : {ActivationKind::tanh, ActivationKind::relu, ActivationKind::logistic}) {
    const Activation act{kind};
    for (int k = 0; k < 200; ++k) {
      const Dims d{4, 6, 2, 3};
      const ExplicitParams e = testing::random_explicit(rng, d, 1.0);
      const Vec x = randv(rng, d.n), u = randv(rng, d.m);
      const auto ch = solve_w(e, act, x, u);
      Vec sig(d.q);
      for (int i = 0; i < d.q; ++i) sig(i) = act.value(ch.v(i));
      REQUIRE(max_abs(ch.w - sig) == 0.0);
      REQUIRE(max_abs(ch.v - (e.C1 * x + e.D11 * sig + e.D12 * u + e.bv)) < 1e-12);
      REQUIRE(max_abs(ch.w - picard_w(e, act, x, u)) < 1e-14);
    }
  }
}

TEST_CASE("vector field matches an independent transcription") {
  std::mt19937_64 rng(4);
  for (int k = 0; k < 100; ++k) {
    const Dims d{3, 5, 2, 2};
    const ExplicitParams e = testing::random_explicit(rng, d, 1.0);
    const Vec x = randv(rng, d.n), u = randv(rng, d.m);
    const Activation act{};
    const Vec w = picard_w(e, act, x, u);
    const StateEval ev = vector_field(e, act, x, u);
    REQUIRE(max_abs(ev.xdot - (e.A * x + e.B1 * w + e.B2 * u + e.bx)) < 1e-14);
    REQUIRE(max_abs(ev.y - (e.C2 * x + e.D21 * w + e.D22 * u + e.by)) < 1e-14);
    Vec xd;
    state_derivative(e, act, x, u, xd);
    REQUIRE(xd == ev.xdot);
    REQUIRE(output_map(e, act, x, u) == ev.y);
  }
}

TEST_CASE("vector field special cases") {
  const Dims d{2, 3, 1, 2};
  ExplicitParams e = ExplicitParams::zeros(d);
  e.bx << 1.5, -2.0;
  e.by << 0.25, 0.5;
  const auto ev = vector_field(e, {}, Vec::Ones(2), Vec::Ones(1));
  CHECK(ev.xdot == e.bx);
  CHECK(ev.y == e.by);

  std::mt19937_64 rng(5);
  ExplicitParams lin = testing::random_explicit(rng, d);
  lin.B1.setZero();
  lin.B2.setZero();
  lin.bx.setZero();
  const Vec x = randv(rng, 2);
  CHECK(max_abs(vector_field(lin, {}, x, randv(rng, 1)).xdot - lin.A * x) < 1e-15);
}

TEST_CASE("spectral norm bound is an upper bound and near tight") {
  std::mt19937_64 rng(6);
  int tight = 0;
  for (int k = 0; k < 2000; ++k) {
    const Mat A = randn(rng, 1 + k % 6, 1 + (k / 6) % 6);
    const double b = spectral_norm_bound(A);
    const double s = true_spectral_norm(A);
    REQUIRE(b >= s);
    REQUIRE(b <= A.norm() * (1.0 + 1e-12));
    // Close leading singular values slow the iteration down; most cases are still tight.
    REQUIRE(b <= s * (1.0 + 1e-3));
    if (b <= s * (1.0 + 1e-6)) ++tight;
  }
  CHECK(tight > 1000);
  CHECK(spectral_norm_bound(Mat::Zero(3, 3)) == 0.0);
}

TEST_CASE("lipschitz bound examples") {
  std::mt19937_64 rng(7);
  ExplicitParams e = testing::random_explicit(rng, {4, 5, 1, 2});
  ExplicitParams b1zero = e;
  b1zero.B1.setZero();
  CHECK(lipschitz_bound(b1zero) == doctest::Approx(spectral_norm_bound(e.A)));
  ExplicitParams c1zero = e;
  c1zero.C1.setZero();
  CHECK(channel_lipschitz(c1zero).isZero());
  CHECK(lipschitz_bound(c1zero) == doctest::Approx(spectral_norm_bound(e.A)));

  // kappa recursion by hand for q = 2.
  ExplicitParams h = ExplicitParams::zeros({2, 2, 1, 1});
  h.C1 << 3.0, 4.0, 0.0, 1.0;
  h.D11 << 0.0, 0.0, -2.0, 0.0;
  const Vec kap = channel_lipschitz(h);
  CHECK(kap(0) == doctest::Approx(5.0));
  CHECK(kap(1) == doctest::Approx(1.0 + 2.0 * 5.0));
}

TEST_CASE("lipschitz bound dominates sampled difference quotients") {
  std::mt19937_64 rng(8);
  for (auto kind : {ActivationKind::tanh, ActivationKind::relu}) {
    const Activation act{kind};
    for (int model = 0; model < 5; ++model) {
      const Dims d{4, 5, 1, 2};
      const ExplicitParams e = testing::random_explicit(rng, d, 1.0);
      const double L = lipschitz_bound(e);
      const Vec u = randv(rng, 1);
      double worst = 0.0;
      for (int k = 0; k < 2000; ++k) {
        const Vec x1 = randv(rng, d.n, 2.0);
        const Vec x2 = x1 + randv(rng, d.n, k % 2 ? 1e-3 : 1.0);
        const double r = (vector_field(e, act, x1, u).xdot - vector_field(e, act, x2, u).xdot).norm() / (x1 - x2).norm();
        worst = std::max(worst, r);
      }
      CHECK(worst <= L);
    }
  }
}

TEST_CASE("vector_field_vjp matches finite differences") {
  std::mt19937_64 rng(9);
  for (auto kind : {ActivationKind::tanh, ActivationKind::logistic}) {
    const Activation act{kind};
    for (int k = 0; k < 10; ++k) {
      const Dims d{3, 4, 2, 2};
      const ExplicitParams e = testing::random_explicit(rng, d, 0.8);
      const Vec x = randv(rng, d.n), u = randv(rng, d.m);
      const Vec a = randv(rng, d.n), b = randv(rng, d.p);
      auto f = [&](const ExplicitParams& pe, const Vec& xx) {
        const auto ev = vector_field(pe, act, xx, u);
        return a.dot(ev.xdot) + b.dot(ev.y);
      };
      ExplicitParams g = ExplicitParams::zeros(d);
      const auto ch = solve_w(e, act, x, u);
      const Vec xbar = vector_field_vjp(e, act, ch, x, u, a, b, g);

      const double h = 1e-6;
      for (int i = 0; i < d.n; ++i) {
        Vec xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        REQUIRE(xbar(i) == doctest::Approx((f(e, xp) - f(e, xm)) / (2 * h)).epsilon(1e-7));
      }
      // A few entries of each block.
      auto check_block = [&](Mat ExplicitParams::*blk, const Mat& grad, bool lower_only) {
        for (Eigen::Index r = 0; r < grad.rows(); ++r) {
          for (Eigen::Index c = 0; c < grad.cols(); ++c) {
            if (lower_only && c >= r) continue;
            ExplicitParams ep = e, em = e;
            (ep.*blk)(r, c) += h;
            (em.*blk)(r, c) -= h;
            REQUIRE(grad(r, c) == doctest::Approx((f(ep, x) - f(em, x)) / (2 * h)).epsilon(1e-7));
          }
        }
      };
      check_block(&ExplicitParams::A, g.A, false);
      check_block(&ExplicitParams::B1, g.B1, false);
      check_block(&ExplicitParams::C1, g.C1, false);
      check_block(&ExplicitParams::D11, g.D11, true);
      check_block(&ExplicitParams::D12, g.D12, false);
      check_block(&ExplicitParams::D21, g.D21, false);
      check_block(&ExplicitParams::D22, g.D22, false);
      for (int r = 0; r < d.q; ++r) {
        ExplicitParams ep = e, em = e;
        ep.bv(r) += h;
        em.bv(r) -= h;
        REQUIRE(g.bv(r) == doctest::Approx((f(ep, x) - f(em, x)) / (2 * h)).epsilon(1e-7));
      }
    }
  }
}

TEST_CASE("distinct initial states never meet") {
  std::mt19937_64 rng(10);
  for (auto mode : {Mode::general, Mode::contractive}) {
    for (int k = 0; k < 10; ++k) {
      const Dims d{3, 4, 1, 2};
      const Model model = testing::random_model(rng, mode, d, std::nullopt, 0.6);
      const auto real = model.realize();
      const Vec u = Vec::Zero(1);
      const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(real.params, model.act, x, u, dx); };
      SolverConfig sc;
      sc.method = Method::rk4;
      sc.steps = 200;
      sc.t1 = 4.0;
      std::vector<double> ts;
      for (int j = 1; j <= 200; ++j) ts.push_back(4.0 * j / 200);
      ts.back() = 4.0;
      const Vec a = randv(rng, d.n), b = a + 1e-3 * randv(rng, d.n);
      const auto ta = integrate(rhs, a, sc, ts), tb = integrate(rhs, b, sc, ts);
      double closest = INFINITY;
      for (std::size_t j = 0; j < ts.size(); ++j) closest = std::min(closest, (ta.states[j] - tb.states[j]).norm());
      CHECK(closest > 0.0);
    }
  }
}
