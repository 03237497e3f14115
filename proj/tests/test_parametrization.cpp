#include "doctest.h"
#include "support.hpp"

#include "noderen/parametrization.hpp"
#include "noderen/verification.hpp"

#include <cmath>

using namespace noderen;
using testing::max_abs;
using testing::randn;
using testing::randv;

namespace {

double rel_err(const Mat& a, const Mat& b) { return max_abs(a - b) / std::max(1.0, max_abs(b)); }

DirectParamsC random_c(std::mt19937_64& rng, const Dims& d) {
  DirectParamsC th;
  th.X = randn(rng, d.n + d.q, d.n + d.q);
  th.B2 = randn(rng, d.n, d.m);
  th.C2 = randn(rng, d.p, d.n);
  th.D12 = randn(rng, d.q, d.m);
  th.D21 = randn(rng, d.p, d.q);
  th.D22 = randn(rng, d.p, d.m);
  th.b_tilde = randv(rng, d.n + d.q + d.p);
  th.U = randn(rng, d.n, d.q);
  th.Y1 = randn(rng, d.n, d.n);
  th.X_P = randn(rng, d.n, d.n);
  return th;
}

DirectParamsIQC random_iqc(std::mt19937_64& rng, const Dims& d) {
  DirectParamsIQC th;
  const int s = std::max(d.p, d.m);
  th.X_R = randn(rng, d.n + d.q, d.n + d.q);
  th.B2 = randn(rng, d.n, d.m);
  th.C2 = randn(rng, d.p, d.n);
  th.D21 = randn(rng, d.p, d.q);
  th.b_tilde = randv(rng, d.n + d.q + d.p);
  th.X3 = randn(rng, s, s);
  th.T = randn(rng, d.q, d.m);
  th.U = randn(rng, d.n, d.q);
  th.Y1 = randn(rng, d.n, d.n);
  th.X_P = randn(rng, d.n, d.n);
  return th;
}

// Sum of <G, E> over every explicit block.
double pair(const ExplicitParams& g, const ExplicitParams& e) {
  return (g.A.cwiseProduct(e.A)).sum() + (g.B1.cwiseProduct(e.B1)).sum() + (g.B2.cwiseProduct(e.B2)).sum() +
         (g.C1.cwiseProduct(e.C1)).sum() + (g.D11.cwiseProduct(e.D11)).sum() + (g.D12.cwiseProduct(e.D12)).sum() +
         (g.C2.cwiseProduct(e.C2)).sum() + (g.D21.cwiseProduct(e.D21)).sum() + (g.D22.cwiseProduct(e.D22)).sum() +
         g.bx.dot(e.bx) + g.bv.dot(e.bv) + g.by.dot(e.by);
}

}  // namespace

TEST_CASE("cayley_contract examples") {
  CHECK(max_abs(cayley_contract(Mat::Identity(2, 2), 2, 2)) < 1e-15);
  Mat M(1, 1);
  M << 3.0;
  CHECK(cayley_contract(M, 1, 1)(0, 0) == doctest::Approx(-0.5));

  std::mt19937_64 rng(3);
  const Mat S = testing::rand_spd(rng, 4);
  const Mat F = cayley_contract(S, 3, 2);
  CHECK(F.rows() == 3);
  CHECK(F.cols() == 2);
  CHECK(min_eig_sym(Mat::Identity(2, 2) - F.transpose() * F) > 0.0);

  Mat bad = Mat::Identity(2, 2);
  bad(0, 1) = 0.5;
  CHECK_THROWS_AS(cayley_contract(bad, 1, 1), ConstructionError);
  CHECK_THROWS_AS(cayley_contract(-Mat::Identity(2, 2), 1, 1), ConstructionError);
  CHECK_THROWS_AS(cayley_contract(Mat::Identity(2, 2), 3, 1), InputError);
}

TEST_CASE("contractive map closed-form example") {
  const Dims d{3, 2, 1, 1};
  DirectParamsC th;
  th.X = Mat::Zero(5, 5);
  th.B2 = Mat::Zero(3, 1);
  th.C2 = Mat::Zero(1, 3);
  th.D12 = Mat::Zero(2, 1);
  th.D21 = Mat::Zero(1, 2);
  th.D22 = Mat::Zero(1, 1);
  th.b_tilde = Vec::Zero(6);
  th.U = Mat::Zero(3, 2);
  th.Y1 = Mat::Zero(3, 3);
  th.X_P = Mat::Zero(3, 3);
  th.epsilon = 0.1;
  th.epsilon_P = 1.0;
  const auto r = contractive_from_direct(th);
  CHECK(max_abs(r.params.A + 0.05 * Mat::Identity(3, 3)) < 1e-15);
  CHECK(max_abs(r.params.B1) == 0.0);
  CHECK(max_abs(r.params.C1) == 0.0);
  CHECK(max_abs(r.params.D11) == 0.0);
  CHECK(max_abs(r.cert.lambda - Vec::Constant(2, 0.05)) < 1e-15);
  CHECK(max_abs(r.cert.P - Mat::Identity(3, 3)) < 1e-15);
  CHECK(r.params.dims() == d);
}

TEST_CASE("contractivity block ignores output and bias parameters") {
  std::mt19937_64 rng(5);
  const Dims d{4, 5, 1, 2};
  DirectParamsC a = random_c(rng, d);
  DirectParamsC b = a;
  b.B2 = randn(rng, d.n, d.m);
  b.C2 = randn(rng, d.p, d.n);
  b.D12 = randn(rng, d.q, d.m);
  b.D21 = randn(rng, d.p, d.q);
  b.D22 = randn(rng, d.p, d.m);
  b.b_tilde = randv(rng, d.n + d.q + d.p);
  const auto ra = contractive_from_direct(a), rb = contractive_from_direct(b);
  CHECK(ra.params.A == rb.params.A);
  CHECK(ra.params.B1 == rb.params.B1);
  CHECK(ra.params.C1 == rb.params.C1);
  CHECK(ra.params.D11 == rb.params.D11);
  CHECK(ra.cert.P == rb.cert.P);
  CHECK(ra.cert.lambda == rb.cert.lambda);
  CHECK(rb.params.B2 == b.B2);
  CHECK(rb.params.bx == b.b_tilde.head(d.n));
  CHECK(rb.params.bv == b.b_tilde.segment(d.n, d.q));
  CHECK(rb.params.by == b.b_tilde.tail(d.p));
}

TEST_CASE("contractive construction closes the LMI exactly") {
  std::mt19937_64 rng(17);
  for (const Dims d : {Dims{4, 5, 1, 2}, Dims{2, 1, 2, 1}, Dims{6, 3, 3, 3}}) {
    for (int k = 0; k < 100; ++k) {
      DirectParamsC th = random_c(rng, d);
      th.epsilon = 0.05;
      const auto r = contractive_from_direct(th);
      REQUIRE_NOTHROW(r.params.validate());
      REQUIRE_NOTHROW(r.cert.validate());
      const Mat lmi = assemble_contractivity_lmi(r.params, r.cert, 0.0);
      REQUIRE(rel_err(lmi, r.inter.H) < 1e-8);
      const double lmin = pd_check(lmi).lambda_min;
      REQUIRE(lmin > 0.0);
      REQUIRE(lmin >= th.epsilon * (1.0 - 1e-8));
      // W is recovered from Lambda and D11.
      REQUIRE(rel_err(multiplier_block(r.params, r.cert), r.inter.W) < 1e-12);
    }
  }
}

TEST_CASE("prescribed rate appears in the LMI and the certified rate") {
  std::mt19937_64 rng(19);
  const Dims d{4, 5, 1, 2};
  for (int k = 0; k < 50; ++k) {
    DirectParamsC th = random_c(rng, d);
    th.min_rate = 0.5;
    const auto r = contractive_from_direct(th);
    const Mat lmi = assemble_contractivity_lmi(r.params, r.cert, th.min_rate);
    REQUIRE(rel_err(lmi, r.inter.H) < 1e-8);
    REQUIRE(certified_rate(r.params, r.cert) >= 0.5 * (1.0 - 1e-8));
  }
}

TEST_CASE("iqc closed-form examples") {
  SUBCASE("passivity with delta 1 and F = 0") {
    const int p = 2, m = 1;
    Mat S = Mat::Zero(m, p);
    S(0, 0) = 0.5;
    const SupplyRate sr = make_supply_rate(Mat::Zero(p, p), S, Mat::Zero(m, m), 1.0);
    std::mt19937_64 rng(23);
    DirectParamsIQC th = random_iqc(rng, {3, 2, m, p});
    th.X3 = std::sqrt(1.0 - th.epsilon) * Mat::Identity(2, 2);
    const auto r = iqc_from_direct(th, sr);
    Mat expect = Mat::Zero(p, m);
    expect(0, 0) = 0.5;
    CHECK(max_abs(r.params.D22 - expect) < 1e-12);
  }
  SUBCASE("unit L2 gain with X3 = 0") {
    const int p = 2, m = 2;
    const SupplyRate sr = supply_rate_for(IncrementalProperty::l2_gain(1.0), m, p);
    std::mt19937_64 rng(29);
    DirectParamsIQC th = random_iqc(rng, {3, 2, m, p});
    th.X3 = Mat::Zero(2, 2);
    th.epsilon = 0.1;
    const auto r = iqc_from_direct(th, sr);
    const double expect = (1.0 - 0.1) / (1.1 * std::sqrt(1.001));
    CHECK(max_abs(r.params.D22 - expect * Mat::Identity(p, m)) < 1e-12);
  }
}

TEST_CASE("iqc construction: Schur identity and positivity") {
  std::mt19937_64 rng(31);
  const std::vector<IncrementalProperty> props = {
      IncrementalProperty::l2_gain(2.0), IncrementalProperty::passivity(), IncrementalProperty::input_passivity(0.3),
      IncrementalProperty::output_passivity(0.2)};
  for (const auto& prop : props) {
    for (const Dims d : {Dims{4, 5, 1, 2}, Dims{3, 2, 2, 2}}) {
      const SupplyRate sr = supply_rate_for(prop, d.m, d.p);
      for (int k = 0; k < 50; ++k) {
        CAPTURE(to_string(prop.kind));
        const DirectParamsIQC th = random_iqc(rng, d);
        const auto r = iqc_from_direct(th, sr);
        REQUIRE_NOTHROW(r.params.validate());
        const Mat base = th.X_R.transpose() * th.X_R + th.epsilon * Mat::Identity(d.n + d.q, d.n + d.q);
        REQUIRE(rel_err(r.inter.H - r.inter.Psi, base) < 1e-10);
        REQUIRE(min_eig_sym(r.inter.R_tilde) > 0.0);

        const Mat lmi = assemble_iqc_lmi(r.params, r.cert, sr);
        const int nq = d.n + d.q;
        const Mat top = lmi.topLeftCorner(nq, nq);
        const Mat off = lmi.topRightCorner(nq, d.m);
        const Mat bot = lmi.bottomRightCorner(d.m, d.m);
        REQUIRE(rel_err(bot, r.inter.R_tilde) < 1e-10);
        const Mat schur = top - off * bot.ldlt().solve(off.transpose());
        REQUIRE(rel_err(schur, base) < 1e-8);
        REQUIRE(pd_check(lmi).lambda_min > 0.0);
        REQUIRE(pd_check(assemble_contractivity_lmi(r.params, r.cert, 0.0)).lambda_min > 0.0);
        // D12 = Lambda^{-1} T
        REQUIRE(rel_err(r.cert.Lambda() * r.params.D12, th.T) < 1e-10);
      }
    }
  }
}

TEST_CASE("general mode is an identity with validation") {
  std::mt19937_64 rng(37);
  const Dims d{3, 4, 1, 2};
  const ExplicitParams e = testing::random_explicit(rng, d);
  const ExplicitParams out = explicit_from_general(e);
  CHECK(out.A == e.A);
  CHECK(out.D11 == e.D11);
  ExplicitParams bad = e;
  bad.D11(1, 1) = 0.1;
  CHECK_THROWS_AS(explicit_from_general(bad), InputError);
  CHECK_NOTHROW(explicit_from_general(ExplicitParams::zeros(d)));
}

TEST_CASE("flat layouts round-trip") {
  std::mt19937_64 rng(41);
  const Dims d{4, 5, 1, 2};
  const Hyper h;
  SUBCASE("contractive") {
    const auto L = ParamLayout::for_mode(Mode::contractive, d);
    CHECK(L.size() == 81 + 4 + 8 + 5 + 10 + 2 + 11 + 20 + 16 + 16);
    const Vec theta = randv(rng, L.size());
    CHECK(pack(unpack_contractive(d, theta, h)) == theta);
    CHECK(L.get(theta, "X")(0, 1) == theta(1));
    CHECK(L.coordinate_name(1) == "X[0,1]");
    CHECK(L.has("D22"));
    CHECK_FALSE(L.has("X3"));
  }
  SUBCASE("iqc") {
    const auto L = ParamLayout::for_mode(Mode::iqc, d);
    const Vec theta = randv(rng, L.size());
    CHECK(pack(unpack_iqc(d, theta, h)) == theta);
    CHECK(L.block("X3").rows == 2);
    CHECK_FALSE(L.has("D22"));
  }
  SUBCASE("general") {
    const auto L = ParamLayout::for_mode(Mode::general, d);
    Vec theta = randv(rng, L.size());
    const ExplicitParams e = unpack_general(d, theta);
    CHECK(e.D11.isLowerTriangular());
    CHECK(e.D11.diagonal().isZero());
  }
  CHECK(mode_from_string("iqc") == Mode::iqc);
  CHECK_THROWS_AS(mode_from_string("robust"), InputError);
}

TEST_CASE("init_model: deterministic, zero biases, scaled entries") {
  const Dims d{8, 8, 1, 2};
  const Model a = init_model(Mode::contractive, d, {}, {}, std::nullopt, 5);
  const Model b = init_model(Mode::contractive, d, {}, {}, std::nullopt, 5);
  const Model c = init_model(Mode::contractive, d, {}, {}, std::nullopt, 6);
  CHECK(a.theta == b.theta);
  CHECK(a.theta != c.theta);
  const auto L = a.layout();
  CHECK(L.get(a.theta, "b_tilde").isZero());
  const Mat X = L.get(a.theta, "X");
  const double var = X.squaredNorm() / static_cast<double>(X.size());
  CHECK(var == doctest::Approx(1.0 / 16.0).epsilon(0.2));
  CHECK_THROWS_AS(init_model(Mode::iqc, d, {}, {}, std::nullopt, 1), InputError);
}

TEST_CASE("pullback matches finite differences of the parameter maps") {
  std::mt19937_64 rng(43);
  struct Case {
    Mode mode;
    Dims d;
    std::optional<IncrementalProperty> prop;
  };
  const std::vector<Case> cases = {
      {Mode::contractive, {3, 4, 1, 2}, std::nullopt},
      {Mode::general, {3, 4, 1, 2}, std::nullopt},
      {Mode::iqc, {3, 4, 1, 2}, IncrementalProperty::l2_gain(1.5)},
      {Mode::iqc, {2, 3, 2, 2}, IncrementalProperty::passivity()},
      {Mode::iqc, {2, 3, 1, 2}, IncrementalProperty::input_passivity(0.4)},
      {Mode::iqc, {2, 3, 2, 3}, IncrementalProperty::output_passivity(0.3)},
  };
  for (const auto& c : cases) {
    for (int rep = 0; rep < 3; ++rep) {
      CAPTURE(to_string(c.mode));
      std::optional<SupplyRate> sr;
      if (c.prop) sr = supply_rate_for(*c.prop, c.d.m, c.d.p);
      Model model = testing::random_model(rng, c.mode, c.d, sr, 0.7);
      if (c.mode == Mode::contractive && rep == 2) model.hyper.min_rate = 0.3;
      const auto real = model.realize();
      const ExplicitParams G = testing::random_explicit(rng, c.d, 1.0);
      const Vec g = pullback(model, real, G);
      Vec fd(model.theta.size());
      Model probe = model;
      for (Eigen::Index i = 0; i < model.theta.size(); ++i) {
        const double h = 1e-6 * std::max(1.0, std::abs(model.theta(i)));
        probe.theta(i) = model.theta(i) + h;
        const double fp = pair(G, probe.realize().params);
        probe.theta(i) = model.theta(i) - h;
        const double fm = pair(G, probe.realize().params);
        probe.theta(i) = model.theta(i);
        fd(i) = (fp - fm) / (2 * h);
      }
      if (c.mode == Mode::general) {
        // D11 upper entries are masked by the map, so their derivative is exactly zero.
        const auto L = model.layout();
        const Mat gD11 = L.get(g, "D11");
        CHECK(Mat(gD11.triangularView<Eigen::Upper>()).isZero());
      }
      const double err = (g - fd).cwiseAbs().maxCoeff() / std::max(1.0, fd.cwiseAbs().maxCoeff());
      CHECK(err < 1e-6);
    }
  }
}
