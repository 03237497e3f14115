#include "noderen/dynamics.hpp"

#include <cmath>

namespace noderen {

ChannelSolution solve_w(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u) {
  const auto q = e.D11.rows();
  ChannelSolution s;
  s.v = e.C1 * x + e.D12 * u + e.bv;
  s.w.resize(q);
  for (Eigen::Index r = 0; r < q; ++r) {
    double acc = s.v(r);
    for (Eigen::Index l = 0; l < r; ++l) acc += e.D11(r, l) * s.w(l);
    s.v(r) = acc;
    s.w(r) = act.value(acc);
  }
  return s;
}

StateEval vector_field(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u) {
  StateEval out;
  auto ch = solve_w(e, act, x, u);
  out.x = x;
  out.u = u;
  out.xdot = e.A * x + e.B1 * ch.w + e.B2 * u + e.bx;
  out.y = e.C2 * x + e.D21 * ch.w + e.D22 * u + e.by;
  out.v = std::move(ch.v);
  out.w = std::move(ch.w);
  return out;
}

void state_derivative(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u, Vec& xdot) {
  const auto ch = solve_w(e, act, x, u);
  xdot.noalias() = e.A * x;
  xdot.noalias() += e.B1 * ch.w;
  xdot.noalias() += e.B2 * u;
  xdot += e.bx;
}

Vec output_map(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u) {
  const auto ch = solve_w(e, act, x, u);
  return e.C2 * x + e.D21 * ch.w + e.D22 * u + e.by;
}

double spectral_norm_bound(const Mat& A) {
  if (A.size() == 0) return 0.0;
  const Mat G = A.transpose() * A;
  Vec v = Vec::Ones(G.cols()) / std::sqrt(static_cast<double>(G.cols()));
  double lambda = 0.0;
  double rel_change = 1.0;
  for (int it = 0; it < 50; ++it) {
    Vec gv = G * v;
    const double nrm = gv.norm();
    if (nrm == 0.0) {
      // v in the null space of A'A; restart from a generic direction once.
      if (it == 0) {
        v = Vec::LinSpaced(G.cols(), 1.0, 2.0).normalized();
        continue;
      }
      break;
    }
    rel_change = std::abs(nrm - lambda) / nrm;
    lambda = nrm;
    v = gv / nrm;
    if (rel_change < 1e-8) break;
  }
  // Power iteration approaches sigma_max^2 from below and can stall when the top two
  // singular values are close. Certify b^2 I - A'A > 0 by Cholesky, growing b until it holds.
  const double frob = A.norm() * (1.0 + 1e-12);
  const Mat I = Mat::Identity(G.rows(), G.cols());
  auto certified = [&](double b) { return Eigen::LLT<Mat>(b * b * I - G).info() == Eigen::Success; };
  double lo = std::sqrt(lambda);
  double hi = lo * (1.0 + 1e-10);
  double step = std::max(rel_change, 1e-10);
  while (hi < frob && !certified(hi)) {
    lo = hi;
    hi *= 1.0 + step;
    step *= 4.0;
  }
  if (hi >= frob) return frob;
  while (hi - lo > 1e-10 * hi) {
    const double mid = 0.5 * (lo + hi);
    (certified(mid) ? hi : lo) = mid;
  }
  return hi;
}

Vec channel_lipschitz(const ExplicitParams& e) {
  const auto q = e.D11.rows();
  Vec kappa(q);
  for (Eigen::Index r = 0; r < q; ++r) {
    double k = e.C1.row(r).norm();
    for (Eigen::Index l = 0; l < r; ++l) k += std::abs(e.D11(r, l)) * kappa(l);
    kappa(r) = k;
  }
  return kappa;
}

double lipschitz_bound(const ExplicitParams& e) {
  const Vec kappa = channel_lipschitz(e);
  double total = spectral_norm_bound(e.A);
  for (Eigen::Index r = 0; r < kappa.size(); ++r) total += e.B1.col(r).norm() * kappa(r);
  return total;
}

Vec vector_field_vjp(const ExplicitParams& e, const Activation& act, const ChannelSolution& ch, const Vec& x,
                     const Vec& u, const Vec& xdot_bar, const Vec& y_bar, ExplicitParams& g) {
  const auto q = e.D11.rows();
  g.A.noalias() += xdot_bar * x.transpose();
  g.B1.noalias() += xdot_bar * ch.w.transpose();
  g.B2.noalias() += xdot_bar * u.transpose();
  g.bx += xdot_bar;
  g.C2.noalias() += y_bar * x.transpose();
  g.D21.noalias() += y_bar * ch.w.transpose();
  g.D22.noalias() += y_bar * u.transpose();
  g.by += y_bar;

  Vec x_bar = e.A.transpose() * xdot_bar + e.C2.transpose() * y_bar;
  Vec w_bar = e.B1.transpose() * xdot_bar + e.D21.transpose() * y_bar;

  // Back-substitution through the triangular channel recursion.
  for (Eigen::Index r = q - 1; r >= 0; --r) {
    const double v_bar = w_bar(r) * act.slope(ch.v(r));
    if (v_bar == 0.0) continue;
    g.C1.row(r) += v_bar * x.transpose();
    x_bar += v_bar * e.C1.row(r).transpose();
    for (Eigen::Index l = 0; l < r; ++l) {
      g.D11(r, l) += v_bar * ch.w(l);
      w_bar(l) += v_bar * e.D11(r, l);
    }
    g.D12.row(r) += v_bar * u.transpose();
    g.bv(r) += v_bar;
  }
  return x_bar;
}

}  // namespace noderen
