#include "noderen/verification.hpp"

#include "noderen/dynamics.hpp"

#include <cmath>

namespace noderen {

PdResult pd_check(const Mat& m, double tol) {
  if (m.rows() != m.cols()) throw InputError("pd_check: matrix must be square");
  if (!m.allFinite()) throw InputError("pd_check: non-finite entry");
  PdResult r;
  r.lambda_min = min_eig_sym(m);
  r.positive = r.lambda_min > tol;
  return r;
}

Mat multiplier_block(const ExplicitParams& e, const Certificate& cert) {
  const Mat Lam = cert.Lambda();
  return 2.0 * Lam - Lam * e.D11 - e.D11.transpose() * Lam;
}

Mat assemble_contractivity_lmi(const ExplicitParams& e, const Certificate& cert, double rate) {
  const auto n = e.A.rows();
  const auto q = e.D11.rows();
  const Mat& P = cert.P;
  const Mat Lam = cert.Lambda();
  Mat out(n + q, n + q);
  out.topLeftCorner(n, n) = -e.A.transpose() * P - P * e.A - 2.0 * rate * P;
  out.topRightCorner(n, q) = -e.C1.transpose() * Lam - P * e.B1;
  out.bottomLeftCorner(q, n) = out.topRightCorner(n, q).transpose();
  out.bottomRightCorner(q, q) = multiplier_block(e, cert);
  return out;
}

Mat assemble_iqc_lmi(const ExplicitParams& e, const Certificate& cert, const SupplyRate& sr) {
  const auto n = e.A.rows();
  const auto q = e.D11.rows();
  const auto m = e.B2.cols();
  const auto p = e.C2.rows();
  if (sr.m() != m || sr.p() != p) throw InputError("assemble_iqc_lmi: supply rate dimensions do not match");
  const Mat& P = cert.P;
  const Mat Lam = cert.Lambda();
  Mat out = Mat::Zero(n + q + m, n + q + m);
  out.topLeftCorner(n + q, n + q) = assemble_contractivity_lmi(e, cert, 0.0);
  out.block(0, n + q, n, m) = -P * e.B2 + e.C2.transpose() * sr.S.transpose();
  out.block(n, n + q, q, m) = -Lam * e.D12 + e.D21.transpose() * sr.S.transpose();
  out.bottomRightCorner(m, m) = sr.R + sr.S * e.D22 + e.D22.transpose() * sr.S.transpose();
  out.bottomLeftCorner(m, n + q) = out.topRightCorner(n + q, m).transpose();
  Mat G(n + q + m, p);
  G << e.C2.transpose(), e.D21.transpose(), e.D22.transpose();
  out += G * sr.Q * G.transpose();
  return 0.5 * (out + out.transpose());
}

Mat contraction_schur(const ExplicitParams& e, const Certificate& cert) {
  const Mat& P = cert.P;
  const Mat W = multiplier_block(e, cert);
  const Mat K = e.C1.transpose() * cert.Lambda() + P * e.B1;
  Eigen::LDLT<Mat> ldlt(0.5 * (W + W.transpose()));
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().cwiseAbs().minCoeff() > 1e-14 * std::max(1.0, W.norm()))) {
    throw ConstructionError("certified_rate: W is singular");
  }
  Mat Phi = -e.A.transpose() * P - P * e.A - K * ldlt.solve(K.transpose());
  return 0.5 * (Phi + Phi.transpose());
}

double certified_rate(const ExplicitParams& e, const Certificate& cert) {
  const Mat Phi = contraction_schur(e, cert);
  Eigen::GeneralizedSelfAdjointEigenSolver<Mat> ges(Phi, cert.P, Eigen::EigenvaluesOnly);
  if (ges.info() != Eigen::Success) throw ConstructionError("certified_rate: P is not positive definite");
  return 0.5 * ges.eigenvalues()(0);
}

double certified_rate_conservative(const ExplicitParams& e, const Certificate& cert) {
  const Mat Phi = contraction_schur(e, cert);
  Eigen::SelfAdjointEigenSolver<Mat> es(cert.P, Eigen::EigenvaluesOnly);
  return min_eig_sym(Phi) / (2.0 * es.eigenvalues().maxCoeff());
}

InputSignal random_input(int m, int segments, double horizon, double amplitude, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(-amplitude, amplitude);
  InputSignal s;
  s.horizon = horizon;
  s.levels.resize(static_cast<std::size_t>(segments));
  for (auto& lv : s.levels) {
    lv.resize(m);
    for (int i = 0; i < m; ++i) lv(i) = unif(rng);
  }
  return s;
}

InputSignal constant_input(const Vec& u, int segments, double horizon) {
  InputSignal s;
  s.horizon = horizon;
  s.levels.assign(static_cast<std::size_t>(segments), u);
  return s;
}

TrajectoryPair simulate_pair(const ExplicitParams& e, const Activation& act, const PairSpec& spec,
                             const SupplyRate* sr) {
  const auto n = e.A.rows();
  if (spec.a.size() != n || spec.b.size() != n) throw InputError("simulate_pair: initial states have wrong size");
  if (spec.u1.segments() != spec.u2.segments() || spec.u1.horizon != spec.u2.horizon || spec.u1.segments() < 1) {
    throw InputError("simulate_pair: inputs must share the segment grid");
  }
  if (spec.samples_per_segment < 1) throw InputError("simulate_pair: samples_per_segment must be >= 1");
  const bool with_supply = sr != nullptr;
  const Eigen::Index dim = 2 * n + (with_supply ? 3 : 0);

  TrajectoryPair out;
  Vec z(dim);
  z.head(n) = spec.a;
  z.segment(n, n) = spec.b;
  if (with_supply) z.tail(3).setZero();

  auto push = [&](double t, const Vec& zz, const Vec& ua, const Vec& ub) {
    out.times.push_back(t);
    out.x1.push_back(zz.head(n));
    out.x2.push_back(zz.segment(n, n));
    out.y1.push_back(output_map(e, act, out.x1.back(), ua));
    out.y2.push_back(output_map(e, act, out.x2.back(), ub));
    out.u1.push_back(ua);
    out.u2.push_back(ub);
    if (with_supply) {
      out.supply_integral.push_back(zz(2 * n));
      out.dy_sq_integral.push_back(zz(2 * n + 1));
      out.du_sq_integral.push_back(zz(2 * n + 2));
    }
  };
  push(0.0, z, spec.u1.at_segment(0), spec.u2.at_segment(0));

  const int segs = spec.u1.segments();
  const double L = spec.u1.segment_length();
  for (int k = 0; k < segs; ++k) {
    const Vec& ua = spec.u1.at_segment(k);
    const Vec& ub = spec.u2.at_segment(k);
    const Vec du = ua - ub;
    const Rhs rhs = [&](double, const Vec& s, Vec& ds) {
      ds.resize(dim);
      const Vec x1 = s.head(n);
      const Vec x2 = s.segment(n, n);
      const StateEval f1 = vector_field(e, act, x1, ua);
      const StateEval f2 = vector_field(e, act, x2, ub);
      ds.head(n) = f1.xdot;
      ds.segment(n, n) = f2.xdot;
      if (with_supply) {
        const Vec dy = f1.y - f2.y;
        ds(2 * n) = supply_eval(*sr, du, dy);
        ds(2 * n + 1) = dy.squaredNorm();
        ds(2 * n + 2) = du.squaredNorm();
      }
    };
    SolverConfig cfg;
    cfg.method = Method::dopri5;
    cfg.rtol = spec.rtol;
    cfg.atol = spec.atol;
    cfg.t0 = k * L;
    cfg.t1 = (k + 1 == segs) ? spec.u1.horizon : (k + 1) * L;
    std::vector<double> ts;
    for (int j = 1; j <= spec.samples_per_segment; ++j) {
      ts.push_back(j == spec.samples_per_segment ? cfg.t1
                                                 : cfg.t0 + (cfg.t1 - cfg.t0) * j / spec.samples_per_segment);
    }
    const Trajectory tr = integrate(rhs, z, cfg, ts);
    out.nfe += tr.nfe;
    for (std::size_t j = 0; j < tr.times.size(); ++j) push(tr.times[j], tr.states[j], ua, ub);
    z = tr.states.back();
  }
  return out;
}

ContractionReport empirical_contraction(const ExplicitParams& e, const Activation& act, const Certificate& cert,
                                        const PairSpec& spec, double slack) {
  for (int k = 0; k < spec.u1.segments(); ++k) {
    if (spec.u1.at_segment(k) != spec.u2.at_segment(k)) {
      throw InputError("empirical_contraction: the two runs must share the same input");
    }
  }
  ContractionReport rep;
  rep.certified_rate = certified_rate(e, cert);
  const double gap0 = (spec.a - spec.b).norm();
  if (gap0 == 0.0) return rep;

  const TrajectoryPair tp = simulate_pair(e, act, spec);
  const auto V = [&](std::size_t k) {
    const Vec d = tp.dx(k);
    return d.dot(cert.P * d);
  };
  const double V0 = V(0);
  double prev = V0;
  for (std::size_t k = 1; k < tp.times.size(); ++k) {
    const double vk = V(k);
    const double inc = (vk - prev) / V0;
    rep.worst_V_increase = std::max(rep.worst_V_increase, inc);
    if (vk > prev + slack * V0) rep.monotone_V = false;
    prev = vk;
  }

  // Least squares on samples above the integration noise floor.
  double sx = 0, sy = 0, sxx = 0, sxy = 0, cnt = 0;
  for (std::size_t k = 0; k < tp.times.size(); ++k) {
    const double g = tp.dx(k).norm();
    if (g <= 1e-6 * gap0) continue;
    const double t = tp.times[k];
    const double l = std::log(g / gap0);
    sx += t;
    sy += l;
    sxx += t * t;
    sxy += t * l;
    cnt += 1.0;
  }
  if (cnt >= 2.0 && cnt * sxx - sx * sx > 0.0) {
    const double slope = (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / cnt;
    rep.rate_fit = -slope;
    rep.kappa_fit = std::exp(intercept);
  }
  return rep;
}

DissipationReport empirical_dissipation(const ExplicitParams& e, const Activation& act, const Certificate& cert,
                                        const SupplyRate& sr, const PairSpec& spec) {
  const TrajectoryPair tp = simulate_pair(e, act, spec, &sr);
  DissipationReport rep;
  const std::size_t K = tp.times.size();
  std::vector<double> V(K);
  double maxV = 0.0, maxJ = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const Vec d = tp.dx(k);
    V[k] = d.dot(cert.P * d);
    maxV = std::max(maxV, V[k]);
    maxJ = std::max(maxJ, std::abs(tp.supply_integral[k]));
  }
  rep.scale = maxV + maxJ;
  rep.max_slack = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < K; ++a) {
    for (std::size_t b = a + 1; b < K; ++b) {
      const double D = V[b] - V[a] - (tp.supply_integral[b] - tp.supply_integral[a]);
      rep.max_slack = std::max(rep.max_slack, D);
    }
  }
  if (K < 2) rep.max_slack = 0.0;
  rep.dy_l2 = std::sqrt(std::max(0.0, tp.dy_sq_integral.back()));
  rep.du_l2 = std::sqrt(std::max(0.0, tp.du_sq_integral.back()));
  return rep;
}

}  // namespace noderen
