#include "noderen/core.hpp"

#include <cmath>
#include <iostream>

namespace noderen {

namespace {

void expect_shape(const Mat& m, Eigen::Index r, Eigen::Index c, const char* name) {
  if (m.rows() != r || m.cols() != c) {
    throw InputError(std::string(name) + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                     ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  if (!all_finite(m)) throw InputError(std::string(name) + ": non-finite entry");
}

Mat identity_slice(int rows, int cols) { return Mat::Identity(rows, cols); }

Mat symmetrize_checked(const Mat& X, const char* name) {
  const Mat sym = 0.5 * (X + X.transpose());
  const double scale = std::max(1.0, X.cwiseAbs().maxCoeff());
  const double asym = (X - X.transpose()).cwiseAbs().maxCoeff() / scale;
  if (asym > 1e-12) {
    std::clog << "noderen: warning: " << name << " asymmetric (relative " << asym << "), symmetrized\n";
  }
  return sym;
}

}  // namespace

bool all_finite(const Mat& m) { return m.allFinite(); }

double min_eig_sym(const Mat& m) {
  if (m.size() == 0) return std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

void Dims::validate() const {
  if (n <= 0 || q <= 0 || m <= 0 || p <= 0) {
    throw InputError("dims must be strictly positive (n=" + std::to_string(n) + ", q=" + std::to_string(q) +
                     ", m=" + std::to_string(m) + ", p=" + std::to_string(p) + ")");
  }
}

ExplicitParams ExplicitParams::zeros(const Dims& d) {
  d.validate();
  ExplicitParams e;
  e.A = Mat::Zero(d.n, d.n);
  e.B1 = Mat::Zero(d.n, d.q);
  e.B2 = Mat::Zero(d.n, d.m);
  e.C1 = Mat::Zero(d.q, d.n);
  e.D11 = Mat::Zero(d.q, d.q);
  e.D12 = Mat::Zero(d.q, d.m);
  e.C2 = Mat::Zero(d.p, d.n);
  e.D21 = Mat::Zero(d.p, d.q);
  e.D22 = Mat::Zero(d.p, d.m);
  e.bx = Vec::Zero(d.n);
  e.bv = Vec::Zero(d.q);
  e.by = Vec::Zero(d.p);
  return e;
}

Dims ExplicitParams::dims() const {
  return Dims{static_cast<int>(A.rows()), static_cast<int>(D11.rows()), static_cast<int>(B2.cols()),
              static_cast<int>(C2.rows())};
}

void ExplicitParams::validate() const {
  const Dims d = dims();
  d.validate();
  expect_shape(A, d.n, d.n, "A");
  expect_shape(B1, d.n, d.q, "B1");
  expect_shape(B2, d.n, d.m, "B2");
  expect_shape(C1, d.q, d.n, "C1");
  expect_shape(D11, d.q, d.q, "D11");
  expect_shape(D12, d.q, d.m, "D12");
  expect_shape(C2, d.p, d.n, "C2");
  expect_shape(D21, d.p, d.q, "D21");
  expect_shape(D22, d.p, d.m, "D22");
  expect_shape(bx, d.n, 1, "b_x");
  expect_shape(bv, d.q, 1, "b_v");
  expect_shape(by, d.p, 1, "b_y");
  for (int i = 0; i < d.q; ++i) {
    for (int j = i; j < d.q; ++j) {
      if (D11(i, j) != 0.0) {
        throw InputError("D11 must be strictly lower-triangular; entry (" + std::to_string(i) + "," +
                         std::to_string(j) + ") is nonzero");
      }
    }
  }
}

double Activation::value(double v) const {
  switch (kind) {
    case ActivationKind::tanh:
      return std::tanh(v);
    case ActivationKind::relu:
      return v > 0.0 ? v : 0.0;
    case ActivationKind::logistic:
      return 1.0 / (1.0 + std::exp(-v));
  }
  return 0.0;
}

double Activation::slope(double v) const {
  switch (kind) {
    case ActivationKind::tanh: {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    }
    case ActivationKind::relu:
      return v > 0.0 ? 1.0 : 0.0;
    case ActivationKind::logistic: {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 - s);
    }
  }
  return 0.0;
}

std::string to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::tanh:
      return "tanh";
    case ActivationKind::relu:
      return "relu";
    case ActivationKind::logistic:
      return "logistic";
  }
  return "?";
}

ActivationKind activation_from_string(const std::string& s) {
  if (s == "tanh") return ActivationKind::tanh;
  if (s == "relu") return ActivationKind::relu;
  if (s == "logistic") return ActivationKind::logistic;
  throw InputError("unknown activation '" + s + "'");
}

std::string to_string(PropertyKind k) {
  switch (k) {
    case PropertyKind::l2_gain:
      return "l2_gain";
    case PropertyKind::passivity:
      return "passivity";
    case PropertyKind::input_passivity:
      return "input_passivity";
    case PropertyKind::output_passivity:
      return "output_passivity";
  }
  return "?";
}

PropertyKind property_from_string(const std::string& s) {
  if (s == "l2_gain") return PropertyKind::l2_gain;
  if (s == "passivity") return PropertyKind::passivity;
  if (s == "input_passivity") return PropertyKind::input_passivity;
  if (s == "output_passivity") return PropertyKind::output_passivity;
  throw InputError("unknown property '" + s + "'");
}

SupplyRate make_supply_rate(Mat Q, Mat S, Mat R, double delta) {
  const auto p = Q.rows();
  const auto m = R.rows();
  if (Q.cols() != p || R.cols() != m || S.rows() != m || S.cols() != p) {
    throw InputError("supply rate: Q must be p x p, R m x m, S m x p");
  }
  if (!all_finite(Q) || !all_finite(S) || !all_finite(R) || !std::isfinite(delta)) {
    throw InputError("supply rate: non-finite entry");
  }
  if (!(delta > 0.0)) throw InputError("supply rate: delta must be positive");

  SupplyRate sr;
  sr.Q = symmetrize_checked(Q, "Q");
  sr.R = symmetrize_checked(R, "R");
  sr.S = std::move(S);
  sr.delta = delta;

  const double qscale = std::max(1.0, sr.Q.cwiseAbs().maxCoeff());
  Eigen::SelfAdjointEigenSolver<Mat> qes(sr.Q, Eigen::EigenvaluesOnly);
  if (qes.eigenvalues().maxCoeff() > 1e-12 * qscale) {
    throw InputError("supply rate: Q must be negative semidefinite");
  }
  const Mat Qcal = sr.Q - delta * Mat::Identity(p, p);
  const Mat margin = sr.R - sr.S * Qcal.ldlt().solve(sr.S.transpose());
  if (!(min_eig_sym(margin) > 0.0)) {
    throw InputError("supply rate: R - S (Q - delta I)^-1 S' is not positive definite for delta=" +
                     std::to_string(delta));
  }
  return sr;
}

SupplyRate supply_rate_for(const IncrementalProperty& prop, int m, int p) {
  if (m <= 0 || p <= 0) throw InputError("supply_rate_for: m and p must be positive");
  const double x = prop.param;
  if (!std::isfinite(x)) throw InputError("supply_rate_for: non-finite parameter");
  const Mat Ip = Mat::Identity(p, p);
  const Mat Im = Mat::Identity(m, m);
  // Except for the L2 gain, every row has S proportional to an identity; a rank-deficient
  // S S' (m > p) leaves R - S Qcal^-1 S' singular.
  const auto need_square_ok = [&](const char* name) {
    if (m > p) {
      throw InputError(std::string("supply_rate_for: ") + name + " needs m <= p (got m=" + std::to_string(m) +
                       ", p=" + std::to_string(p) + ")");
    }
  };
  switch (prop.kind) {
    case PropertyKind::l2_gain:
      if (!(x > 0.0)) throw InputError("supply_rate_for: l2_gain requires gamma > 0");
      return make_supply_rate(-(1.0 / x) * Ip, Mat::Zero(m, p), x * Im, 1e-3);
    case PropertyKind::passivity:
      need_square_ok("passivity");
      return make_supply_rate(Mat::Zero(p, p), 0.5 * identity_slice(m, p), Mat::Zero(m, m), 1e-3);
    case PropertyKind::input_passivity: {
      if (x < 0.0) throw InputError("supply_rate_for: input_passivity requires nu >= 0");
      need_square_ok("input_passivity");
      const double delta = x > 0.0 ? 1.0 / (4.0 * x) : 1e-3;
      return make_supply_rate(Mat::Zero(p, p), identity_slice(m, p), -2.0 * x * Im, delta);
    }
    case PropertyKind::output_passivity:
      if (x < 0.0) throw InputError("supply_rate_for: output_passivity requires eps >= 0");
      need_square_ok("output_passivity");
      return make_supply_rate(-2.0 * x * Ip, identity_slice(m, p), Mat::Zero(m, m), 1e-3);
  }
  throw InputError("supply_rate_for: unknown property");
}

double supply_eval(const SupplyRate& sr, const Vec& du, const Vec& dy) {
  if (du.size() != sr.m() || dy.size() != sr.p()) throw InputError("supply_eval: dimension mismatch");
  return dy.dot(sr.Q * dy) + 2.0 * du.dot(sr.S * dy) + du.dot(sr.R * du);
}

void Certificate::validate() const {
  if (P.rows() != P.cols()) throw InputError("certificate: P must be square");
  if (!all_finite(P) || !lambda.allFinite()) throw InputError("certificate: non-finite entry");
  if (!(min_eig_sym(P) > 0.0)) throw InputError("certificate: P is not positive definite");
  if (lambda.size() > 0 && !(lambda.minCoeff() > 0.0)) throw InputError("certificate: Lambda must be positive");
}

double gamma_form(const Vec& lambda, const Vec& dv, const Vec& dw) {
  if (dv.size() != lambda.size() || dw.size() != lambda.size()) {
    throw InputError("gamma_form: dimension mismatch");
  }
  return 2.0 * dw.dot(lambda.cwiseProduct(dv - dw));
}

}  // namespace noderen
