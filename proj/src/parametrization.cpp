#include "noderen/parametrization.hpp"

#include <cmath>
#include <random>

namespace noderen {

namespace {

void require_finite(const Mat& m, const char* name) {
  if (!m.allFinite()) throw InputError(std::string(name) + ": non-finite entry");
}

void require_shape(const Mat& m, Eigen::Index r, Eigen::Index c, const char* name) {
  if (m.rows() != r || m.cols() != c) {
    throw InputError(std::string(name) + ": expected " + std::to_string(r) + "x" + std::to_string(c) + ", got " +
                     std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  require_finite(m, name);
}

Mat gram_plus(const Mat& X, double eps) {
  Mat G = X.transpose() * X;
  G.diagonal().array() += eps;
  return 0.5 * (G + G.transpose());
}

Eigen::LLT<Mat> checked_llt(const Mat& A, const char* name) {
  Eigen::LLT<Mat> llt(A);
  if (llt.info() != Eigen::Success) {
    throw ConstructionError(std::string(name) + " is not numerically positive definite (Cholesky failed)");
  }
  return llt;
}

// Shared tail of both constructions: H (symmetric, PD) and P -> explicit A, B1, C1, D11
// and the certificate.
struct Assembled {
  Mat Y, W, Z, A, B1, C1, D11;
  Vec lambda;
};

Assembled assemble_from_H(const Mat& H, const Mat& P, const Eigen::LLT<Mat>& P_llt, const Mat& U, const Mat& Y1,
                          double min_rate, int n, int q) {
  Assembled out;
  const Mat H11 = H.topLeftCorner(n, n);
  const Mat H12 = H.topRightCorner(n, q);
  out.Y = -0.5 * (H11 + 2.0 * min_rate * P + Y1 - Y1.transpose());
  out.W = H.bottomRightCorner(q, q);
  out.Z = -H12 - U;
  out.lambda = 0.5 * out.W.diagonal();
  if (!(out.lambda.minCoeff() > 0.0)) throw ConstructionError("W has a non-positive diagonal entry");

  out.D11 = Mat::Zero(q, q);
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < i; ++j) out.D11(i, j) = -out.W(i, j) / out.lambda(i);
  }
  out.C1 = out.lambda.cwiseInverse().asDiagonal() * U.transpose();
  out.A = P_llt.solve(out.Y);
  out.B1 = P_llt.solve(out.Z);
  return out;
}

void check_eps(double eps, double eps_P) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw InputError("epsilon must be positive and finite");
  if (!(eps_P > 0.0) || !std::isfinite(eps_P)) throw InputError("epsilon_P must be positive and finite");
}

}  // namespace

Dims DirectParamsC::dims() const {
  return Dims{static_cast<int>(Y1.rows()), static_cast<int>(U.cols()), static_cast<int>(B2.cols()),
              static_cast<int>(C2.rows())};
}

Dims DirectParamsIQC::dims() const {
  return Dims{static_cast<int>(Y1.rows()), static_cast<int>(U.cols()), static_cast<int>(B2.cols()),
              static_cast<int>(C2.rows())};
}

Mat cayley_contract(const Mat& M, int p, int m) {
  const auto s = M.rows();
  if (M.cols() != s) throw InputError("cayley_contract: M must be square");
  if (p <= 0 || m <= 0 || p > s || m > s) throw InputError("cayley_contract: need 0 < p, m <= size of M");
  require_finite(M, "M");
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ConstructionError("cayley_contract: M is not symmetric");
  }
  if (!(min_eig_sym(M) > 0.0)) throw ConstructionError("cayley_contract: M is not positive definite");
  const Mat I = Mat::Identity(s, s);
  // (I - M)(I + M)^{-1} = (I + M)^{-1}(I - M) since the factors commute; (I + M) is SPD.
  const Mat F = (I + M).llt().solve(I - M);
  return F.topLeftCorner(p, m);
}

Realization contractive_from_direct(const DirectParamsC& th) {
  const Dims d = th.dims();
  d.validate();
  const int n = d.n, q = d.q, m = d.m, p = d.p;
  require_shape(th.X, n + q, n + q, "X");
  require_shape(th.B2, n, m, "B2");
  require_shape(th.C2, p, n, "C2");
  require_shape(th.D12, q, m, "D12");
  require_shape(th.D21, p, q, "D21");
  require_shape(th.D22, p, m, "D22");
  require_shape(th.b_tilde, n + q + p, 1, "b_tilde");
  require_shape(th.U, n, q, "U");
  require_shape(th.Y1, n, n, "Y1");
  require_shape(th.X_P, n, n, "X_P");
  check_eps(th.epsilon, th.epsilon_P);
  if (!(th.min_rate >= 0.0) || !std::isfinite(th.min_rate)) throw InputError("min_rate must be >= 0");

  Realization out;
  auto& I = out.inter;
  I.H = gram_plus(th.X, th.epsilon);
  const Mat P = gram_plus(th.X_P, th.epsilon_P);
  const auto P_llt = checked_llt(P, "P");

  Assembled a = assemble_from_H(I.H, P, P_llt, th.U, th.Y1, th.min_rate, n, q);
  I.Y = a.Y;
  I.W = a.W;
  I.Z = a.Z;

  ExplicitParams& e = out.params;
  e.A = std::move(a.A);
  e.B1 = std::move(a.B1);
  e.B2 = th.B2;
  e.C1 = std::move(a.C1);
  e.D11 = std::move(a.D11);
  e.D12 = th.D12;
  e.C2 = th.C2;
  e.D21 = th.D21;
  e.D22 = th.D22;
  e.bx = th.b_tilde.segment(0, n);
  e.bv = th.b_tilde.segment(n, q);
  e.by = th.b_tilde.segment(n + q, p);

  out.cert.P = P;
  out.cert.lambda = a.lambda;
  return out;
}

Realization iqc_from_direct(const DirectParamsIQC& th, const SupplyRate& sr) {
  const Dims d = th.dims();
  d.validate();
  const int n = d.n, q = d.q, m = d.m, p = d.p;
  const int s = std::max(p, m);
  require_shape(th.X_R, n + q, n + q, "X_R");
  require_shape(th.B2, n, m, "B2");
  require_shape(th.C2, p, n, "C2");
  require_shape(th.D21, p, q, "D21");
  require_shape(th.b_tilde, n + q + p, 1, "b_tilde");
  require_shape(th.X3, s, s, "X3");
  require_shape(th.T, q, m, "T");
  require_shape(th.U, n, q, "U");
  require_shape(th.Y1, n, n, "Y1");
  require_shape(th.X_P, n, n, "X_P");
  check_eps(th.epsilon, th.epsilon_P);
  if (sr.m() != m || sr.p() != p) throw InputError("iqc_from_direct: supply rate dimensions do not match model");

  Realization out;
  auto& I = out.inter;
  const Mat& Q = sr.Q;
  const Mat& S = sr.S;
  const Mat& R = sr.R;

  I.Qcal = Q - sr.delta * Mat::Identity(p, p);
  const auto negQ_llt = checked_llt(-I.Qcal, "-(Q - delta I)");
  I.L_Q = negQ_llt.matrixU();
  // R - S Qcal^{-1} S' = R + S (-Qcal)^{-1} S'
  const Mat R_margin = R + S * negQ_llt.solve(S.transpose());
  const auto R_llt = checked_llt(0.5 * (R_margin + R_margin.transpose()), "R - S (Q - delta I)^-1 S'");
  I.L_R = R_llt.matrixU();

  I.M = gram_plus(th.X3, th.epsilon);
  const Mat Is = Mat::Identity(s, s);
  I.cayley_inv = (Is + I.M).llt().solve(Is);
  I.F = (Is - I.M) * I.cayley_inv;
  I.F_tilde = I.F.topLeftCorner(p, m);

  // D22 = -Qcal^{-1} S' + L_Q^{-1} F~ L_R
  Mat D22 = negQ_llt.solve(S.transpose());
  D22 += I.L_Q.triangularView<Eigen::Upper>().solve(I.F_tilde * I.L_R);

  I.R_tilde = R + S * D22 + D22.transpose() * S.transpose() + D22.transpose() * Q * D22;
  I.R_tilde = 0.5 * (I.R_tilde + I.R_tilde.transpose());
  const auto Rt_llt = checked_llt(I.R_tilde, "R_tilde = R + S D22 + D22' S' + D22' Q D22");
  I.R_tilde_inv = Rt_llt.solve(Mat::Identity(m, m));

  const Mat P = gram_plus(th.X_P, th.epsilon_P);
  const auto P_llt = checked_llt(P, "P");

  const Mat N = S.transpose() + Q * D22;  // p x m
  I.T_tilde = -th.T + th.D21.transpose() * N;
  I.V_mat = -P * th.B2 + th.C2.transpose() * N;

  Mat G(n + q, m);
  G << I.V_mat, I.T_tilde;
  Mat C(n + q, p);
  C << th.C2.transpose(), th.D21.transpose();
  I.Psi = G * Rt_llt.solve(G.transpose()) - C * Q * C.transpose();
  I.Psi = 0.5 * (I.Psi + I.Psi.transpose());

  I.H = gram_plus(th.X_R, th.epsilon) + I.Psi;
  I.H = 0.5 * (I.H + I.H.transpose());

  Assembled a = assemble_from_H(I.H, P, P_llt, th.U, th.Y1, 0.0, n, q);
  I.Y = a.Y;
  I.W = a.W;
  I.Z = a.Z;

  ExplicitParams& e = out.params;
  e.A = std::move(a.A);
  e.B1 = std::move(a.B1);
  e.B2 = th.B2;
  e.C1 = std::move(a.C1);
  e.D11 = std::move(a.D11);
  e.D12 = a.lambda.cwiseInverse().asDiagonal() * th.T;
  e.C2 = th.C2;
  e.D21 = th.D21;
  e.D22 = std::move(D22);
  e.bx = th.b_tilde.segment(0, n);
  e.bv = th.b_tilde.segment(n, q);
  e.by = th.b_tilde.segment(n + q, p);

  out.cert.P = P;
  out.cert.lambda = a.lambda;
  return out;
}

ExplicitParams explicit_from_general(ExplicitParams raw) {
  raw.validate();
  return raw;
}

// ---------------------------------------------------------------------------

std::string to_string(Mode m) {
  switch (m) {
    case Mode::contractive:
      return "contractive";
    case Mode::iqc:
      return "iqc";
    case Mode::general:
      return "general";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "contractive") return Mode::contractive;
  if (s == "iqc") return Mode::iqc;
  if (s == "general") return Mode::general;
  throw InputError("unknown mode '" + s + "'");
}

void ParamLayout::add(std::string name, int rows, int cols) {
  blocks_.push_back(ParamBlock{std::move(name), rows, cols, size_});
  size_ += rows * cols;
}

ParamLayout ParamLayout::for_mode(Mode mode, const Dims& d) {
  d.validate();
  const int n = d.n, q = d.q, m = d.m, p = d.p;
  ParamLayout L;
  switch (mode) {
    case Mode::contractive:
      L.add("X", n + q, n + q);
      L.add("B2", n, m);
      L.add("C2", p, n);
      L.add("D12", q, m);
      L.add("D21", p, q);
      L.add("D22", p, m);
      L.add("b_tilde", n + q + p, 1);
      L.add("U", n, q);
      L.add("Y1", n, n);
      L.add("X_P", n, n);
      break;
    case Mode::iqc:
      L.add("X_R", n + q, n + q);
      L.add("B2", n, m);
      L.add("C2", p, n);
      L.add("D21", p, q);
      L.add("b_tilde", n + q + p, 1);
      L.add("X3", std::max(p, m), std::max(p, m));
      L.add("T", q, m);
      L.add("U", n, q);
      L.add("Y1", n, n);
      L.add("X_P", n, n);
      break;
    case Mode::general:
      L.add("A", n, n);
      L.add("B1", n, q);
      L.add("B2", n, m);
      L.add("C1", q, n);
      L.add("D11", q, q);
      L.add("D12", q, m);
      L.add("C2", p, n);
      L.add("D21", p, q);
      L.add("D22", p, m);
      L.add("b_tilde", n + q + p, 1);
      break;
  }
  return L;
}

const ParamBlock& ParamLayout::block(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw InputError("parameter layout has no block '" + name + "'");
}

bool ParamLayout::has(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return true;
  }
  return false;
}

Mat ParamLayout::get(const Vec& theta, const std::string& name) const {
  if (theta.size() != size_) throw InputError("parameter vector has wrong length");
  const auto& b = block(name);
  Mat out(b.rows, b.cols);
  for (int i = 0; i < b.rows; ++i) {
    for (int j = 0; j < b.cols; ++j) out(i, j) = theta(b.offset + i * b.cols + j);
  }
  return out;
}

void ParamLayout::set(Vec& theta, const std::string& name, const Mat& value) const {
  if (theta.size() != size_) throw InputError("parameter vector has wrong length");
  const auto& b = block(name);
  if (value.rows() != b.rows || value.cols() != b.cols) throw InputError("block '" + name + "' has wrong shape");
  for (int i = 0; i < b.rows; ++i) {
    for (int j = 0; j < b.cols; ++j) theta(b.offset + i * b.cols + j) = value(i, j);
  }
}

std::string ParamLayout::coordinate_name(int index) const {
  for (const auto& b : blocks_) {
    if (index >= b.offset && index < b.offset + b.size()) {
      const int k = index - b.offset;
      return b.name + "[" + std::to_string(k / b.cols) + "," + std::to_string(k % b.cols) + "]";
    }
  }
  throw InputError("parameter index out of range");
}

ParamBlock bias_block(const ParamLayout& layout) { return layout.block("b_tilde"); }

DirectParamsC unpack_contractive(const Dims& d, const Vec& theta, const Hyper& h) {
  const auto L = ParamLayout::for_mode(Mode::contractive, d);
  DirectParamsC th;
  th.X = L.get(theta, "X");
  th.B2 = L.get(theta, "B2");
  th.C2 = L.get(theta, "C2");
  th.D12 = L.get(theta, "D12");
  th.D21 = L.get(theta, "D21");
  th.D22 = L.get(theta, "D22");
  th.b_tilde = L.get(theta, "b_tilde");
  th.U = L.get(theta, "U");
  th.Y1 = L.get(theta, "Y1");
  th.X_P = L.get(theta, "X_P");
  th.epsilon = h.epsilon;
  th.epsilon_P = h.epsilon_P;
  th.min_rate = h.min_rate;
  return th;
}

DirectParamsIQC unpack_iqc(const Dims& d, const Vec& theta, const Hyper& h) {
  const auto L = ParamLayout::for_mode(Mode::iqc, d);
  DirectParamsIQC th;
  th.X_R = L.get(theta, "X_R");
  th.B2 = L.get(theta, "B2");
  th.C2 = L.get(theta, "C2");
  th.D21 = L.get(theta, "D21");
  th.b_tilde = L.get(theta, "b_tilde");
  th.X3 = L.get(theta, "X3");
  th.T = L.get(theta, "T");
  th.U = L.get(theta, "U");
  th.Y1 = L.get(theta, "Y1");
  th.X_P = L.get(theta, "X_P");
  th.epsilon = h.epsilon;
  th.epsilon_P = h.epsilon_P;
  return th;
}

ExplicitParams unpack_general(const Dims& d, const Vec& theta) {
  const auto L = ParamLayout::for_mode(Mode::general, d);
  ExplicitParams e;
  e.A = L.get(theta, "A");
  e.B1 = L.get(theta, "B1");
  e.B2 = L.get(theta, "B2");
  e.C1 = L.get(theta, "C1");
  e.D11 = L.get(theta, "D11").triangularView<Eigen::StrictlyLower>();
  e.D12 = L.get(theta, "D12");
  e.C2 = L.get(theta, "C2");
  e.D21 = L.get(theta, "D21");
  e.D22 = L.get(theta, "D22");
  const Vec b = L.get(theta, "b_tilde");
  e.bx = b.segment(0, d.n);
  e.bv = b.segment(d.n, d.q);
  e.by = b.segment(d.n + d.q, d.p);
  return e;
}

Vec pack(const DirectParamsC& th) {
  const auto L = ParamLayout::for_mode(Mode::contractive, th.dims());
  Vec theta = Vec::Zero(L.size());
  L.set(theta, "X", th.X);
  L.set(theta, "B2", th.B2);
  L.set(theta, "C2", th.C2);
  L.set(theta, "D12", th.D12);
  L.set(theta, "D21", th.D21);
  L.set(theta, "D22", th.D22);
  L.set(theta, "b_tilde", th.b_tilde);
  L.set(theta, "U", th.U);
  L.set(theta, "Y1", th.Y1);
  L.set(theta, "X_P", th.X_P);
  return theta;
}

Vec pack(const DirectParamsIQC& th) {
  const auto L = ParamLayout::for_mode(Mode::iqc, th.dims());
  Vec theta = Vec::Zero(L.size());
  L.set(theta, "X_R", th.X_R);
  L.set(theta, "B2", th.B2);
  L.set(theta, "C2", th.C2);
  L.set(theta, "D21", th.D21);
  L.set(theta, "b_tilde", th.b_tilde);
  L.set(theta, "X3", th.X3);
  L.set(theta, "T", th.T);
  L.set(theta, "U", th.U);
  L.set(theta, "Y1", th.Y1);
  L.set(theta, "X_P", th.X_P);
  return theta;
}

Vec pack(const ExplicitParams& e) {
  const Dims d = e.dims();
  const auto L = ParamLayout::for_mode(Mode::general, d);
  Vec theta = Vec::Zero(L.size());
  L.set(theta, "A", e.A);
  L.set(theta, "B1", e.B1);
  L.set(theta, "B2", e.B2);
  L.set(theta, "C1", e.C1);
  L.set(theta, "D11", e.D11);
  L.set(theta, "D12", e.D12);
  L.set(theta, "C2", e.C2);
  L.set(theta, "D21", e.D21);
  L.set(theta, "D22", e.D22);
  Vec b(d.n + d.q + d.p);
  b << e.bx, e.bv, e.by;
  L.set(theta, "b_tilde", b);
  return theta;
}

Realization Model::realize() const {
  if (theta.size() != layout().size()) throw InputError("model: parameter vector has wrong length");
  switch (mode) {
    case Mode::contractive:
      return contractive_from_direct(unpack_contractive(dims, theta, hyper));
    case Mode::iqc:
      if (!supply) throw InputError("model: iqc mode requires a supply rate");
      return iqc_from_direct(unpack_iqc(dims, theta, hyper), *supply);
    case Mode::general: {
      Realization r;
      r.params = explicit_from_general(unpack_general(dims, theta));
      return r;
    }
  }
  throw InputError("model: unknown mode");
}

Model init_model(Mode mode, const Dims& d, Activation act, const Hyper& h, std::optional<SupplyRate> supply,
                 std::uint64_t seed) {
  Model model;
  model.mode = mode;
  model.dims = d;
  model.act = act;
  model.hyper = h;
  model.supply = std::move(supply);
  if (mode == Mode::iqc && !model.supply) throw InputError("init_model: iqc mode requires a supply rate");
  const auto L = model.layout();
  model.theta = Vec::Zero(L.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d.n + d.q)));
  for (const auto& b : L.blocks()) {
    if (b.name == "b_tilde") continue;
    for (int k = 0; k < b.size(); ++k) model.theta(b.offset + k) = normal(rng);
  }
  if (mode == Mode::general) {
    Mat D11 = L.get(model.theta, "D11");
    L.set(model.theta, "D11", D11.triangularView<Eigen::StrictlyLower>().toDenseMatrix());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Reverse-mode sensitivities of the free-parameter maps.

namespace {

struct HTailGrad {
  Mat H;  // symmetric adjoint of H
  Mat P;  // adjoint of P (not symmetrized)
  Mat U;
  Mat Y1;
  Vec lambda;  // adjoint accumulated into Lambda from C1, D11 (and D12 in IQC mode)
};

// Adjoint of assemble_from_H. Inputs: adjoints of A, B1, C1, D11 and any extra adjoint
// already accumulated on lambda.
HTailGrad pullback_tail(const ExplicitParams& e, const Certificate& cert, const Eigen::LLT<Mat>& P_llt,
                        const ExplicitParams& g, Vec lambda_bar, double min_rate) {
  const int n = static_cast<int>(e.A.rows());
  const int q = static_cast<int>(e.D11.rows());
  const Vec& lam = cert.lambda;
  HTailGrad out;

  // A = P^{-1} Y, B1 = P^{-1} Z
  const Mat Y_bar = P_llt.solve(g.A);
  const Mat Z_bar = P_llt.solve(g.B1);
  out.P = -(Y_bar * e.A.transpose() + Z_bar * e.B1.transpose());

  // C1 = Lambda^{-1} U'
  out.U = (lam.cwiseInverse().asDiagonal() * g.C1).transpose();
  lambda_bar -= (g.C1.cwiseProduct(e.C1)).rowwise().sum().cwiseQuotient(lam);

  // D11 = -Lambda^{-1} W_low
  Mat W_bar = Mat::Zero(q, q);
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < i; ++j) {
      W_bar(i, j) = -g.D11(i, j) / lam(i);
      lambda_bar(i) -= g.D11(i, j) * e.D11(i, j) / lam(i);
    }
  }
  // Lambda = diag(W) / 2
  for (int i = 0; i < q; ++i) W_bar(i, i) += 0.5 * lambda_bar(i);

  // Y = -(H11 + 2 w P + Y1 - Y1')/2, W = H22, Z = -H12 - U
  Mat H_bar = Mat::Zero(n + q, n + q);
  H_bar.topLeftCorner(n, n) = -0.5 * Y_bar;
  H_bar.topRightCorner(n, q) = -Z_bar;
  H_bar.bottomRightCorner(q, q) = W_bar;
  out.P -= min_rate * Y_bar;
  out.U -= Z_bar;
  out.Y1 = -0.5 * (Y_bar - Y_bar.transpose());
  out.H = 0.5 * (H_bar + H_bar.transpose());
  out.lambda = lambda_bar;
  return out;
}

}  // namespace

Vec pullback(const Model& model, const Realization& real, const ExplicitParams& g) {
  const Dims& d = model.dims;
  const int n = d.n, q = d.q, p = d.p;
  const auto L = model.layout();
  Vec grad = Vec::Zero(L.size());
  const ExplicitParams& e = real.params;

  Vec b_bar(n + q + p);
  b_bar << g.bx, g.bv, g.by;

  if (model.mode == Mode::general) {
    L.set(grad, "A", g.A);
    L.set(grad, "B1", g.B1);
    L.set(grad, "B2", g.B2);
    L.set(grad, "C1", g.C1);
    L.set(grad, "D11", g.D11.triangularView<Eigen::StrictlyLower>().toDenseMatrix());
    L.set(grad, "D12", g.D12);
    L.set(grad, "C2", g.C2);
    L.set(grad, "D21", g.D21);
    L.set(grad, "D22", g.D22);
    L.set(grad, "b_tilde", b_bar);
    return grad;
  }

  const auto& I = real.inter;
  const auto P_llt = checked_llt(real.cert.P, "P");

  if (model.mode == Mode::contractive) {
    const auto th = unpack_contractive(d, model.theta, model.hyper);
    const HTailGrad t = pullback_tail(e, real.cert, P_llt, g, Vec::Zero(q), model.hyper.min_rate);
    L.set(grad, "X", 2.0 * th.X * t.H);
    L.set(grad, "X_P", th.X_P * (t.P + t.P.transpose()));
    L.set(grad, "U", t.U);
    L.set(grad, "Y1", t.Y1);
    L.set(grad, "B2", g.B2);
    L.set(grad, "C2", g.C2);
    L.set(grad, "D12", g.D12);
    L.set(grad, "D21", g.D21);
    L.set(grad, "D22", g.D22);
    L.set(grad, "b_tilde", b_bar);
    return grad;
  }

  // IQC mode
  const auto th = unpack_iqc(d, model.theta, model.hyper);
  const SupplyRate& sr = *model.supply;
  const Mat& Q = sr.Q;
  const Mat& S = sr.S;
  const Vec& lam = real.cert.lambda;

  // D12 = Lambda^{-1} T
  Mat T_bar = lam.cwiseInverse().asDiagonal() * g.D12;
  Vec lambda_bar = -(g.D12.cwiseProduct(e.D12)).rowwise().sum().cwiseQuotient(lam);

  HTailGrad t = pullback_tail(e, real.cert, P_llt, g, lambda_bar, 0.0);
  Mat P_bar = t.P;
  Mat B2_bar = g.B2;
  Mat C2_bar = g.C2;
  Mat D21_bar = g.D21;
  Mat D22_bar = g.D22;

  // H = X_R' X_R + eps I + Psi
  const Mat& Psi_bar = t.H;
  Mat G(n + q, d.m);
  G << I.V_mat, I.T_tilde;
  Mat C(n + q, p);
  C << th.C2.transpose(), th.D21.transpose();
  const Mat& K = I.R_tilde_inv;

  // Psi = G K G' - C Q C'
  const Mat G_bar = 2.0 * Psi_bar * G * K;
  const Mat K_bar = G.transpose() * Psi_bar * G;
  const Mat Rt_bar = -K * K_bar * K;
  const Mat C_bar = -2.0 * Psi_bar * C * Q;
  C2_bar += C_bar.topRows(n).transpose();
  D21_bar += C_bar.bottomRows(q).transpose();

  // V = -P B2 + C2' N,  T~ = -T + D21' N,  N = S' + Q D22
  const Mat V_bar = G_bar.topRows(n);
  const Mat Tt_bar = G_bar.bottomRows(q);
  const Mat N = S.transpose() + Q * e.D22;
  P_bar -= V_bar * th.B2.transpose();
  B2_bar -= real.cert.P * V_bar;
  C2_bar += N * V_bar.transpose();
  Mat N_bar = th.C2 * V_bar;
  T_bar -= Tt_bar;
  D21_bar += N * Tt_bar.transpose();
  N_bar += th.D21 * Tt_bar;
  D22_bar += Q * N_bar;

  // R~ = R + S D22 + D22' S' + D22' Q D22
  const Mat Rt_sym = Rt_bar + Rt_bar.transpose();
  D22_bar += S.transpose() * Rt_sym + Q * e.D22 * Rt_sym;

  // D22 = const + L_Q^{-1} F~ L_R
  const Mat Ft_bar =
      I.L_Q.transpose().triangularView<Eigen::Lower>().solve(D22_bar) * I.L_R.transpose();
  const int s = static_cast<int>(I.M.rows());
  Mat F_bar = Mat::Zero(s, s);
  F_bar.topLeftCorner(p, d.m) = Ft_bar;
  // F = 2 (I + M)^{-1} - I
  const Mat M_bar = -2.0 * I.cayley_inv * F_bar * I.cayley_inv;

  L.set(grad, "X_R", 2.0 * th.X_R * t.H);
  L.set(grad, "X3", th.X3 * (M_bar + M_bar.transpose()));
  L.set(grad, "X_P", th.X_P * (P_bar + P_bar.transpose()));
  L.set(grad, "U", t.U);
  L.set(grad, "Y1", t.Y1);
  L.set(grad, "T", T_bar);
  L.set(grad, "B2", B2_bar);
  L.set(grad, "C2", C2_bar);
  L.set(grad, "D21", D21_bar);
  L.set(grad, "b_tilde", b_bar);
  return grad;
}

}  // namespace noderen
