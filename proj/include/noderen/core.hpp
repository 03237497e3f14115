#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace noderen {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: wrong dimensions, non-finite entries, violated invariants.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A construction step (factorization, inverse) failed numerically.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

/// Integration failure: step budget exhausted or state blew up.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double t_last) : Error(what), t_last_(t_last) {}
  double last_time() const { return t_last_; }

 private:
  double t_last_;
};

struct Dims {
  int n = 0;  // state
  int q = 0;  // nonlinearity channels
  int m = 0;  // input
  int p = 0;  // output

  void validate() const;
  bool operator==(const Dims&) const = default;
};

/// The affine part {A, B1, B2, C1, C2, D11, D12, D21, D22} plus biases {b_x, b_v, b_y}
/// of a NodeREN. D11 is strictly lower-triangular so the nonlinearity channel can be
/// resolved by forward substitution.
struct ExplicitParams {
  Mat A, B1, B2;
  Mat C1, D11, D12;
  Mat C2, D21, D22;
  Vec bx, bv, by;

  static ExplicitParams zeros(const Dims& d);

  Dims dims() const;
  /// Throws InputError on shape mismatch, non-finite entries, or a D11 entry
  /// on/above the diagonal.
  void validate() const;
};

enum class ActivationKind { tanh, relu, logistic };

/// Entrywise slope-restricted nonlinearity: 0 <= (s(y)-s(x))/(y-x) <= 1.
struct Activation {
  ActivationKind kind = ActivationKind::tanh;

  double value(double v) const;
  /// relu'(0) := 0.
  double slope(double v) const;
};

std::string to_string(ActivationKind k);
ActivationKind activation_from_string(const std::string& s);

/// Quadratic supply rate s(du, dy) = [dy; du]' [[Q, S'], [S, R]] [dy; du],
/// with delta the regularizer used by the IQC parametrization.
struct SupplyRate {
  Mat Q;  // p x p
  Mat S;  // m x p
  Mat R;  // m x m
  double delta = 1e-3;

  int m() const { return static_cast<int>(R.rows()); }
  int p() const { return static_cast<int>(Q.rows()); }
};

/// Builds a SupplyRate from raw blocks. Q and R are symmetrized; a warning is written
/// to std::clog when the relative asymmetry exceeds 1e-12. Throws InputError when
/// Q is not negative semidefinite or R - S (Q - delta I)^{-1} S' is not positive definite.
SupplyRate make_supply_rate(Mat Q, Mat S, Mat R, double delta);

enum class PropertyKind { l2_gain, passivity, input_passivity, output_passivity };

std::string to_string(PropertyKind k);
PropertyKind property_from_string(const std::string& s);

struct IncrementalProperty {
  PropertyKind kind = PropertyKind::l2_gain;
  double param = 1.0;  // gamma, nu or eps_op; ignored for passivity

  static IncrementalProperty l2_gain(double gamma) { return {PropertyKind::l2_gain, gamma}; }
  static IncrementalProperty passivity() { return {PropertyKind::passivity, 0.0}; }
  static IncrementalProperty input_passivity(double nu) { return {PropertyKind::input_passivity, nu}; }
  static IncrementalProperty output_passivity(double eps) { return {PropertyKind::output_passivity, eps}; }
};

/// Standard (Q, S, R) choices for the incremental L2 gain and the passivity family.
/// "I" blocks are identity slices when m != p.
SupplyRate supply_rate_for(const IncrementalProperty& prop, int m, int p);

double supply_eval(const SupplyRate& sr, const Vec& du, const Vec& dy);

/// Storage matrix P and diagonal multiplier Lambda (stored as its diagonal).
struct Certificate {
  Mat P;
  Vec lambda;

  Mat Lambda() const { return lambda.asDiagonal(); }
  void validate() const;
};

/// 2 dw' Lambda (dv - dw), nonnegative for slope-restricted increments.
double gamma_form(const Vec& lambda, const Vec& dv, const Vec& dw);

bool all_finite(const Mat& m);

/// Smallest eigenvalue of the symmetric part of `m`.
double min_eig_sym(const Mat& m);

}  // namespace noderen
