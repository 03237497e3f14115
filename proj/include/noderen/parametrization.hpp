#pragma once

#include "noderen/core.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace noderen {

/// Free parameters of a contracting NodeREN. Every finite value maps to a model
/// that satisfies the contraction LMI with the returned certificate.
struct DirectParamsC {
  Mat X;       // (n+q) x (n+q)
  Mat B2;      // n x m
  Mat C2;      // p x n
  Mat D12;     // q x m
  Mat D21;     // p x q
  Mat D22;     // p x m
  Vec b_tilde; // n + q + p
  Mat U;       // n x q
  Mat Y1;      // n x n
  Mat X_P;     // n x n
  double epsilon = 0.01;
  double epsilon_P = 0.01;
  double min_rate = 0.0;  // prescribed contraction rate (0 = plain contractivity)

  Dims dims() const;
};

/// Free parameters of an IQC-NodeREN for a given supply rate. D12 and D22 are derived.
struct DirectParamsIQC {
  Mat X_R;     // (n+q) x (n+q)
  Mat B2;      // n x m
  Mat C2;      // p x n
  Mat D21;     // p x q
  Vec b_tilde; // n + q + p
  Mat X3;      // s x s, s = max(p, m)
  Mat T;       // q x m
  Mat U;       // n x q
  Mat Y1;      // n x n
  Mat X_P;     // n x n
  double epsilon = 0.01;
  double epsilon_P = 0.01;

  Dims dims() const;
};

/// Values computed on the way from free parameters to the explicit model. The IQC-only
/// fields are empty in contractive mode.
struct ParamIntermediates {
  Mat H;  // symmetric, (n+q) x (n+q)
  Mat Y, W, Z;
  Mat Qcal, L_Q, L_R, M, F, F_tilde, R_tilde, Psi, T_tilde, V_mat;
  Mat cayley_inv;  // (I + M)^{-1}
  Mat R_tilde_inv;

  Mat H11(int n) const { return H.topLeftCorner(n, n); }
  Mat H12(int n) const { return H.topRightCorner(n, H.cols() - n); }
  Mat H22(int n) const { return H.bottomRightCorner(H.rows() - n, H.cols() - n); }
};

struct Realization {
  ExplicitParams params;
  Certificate cert;
  ParamIntermediates inter;
};

/// Top-left p x m block of (I - M)(I + M)^{-1}. For symmetric positive definite M the
/// result satisfies I - F'F > 0.
Mat cayley_contract(const Mat& M, int p, int m);

Realization contractive_from_direct(const DirectParamsC& theta);
Realization iqc_from_direct(const DirectParamsIQC& theta, const SupplyRate& sr);

/// Identity map with validation; the raw-parameter route used by G-NodeRENs.
ExplicitParams explicit_from_general(ExplicitParams raw);

// ---------------------------------------------------------------------------
// Flat parameter vectors

enum class Mode { contractive, iqc, general };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct ParamBlock {
  std::string name;
  int rows = 0;
  int cols = 0;
  int offset = 0;

  int size() const { return rows * cols; }
};

/// Named row-major blocks of a flat free-parameter vector.
class ParamLayout {
 public:
  static ParamLayout for_mode(Mode mode, const Dims& d);

  int size() const { return size_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(const std::string& name) const;
  bool has(const std::string& name) const;

  Mat get(const Vec& theta, const std::string& name) const;
  void set(Vec& theta, const std::string& name, const Mat& value) const;
  /// Qualified coordinate name such as "X[2,3]".
  std::string coordinate_name(int index) const;

 private:
  void add(std::string name, int rows, int cols);

  std::vector<ParamBlock> blocks_;
  int size_ = 0;
};

struct Hyper {
  double epsilon = 0.01;
  double epsilon_P = 0.01;
  double min_rate = 0.0;
};

/// A trainable NodeREN: mode, shapes, activation and the flat free parameters.
struct Model {
  Mode mode = Mode::contractive;
  Dims dims;
  Activation act;
  Hyper hyper;
  std::optional<SupplyRate> supply;  // iqc only
  Vec theta;

  ParamLayout layout() const { return ParamLayout::for_mode(mode, dims); }
  /// Explicit parameters (and, except in general mode, the certificate).
  Realization realize() const;
};

DirectParamsC unpack_contractive(const Dims& d, const Vec& theta, const Hyper& h);
DirectParamsIQC unpack_iqc(const Dims& d, const Vec& theta, const Hyper& h);
ExplicitParams unpack_general(const Dims& d, const Vec& theta);
Vec pack(const DirectParamsC& theta);
Vec pack(const DirectParamsIQC& theta);
Vec pack(const ExplicitParams& raw);

/// Gaussian initialization with standard deviation 1/sqrt(n+q) for every matrix block and
/// zero biases.
Model init_model(Mode mode, const Dims& d, Activation act, const Hyper& h, std::optional<SupplyRate> supply,
                 std::uint64_t seed);

/// Vector-Jacobian product of the free-parameter map: given dLoss/d(explicit params),
/// returns dLoss/d(theta). `real` must be model.realize().
Vec pullback(const Model& model, const Realization& real, const ExplicitParams& grad_explicit);

/// Flat index range of the bias vector b_tilde in the layout.
ParamBlock bias_block(const ParamLayout& layout);

}  // namespace noderen
