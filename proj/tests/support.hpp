#pragma once

#include "noderen/core.hpp"
#include "noderen/parametrization.hpp"

#include <random>

namespace testing {

using noderen::Mat;
using noderen::Vec;

inline Mat randn(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

inline Vec randv(std::mt19937_64& rng, int n, double scale = 1.0) { return randn(rng, n, 1, scale).col(0); }

inline Mat rand_spd(std::mt19937_64& rng, int s, double floor = 0.1) {
  const Mat X = randn(rng, s, s);
  return X.transpose() * X + floor * Mat::Identity(s, s);
}

/// Random explicit parameters with a strictly lower-triangular D11.
inline noderen::ExplicitParams random_explicit(std::mt19937_64& rng, const noderen::Dims& d, double scale = 0.5) {
  noderen::ExplicitParams e;
  e.A = randn(rng, d.n, d.n, scale);
  e.B1 = randn(rng, d.n, d.q, scale);
  e.B2 = randn(rng, d.n, d.m, scale);
  e.C1 = randn(rng, d.q, d.n, scale);
  e.D11 = randn(rng, d.q, d.q, scale).triangularView<Eigen::StrictlyLower>();
  e.D12 = randn(rng, d.q, d.m, scale);
  e.C2 = randn(rng, d.p, d.n, scale);
  e.D21 = randn(rng, d.p, d.q, scale);
  e.D22 = randn(rng, d.p, d.m, scale);
  e.bx = randv(rng, d.n, scale);
  e.bv = randv(rng, d.q, scale);
  e.by = randv(rng, d.p, scale);
  return e;
}

/// Model with every free parameter drawn N(0, scale^2), biases included.
inline noderen::Model random_model(std::mt19937_64& rng, noderen::Mode mode, const noderen::Dims& d,
                                   std::optional<noderen::SupplyRate> sr = std::nullopt, double scale = 1.0) {
  noderen::Model m = noderen::init_model(mode, d, {}, {}, std::move(sr), rng());
  m.theta = randv(rng, static_cast<int>(m.theta.size()), scale);
  if (mode == noderen::Mode::general) {
    const auto L = m.layout();
    L.set(m.theta, "D11", Mat(L.get(m.theta, "D11").triangularView<Eigen::StrictlyLower>()));
  }
  return m;
}

inline double max_abs(const Mat& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace testing
