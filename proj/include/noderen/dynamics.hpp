#pragma once

#include "noderen/core.hpp"

namespace noderen {

/// Everything computed by one evaluation of the NodeREN at (x, u).
struct StateEval {
  Vec x, u;
  Vec v, w;  // pre- and post-activation
  Vec xdot;
  Vec y;
};

struct ChannelSolution {
  Vec v;
  Vec w;
};

/// Resolves v = C1 x + D11 w + D12 u + b_v, w = act(v) row by row; exact because D11
/// is strictly lower-triangular.
ChannelSolution solve_w(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u);

/// xdot = A x + B1 w + B2 u + b_x and y = C2 x + D21 w + D22 u + b_y.
StateEval vector_field(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u);

/// In-place state derivative, for integrator callbacks.
void state_derivative(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u, Vec& xdot);

Vec output_map(const ExplicitParams& e, const Activation& act, const Vec& x, const Vec& u);

/// Global Lipschitz constant in x of the state derivative:
/// kappa_r = |C1[r,:]| + sum_{l<r} |D11[r,l]| kappa_l, kappa_tot = |A|_2 + sum_r |B1[:,r]| kappa_r.
/// The spectral norm |A|_2 comes from power iteration on A'A (50 iterations, rel. tol 1e-8),
/// inflated by the final relative change so it stays an upper bound.
double lipschitz_bound(const ExplicitParams& e);

/// Per-channel constants kappa_r.
Vec channel_lipschitz(const ExplicitParams& e);

/// Upper bound on the largest singular value: power iteration on A'A (50 iterations,
/// relative tolerance 1e-8), certified by Cholesky of b^2 I - A'A and capped by Frobenius.
double spectral_norm_bound(const Mat& A);

/// Reverse-mode sensitivity of one evaluation. Given adjoints of xdot and y, accumulates
/// parameter adjoints into `grad` and returns the adjoint of x (and of u via `u_bar`).
Vec vector_field_vjp(const ExplicitParams& e, const Activation& act, const ChannelSolution& ch, const Vec& x,
                     const Vec& u, const Vec& xdot_bar, const Vec& y_bar, ExplicitParams& grad);

}  // namespace noderen
