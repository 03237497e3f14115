#pragma once

#include "noderen/dynamics.hpp"
#include "noderen/integrators.hpp"
#include "noderen/parametrization.hpp"

#include <span>
#include <vector>

namespace noderen {

/// One training sequence: initial state, constant input, and measurements y(t_j) ~ z_j.
struct Sequence {
  Vec x0;
  Vec u;
  std::vector<double> times;
  std::vector<Vec> targets;
};

struct LossReport {
  double value = 0.0;
  Vec grad;  // empty for value-only evaluations
  std::vector<double> per_experiment;
};

/// Raised when simulating one sequence fails; carries the sequence index.
class ExperimentError : public NumericalError {
 public:
  ExperimentError(std::size_t index, const NumericalError& cause)
      : NumericalError("experiment " + std::to_string(index) + ": " + cause.what(), cause.last_time()),
        index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// Stored forward pass of one sequence along the fixed-step grid.
struct GradTape {
  struct Stage {
    Vec state;
    ChannelSolution channels;
  };
  struct Step {
    double t = 0.0;
    double h = 0.0;
    Vec x;  // state at the start of the step
    std::vector<Stage> stages;
  };
  struct Sample {
    std::size_t after_step = 0;  // sample taken at the end of steps[after_step - 1]; 0 = at t0
    Vec x;
    ChannelSolution channels;
    Vec y;
  };
  std::vector<Step> steps;
  std::vector<Sample> samples;
  Vec x_final;
};

/// (1/N) sum_i (1/n_i) sum_j |y(t_j) - z_j|^2 along `cfg` (any method).
LossReport mse_loss(const ExplicitParams& e, const Activation& act, std::span<const Sequence> data,
                    const SolverConfig& cfg);
LossReport mse_loss(const Model& model, std::span<const Sequence> data, const SolverConfig& cfg);

GradTape build_tape(const ExplicitParams& e, const Activation& act, const Sequence& seq, const SolverConfig& cfg);

/// Loss value plus dLoss/d(explicit params) by reverse sweeps over the tapes.
/// Fixed-step methods only; dopri5 raises InputError.
LossReport explicit_grad(const ExplicitParams& e, const Activation& act, std::span<const Sequence> data,
                         const SolverConfig& cfg, ExplicitParams& grad_out);

/// Exact gradient of the discretized loss with respect to model.theta.
LossReport grad_reverse(const Model& model, std::span<const Sequence> data, const SolverConfig& cfg);

/// Fourth-order central differences with per-coordinate step `rel_step * max(1, |theta_i|)`.
Vec grad_fd(const Model& model, std::span<const Sequence> data, const SolverConfig& cfg, double rel_step = 1e-5);

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m;
  Vec v;
  long t = 0;

  static AdamState zeros(Eigen::Index size) { return {Vec::Zero(size), Vec::Zero(size), 0}; }
};

/// Bias-corrected Adam update of `theta` in place.
void adam_step(Vec& theta, AdamState& state, const Vec& grad, const AdamConfig& cfg);

}  // namespace noderen
