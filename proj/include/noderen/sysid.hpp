#pragma once

#include "noderen/gradients.hpp"
#include "noderen/integrators.hpp"
#include "noderen/parametrization.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace noderen {

/// l * alpha'' + beta * alpha' + g * sin(alpha) = 0
struct PendulumConfig {
  double length = 0.5;
  double damping = 1.5;
  double gravity = 9.81;

  void validate() const;
};

/// [alpha, alpha'] -> [alpha', alpha''].
Vec pendulum_rhs(const PendulumConfig& cfg, const Vec& state);

/// 0.5 l alpha'^2 + g (1 - cos alpha); decreases at rate beta alpha'^2.
double pendulum_energy(const PendulumConfig& cfg, const Vec& state);

/// Simulates the plant with dopri5 (rtol = atol = 1e-10) at the given times.
Trajectory simulate_pendulum(const PendulumConfig& cfg, const Vec& init, double t_end,
                             std::span<const double> times, double tol = 1e-10);

enum class Sampling { irregular, uniform };

std::string to_string(Sampling s);
Sampling sampling_from_string(const std::string& s);

struct Experiment {
  Vec init;  // (alpha(0), alpha'(0))
  std::vector<double> times;
  std::vector<Vec> z;  // noisy (alpha, alpha') at `times`
};

struct Dataset {
  std::vector<Experiment> experiments;
  PendulumConfig plant;
  double t_end = 3.0;
  double noise_std = 0.1;
  Sampling sampling = Sampling::irregular;
  std::uint64_t seed = 0;

  std::size_t total_samples() const;
};

struct GenerateOptions {
  int n_exp = 200;
  double t_end = 3.0;
  int min_samples = 10;
  int max_samples = 30;
  double noise_std = 0.1;
  Sampling sampling = Sampling::irregular;
  std::uint64_t seed = 0;
};

/// alpha(0) ~ U(-pi/2, pi/2), alpha'(0) ~ U(-1, 1).
std::vector<Vec> draw_initial_conditions(int n_exp, std::uint64_t seed);

/// Initial conditions come from `seed`; sample times and noise from a second stream of the
/// same seed.
Dataset generate_dataset(const PendulumConfig& plant, const GenerateOptions& opt);

/// Same, with caller-provided initial conditions (sample times and noise still from opt.seed).
Dataset generate_dataset(const PendulumConfig& plant, const GenerateOptions& opt, const std::vector<Vec>& inits);

/// Lifts (alpha, alpha') into an n-dimensional initial state, zeros in coordinates 3..n,
/// with a zero input of dimension m.
std::vector<Sequence> to_sequences(const Dataset& data, const Dims& dims);

struct TrainOptions {
  Mode mode = Mode::contractive;
  std::optional<IncrementalProperty> property;  // iqc only
  Dims dims{4, 5, 1, 2};
  Activation act;
  Hyper hyper;
  SolverConfig solver;  // t0/t1 are overwritten with [0, T_end]
  AdamConfig adam;
  int epochs = 500;
  std::uint64_t seed = 0;
  bool freeze_bias = true;  // keep b_tilde = 0 so the origin stays an equilibrium
  int max_retries = 3;
  bool verify_each_epoch = true;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  double lmi_lambda_min = 0.0;  // NaN in general mode
};

struct TrainResult {
  Model model;
  Model initial;
  std::vector<EpochMetrics> metrics;
  bool certified_throughout = true;
  bool diverged = false;
  int retries = 0;
  double final_train_loss = 0.0;
};

/// Full-batch Adam on the reverse-mode gradient. General-mode blow-ups halve the learning
/// rate and repeat the epoch (at most `max_retries` times) before recording divergence.
TrainResult train_sysid(const Dataset& train, const TrainOptions& opt);

/// Lowest LMI eigenvalue certifying the model (contractivity, or the IQC LMI in iqc mode).
double certificate_margin(const Model& model);

/// Held-out loss along `solver` over [0, test.t_end]. Requires p = 2.
LossReport evaluate(const Model& model, const Dataset& test, SolverConfig solver);
LossReport evaluate(const ExplicitParams& e, const Activation& act, const Dataset& test, SolverConfig solver);

/// Pads an observed initial condition with zeros up to the state dimension n.
Vec augment_initial_state(const Vec& observed, int n);

struct TubeResult {
  std::vector<double> times;
  std::vector<Vec> y_min, y_max;     // per-time output envelope
  std::vector<double> diameter;      // max pairwise P-weighted (or Euclidean) distance
  std::vector<std::vector<Vec>> states;   // [member][time]
  std::vector<std::vector<Vec>> outputs;  // [member][time]
  bool p_weighted = false;
};

struct TubeOptions {
  double radius = 0.2;
  int count = 16;
  double horizon = 8.0;
  int n_times = 161;  // uniform output grid including 0 and horizon
  std::uint64_t seed = 0;
  double tol = 1e-9;
};

/// Simulates `count` initial states with dopri5: the base and count-1 perturbations drawn
/// uniformly from the ball of radius `radius` around it. Only the coordinates given in
/// `base_init` are perturbed; it is zero-padded to the state dimension. The diameter is
/// P-weighted when `cert` is non-null and Euclidean otherwise.
TubeResult tube_experiment(const ExplicitParams& e, const Activation& act, const Certificate* cert,
                           const Vec& base_init, const TubeOptions& opt);
TubeResult tube_experiment(const Model& model, const Vec& base_init, const TubeOptions& opt);

/// Header t,y1_min,y1_max,...,diameter.
void write_tube_csv(std::ostream& os, const TubeResult& tube);
/// Long format: member,t,x1..xn,y1..yp.
void write_tube_members_csv(std::ostream& os, const TubeResult& tube);

struct StudyRow {
  int index = 0;
  std::uint64_t seed = 0;
  double test_loss = 0.0;
  bool certified = true;
  bool failed = false;
  std::string error;
};

struct StudyOptions {
  GenerateOptions train_gen;  // initial conditions come from train_gen.seed
  GenerateOptions test_gen;
  TrainOptions train;
  SolverConfig eval_solver;
  int n_datasets = 10;
};

/// Trains one model per dataset; datasets share initial conditions and differ only in
/// sample times (and noise draws).
std::vector<StudyRow> irregular_sampling_study(const PendulumConfig& plant, const StudyOptions& opt);

}  // namespace noderen
