#pragma once

#include "noderen/gradients.hpp"
#include "noderen/parametrization.hpp"
#include "noderen/sysid.hpp"

#include "json.hpp"

#include <optional>
#include <string>
#include <vector>

namespace noderen {

inline constexpr int kCheckpointSchema = 1;

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  double final_train_loss = 0.0;
  std::optional<double> final_test_loss;
  bool certified_throughout = true;
  bool diverged = false;
  int retries = 0;
};

/// Everything needed to reproduce or reuse a trained model.
struct Checkpoint {
  Model model;
  std::optional<IncrementalProperty> property;  // iqc mode
  ExplicitParams explicit_params;                // as stored; used by eval/simulate/verify
  std::optional<Certificate> cert;               // absent in general mode
  SolverConfig solver;
  AdamConfig optimizer;
  TrainingMeta meta;

  /// Fills explicit_params and cert from model.theta.
  static Checkpoint from_model(const Model& model);
  /// Largest relative difference between the stored explicit parameters and the ones
  /// re-derived from the free parameters.
  double rederivation_error() const;
};

/// Writes `content` to `path` through a temporary file in the same directory and a rename.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

nlohmann::json matrix_to_json(const Mat& m);
Mat matrix_from_json(const nlohmann::json& j, const std::string& field);
Vec vector_from_json(const nlohmann::json& j, const std::string& field);

nlohmann::json explicit_to_json(const ExplicitParams& e);
ExplicitParams explicit_from_json(const nlohmann::json& j);

std::string checkpoint_to_string(const Checkpoint& ck);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
/// Throws InputError naming the offending field on malformed files.
Checkpoint load_checkpoint(const std::string& path);

/// `exp_id,t,z1,z2` rows.
std::string dataset_csv(const Dataset& ds);
/// N, T_end, noise_std, seed, sampling, plant constants, initial conditions.
std::string dataset_sidecar(const Dataset& ds);
/// Writes PATH and PATH.json.
void save_dataset(const std::string& path, const Dataset& ds);
/// Reads PATH and PATH.json.
Dataset load_dataset(const std::string& path);

/// `epoch,train_loss,grad_norm,wall_ms`.
std::string metrics_csv(const std::vector<EpochMetrics>& metrics);

/// Parses "a,b,c" into a vector.
Vec parse_csv_list(const std::string& s, const std::string& field);
/// One time per line (blank lines and lines starting with '#' ignored).
std::vector<double> parse_times_file(const std::string& text, const std::string& field);

}  // namespace noderen
