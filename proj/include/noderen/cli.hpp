#pragma once

#include "noderen/io.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace noderen {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitNumerical = 2,
  kExitVerification = 3,
};

struct VerifyReport {
  Mode mode = Mode::contractive;
  std::optional<double> lmi_lambda_min;  // absent without a certificate
  std::optional<double> certified_rate;
  double rederivation_error = 0.0;
  bool empirical_run = false;
  bool monotone_V = true;
  double kappa_fit = 0.0;    // largest over pairs
  double rate_fit = 0.0;     // smallest over pairs
  std::optional<double> dissipation_slack;  // iqc: max over pairs of max_slack / (1 + scale)
  bool passed = false;

  nlohmann::json to_json() const;
};

/// Checks the stored explicit parameters against the stored certificate. With `empirical`,
/// also simulates `pairs` random trajectory pairs (20-segment piecewise-constant inputs).
VerifyReport verify_checkpoint(const Checkpoint& ck, bool empirical, int pairs, std::uint64_t seed);

/// Runs one subcommand. `args` excludes the program name, e.g. {"verify", "--model", "m.json"}.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace noderen
