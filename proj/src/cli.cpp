#include "noderen/cli.hpp"

#include "noderen/dynamics.hpp"
#include "noderen/verification.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

namespace noderen {

using nlohmann::json;

namespace {

json opt_json(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace

json VerifyReport::to_json() const {
  json j;
  j["mode"] = to_string(mode);
  j["lmi_lambda_min"] = opt_json(lmi_lambda_min);
  j["certified_rate"] = opt_json(certified_rate);
  j["rederivation_error"] = std::isfinite(rederivation_error) ? json(rederivation_error) : json(nullptr);
  if (empirical_run) {
    j["empirical"] = {{"monotone_V", monotone_V},
                      {"kappa_fit", kappa_fit},
                      {"rate_fit", rate_fit},
                      {"dissipation_slack", opt_json(dissipation_slack)}};
  } else {
    j["empirical"] = nullptr;
  }
  j["passed"] = passed;
  return j;
}

VerifyReport verify_checkpoint(const Checkpoint& ck, bool empirical, int pairs, std::uint64_t seed) {
  VerifyReport rep;
  rep.mode = ck.model.mode;
  try {
    rep.rederivation_error = ck.rederivation_error();
  } catch (const Error&) {
    rep.rederivation_error = std::numeric_limits<double>::infinity();
  }
  if (!ck.cert) return rep;

  const ExplicitParams& e = ck.explicit_params;
  const Certificate& cert = *ck.cert;
  if (!(cert.lambda.array() > 0.0).all() || !(min_eig_sym(cert.P) > 0.0)) {
    rep.lmi_lambda_min = -std::numeric_limits<double>::infinity();
    return rep;
  }
  const Mat lmi = ck.model.mode == Mode::iqc ? assemble_iqc_lmi(e, cert, *ck.model.supply)
                                             : assemble_contractivity_lmi(e, cert, ck.model.hyper.min_rate);
  rep.lmi_lambda_min = pd_check(lmi).lambda_min;
  rep.passed = *rep.lmi_lambda_min > 0.0;
  if (!rep.passed) return rep;
  rep.certified_rate = certified_rate(e, cert);

  if (empirical) {
    if (pairs < 1) throw InputError("--pairs must be at least 1");
    rep.empirical_run = true;
    const Dims d = e.dims();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double horizon = 10.0;
    rep.rate_fit = std::numeric_limits<double>::infinity();
    double worst_slack = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < pairs; ++k) {
      PairSpec spec;
      spec.a = Vec(d.n);
      spec.b = Vec(d.n);
      for (int i = 0; i < d.n; ++i) spec.a(i) = normal(rng);
      for (int i = 0; i < d.n; ++i) spec.b(i) = normal(rng);
      spec.u1 = random_input(d.m, 20, horizon, 1.0, rng);
      spec.u2 = spec.u1;
      const ContractionReport cr = empirical_contraction(e, ck.model.act, cert, spec);
      rep.monotone_V = rep.monotone_V && cr.monotone_V;
      rep.kappa_fit = std::max(rep.kappa_fit, cr.kappa_fit);
      rep.rate_fit = std::min(rep.rate_fit, cr.rate_fit);
      if (ck.model.mode == Mode::iqc) {
        spec.u2 = random_input(d.m, 20, horizon, 1.0, rng);
        const DissipationReport dr = empirical_dissipation(e, ck.model.act, cert, *ck.model.supply, spec);
        worst_slack = std::max(worst_slack, dr.max_slack / (1.0 + dr.scale));
      }
    }
    if (ck.model.mode == Mode::iqc) rep.dissipation_slack = worst_slack;
    rep.passed = rep.monotone_V && rep.rate_fit > 0.0 && (!rep.dissipation_slack || *rep.dissipation_slack <= 1e-7);
  }
  return rep;
}

namespace {

struct Ctx {
  std::ostream& out;
  std::ostream& err;
};

Vec initial_state(const std::string& csv, int n) {
  const Vec v = parse_csv_list(csv, "--x0");
  if (v.size() > n) throw InputError("--x0 has " + std::to_string(v.size()) + " entries but the model has n = " + std::to_string(n));
  return augment_initial_state(v, n);
}

std::vector<double> sample_times(const std::string& spec, double t_end) {
  if (spec.rfind("uniform:", 0) == 0) {
    int k = 0;
    try {
      k = std::stoi(spec.substr(8));
    } catch (const std::exception&) {
      throw InputError("--times: cannot parse '" + spec + "'");
    }
    if (k < 2) throw InputError("--times uniform:K needs K >= 2");
    std::vector<double> ts;
    for (int j = 0; j < k; ++j) ts.push_back(j + 1 == k ? t_end : t_end * j / (k - 1));
    return ts;
  }
  auto ts = parse_times_file(read_file(spec), "--times");
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!(ts[i] >= 0.0 && ts[i] <= t_end)) throw InputError("--times: entries must lie in [0, t_end]");
    if (i > 0 && !(ts[i] > ts[i - 1])) throw InputError("--times: entries must be strictly ascending");
  }
  return ts;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Continuous-time recurrent equilibrium networks", "noderen"};
  app.require_subcommand(1);
  Ctx ctx{out, err};

  // generate
  auto* gen = app.add_subcommand("generate", "Simulate the pendulum and write a noisy dataset (CSV + JSON sidecar)");
  std::string gen_out;
  GenerateOptions gopt;
  PendulumConfig plant;
  std::string gen_sampling = "irregular";
  gen->add_option("--out", gen_out, "Dataset CSV path")->required();
  gen->add_option("--n-exp", gopt.n_exp, "Number of experiments")->capture_default_str();
  gen->add_option("--t-end", gopt.t_end, "Horizon in seconds")->capture_default_str();
  gen->add_option("--noise-std", gopt.noise_std, "Measurement noise standard deviation")->capture_default_str();
  gen->add_option("--sampling", gen_sampling, "irregular or uniform")->check(CLI::IsMember({"irregular", "uniform"}))->capture_default_str();
  gen->add_option("--seed", gopt.seed, "Random seed")->capture_default_str();
  gen->add_option("--min-samples", gopt.min_samples, "Fewest samples per experiment")->capture_default_str();
  gen->add_option("--max-samples", gopt.max_samples, "Most samples per experiment (uniform grid size)")->capture_default_str();
  gen->add_option("--length", plant.length, "Pendulum length")->capture_default_str();
  gen->add_option("--damping", plant.damping, "Viscous damping")->capture_default_str();
  gen->add_option("--gravity", plant.gravity, "Gravitational acceleration")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Fit a NodeREN to a dataset");
  std::string tr_data, tr_mode, tr_out, tr_prop = "l2_gain", tr_act = "tanh", tr_solver = "rk4", tr_test, tr_metrics;
  double tr_param = 1.0;
  TrainOptions topt;
  bool tr_train_bias = false;
  train->add_option("--data", tr_data, "Training dataset CSV")->required();
  train->add_option("--mode", tr_mode, "contractive, iqc or general")->required()->check(CLI::IsMember({"contractive", "iqc", "general"}));
  train->add_option("--property", tr_prop, "Incremental property (iqc mode)")
      ->check(CLI::IsMember({"l2_gain", "passivity", "input_passivity", "output_passivity"}))
      ->capture_default_str();
  train->add_option("--param", tr_param, "gamma, nu or epsilon of the property")->capture_default_str();
  train->add_option("--nx", topt.dims.n, "State dimension")->capture_default_str();
  train->add_option("--nq", topt.dims.q, "Nonlinearity channels")->capture_default_str();
  train->add_option("--activation", tr_act, "tanh, relu or logistic")->check(CLI::IsMember({"tanh", "relu", "logistic"}))->capture_default_str();
  train->add_option("--solver", tr_solver, "euler or rk4")->check(CLI::IsMember({"euler", "rk4"}))->capture_default_str();
  train->add_option("--steps", topt.solver.steps, "Fixed steps over the training horizon")->capture_default_str();
  train->add_option("--epochs", topt.epochs, "Adam epochs (full batch)")->capture_default_str();
  train->add_option("--lr", topt.adam.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--seed", topt.seed, "Initialization seed")->capture_default_str();
  train->add_option("--out", tr_out, "Checkpoint JSON path")->required();
  train->add_option("--test-data", tr_test, "Held-out dataset evaluated with dopri5 after training");
  train->add_option("--metrics", tr_metrics, "Per-epoch metrics CSV (default: OUT.metrics.csv)");
  train->add_option("--epsilon", topt.hyper.epsilon, "Margin epsilon")->capture_default_str();
  train->add_option("--epsilon-p", topt.hyper.epsilon_P, "Margin on P")->capture_default_str();
  train->add_option("--min-rate", topt.hyper.min_rate, "Prescribed contraction rate (contractive mode)")->capture_default_str();
  train->add_flag("--train-bias", tr_train_bias, "Also train the bias vector (default: frozen at zero)");

  // eval
  auto* ev = app.add_subcommand("eval", "Loss of a checkpoint on a dataset");
  std::string ev_model, ev_data, ev_solver = "dopri5";
  SolverConfig ev_cfg;
  ev_cfg.rtol = 1e-8;
  ev_cfg.atol = 1e-8;
  ev->add_option("--model", ev_model, "Checkpoint JSON")->required();
  ev->add_option("--data", ev_data, "Dataset CSV")->required();
  ev->add_option("--solver", ev_solver, "euler, rk4 or dopri5")->check(CLI::IsMember({"euler", "rk4", "dopri5"}))->capture_default_str();
  ev->add_option("--rtol", ev_cfg.rtol, "dopri5 relative tolerance")->capture_default_str();
  ev->add_option("--atol", ev_cfg.atol, "dopri5 absolute tolerance")->capture_default_str();
  ev->add_option("--steps", ev_cfg.steps, "Fixed steps over the horizon")->capture_default_str();

  // verify
  auto* ver = app.add_subcommand("verify", "Check the stored certificate (and optionally simulate pairs)");
  std::string ver_model, ver_out;
  bool ver_empirical = false;
  int ver_pairs = 20;
  std::uint64_t ver_seed = 0;
  ver->add_option("--model", ver_model, "Checkpoint JSON")->required();
  ver->add_flag("--empirical", ver_empirical, "Simulate random trajectory pairs");
  ver->add_option("--pairs", ver_pairs, "Number of pairs")->capture_default_str();
  ver->add_option("--seed", ver_seed, "Seed for the random pairs")->capture_default_str();
  ver->add_option("--out", ver_out, "Also write the report to this path");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Simulate a checkpoint from one initial state");
  std::string sim_model, sim_x0, sim_solver = "dopri5", sim_times = "uniform:101", sim_out, sim_u;
  SolverConfig sim_cfg;
  sim_cfg.rtol = 1e-8;
  sim_cfg.atol = 1e-8;
  double sim_t_end = 8.0;
  sim->add_option("--model", sim_model, "Checkpoint JSON")->required();
  sim->add_option("--x0", sim_x0, "Initial state, comma separated (zero-padded to n)")->required();
  sim->add_option("--t-end", sim_t_end, "Horizon in seconds")->capture_default_str();
  sim->add_option("--solver", sim_solver, "euler, rk4 or dopri5")->check(CLI::IsMember({"euler", "rk4", "dopri5"}))->capture_default_str();
  sim->add_option("--steps", sim_cfg.steps, "Fixed steps over the horizon")->capture_default_str();
  sim->add_option("--rtol", sim_cfg.rtol, "dopri5 relative tolerance")->capture_default_str();
  sim->add_option("--atol", sim_cfg.atol, "dopri5 absolute tolerance")->capture_default_str();
  sim->add_option("--times", sim_times, "File with one time per line, or uniform:K")->capture_default_str();
  sim->add_option("--u", sim_u, "Constant input, comma separated (default zero)");
  sim->add_option("--out", sim_out, "Trajectory CSV path")->required();

  // tube
  auto* tube = app.add_subcommand("tube", "Simulate a bundle of perturbed initial states");
  std::string tube_model, tube_x0, tube_out, tube_members;
  TubeOptions tube_opt;
  tube->add_option("--model", tube_model, "Checkpoint JSON")->required();
  tube->add_option("--x0", tube_x0, "Base initial state; only the given coordinates are perturbed")->required();
  tube->add_option("--radius", tube_opt.radius, "Perturbation radius")->required();
  tube->add_option("--count", tube_opt.count, "Trajectories including the base")->required();
  tube->add_option("--t-end", tube_opt.horizon, "Horizon in seconds")->required();
  tube->add_option("--out", tube_out, "Envelope CSV path")->required();
  tube->add_option("--samples", tube_opt.n_times, "Output times")->capture_default_str();
  tube->add_option("--seed", tube_opt.seed, "Perturbation seed")->capture_default_str();
  tube->add_option("--members", tube_members, "Also write every trajectory to this CSV");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << sub->help();
    } else {
      err << app.help();
    }
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      gopt.sampling = sampling_from_string(gen_sampling);
      const Dataset ds = generate_dataset(plant, gopt);
      save_dataset(gen_out, ds);
      ctx.out << "wrote " << ds.experiments.size() << " experiments (" << ds.total_samples() << " samples) to " << gen_out
              << "\n";
      return kExitOk;
    }

    if (train->parsed()) {
      const Dataset data = load_dataset(tr_data);
      topt.mode = mode_from_string(tr_mode);
      topt.dims.m = 1;
      topt.dims.p = 2;
      topt.act.kind = activation_from_string(tr_act);
      topt.solver.method = method_from_string(tr_solver);
      topt.freeze_bias = !tr_train_bias;
      if (topt.mode == Mode::iqc) topt.property = IncrementalProperty{property_from_string(tr_prop), tr_param};
      if (topt.mode != Mode::contractive && topt.hyper.min_rate != 0.0) {
        throw InputError("--min-rate applies to contractive mode only");
      }
      const TrainResult res = train_sysid(data, topt);
      Checkpoint ck = Checkpoint::from_model(res.model);
      ck.property = topt.property;
      ck.solver = topt.solver;
      ck.solver.t0 = 0.0;
      ck.solver.t1 = data.t_end;
      ck.optimizer = topt.adam;
      ck.meta.seed = topt.seed;
      ck.meta.epochs = static_cast<int>(res.metrics.size());
      ck.meta.final_train_loss = res.final_train_loss;
      ck.meta.certified_throughout = res.certified_throughout;
      ck.meta.diverged = res.diverged;
      ck.meta.retries = res.retries;
      if (!tr_test.empty()) {
        SolverConfig sc;
        sc.method = Method::dopri5;
        sc.rtol = 1e-8;
        sc.atol = 1e-8;
        try {
          ck.meta.final_test_loss = evaluate(ck.explicit_params, res.model.act, load_dataset(tr_test), sc).value;
        } catch (const NumericalError& e) {
          ctx.err << "warning: test evaluation failed: " << e.what() << "\n";
        }
      }
      save_checkpoint(tr_out, ck);
      write_file_atomic(tr_metrics.empty() ? tr_out + ".metrics.csv" : tr_metrics, metrics_csv(res.metrics));
      json summary = {{"checkpoint", tr_out},
                      {"epochs", ck.meta.epochs},
                      {"final_train_loss", std::isfinite(res.final_train_loss) ? json(res.final_train_loss) : json(nullptr)},
                      {"final_test_loss", opt_json(ck.meta.final_test_loss)},
                      {"certified_throughout", topt.mode == Mode::general ? json(nullptr) : json(res.certified_throughout)},
                      {"diverged", res.diverged},
                      {"retries", res.retries}};
      ctx.out << summary.dump(2) << "\n";
      if (res.diverged) ctx.err << "warning: training diverged; checkpoint holds the last finite parameters\n";
      return kExitOk;
    }

    if (ev->parsed()) {
      const Checkpoint ck = load_checkpoint(ev_model);
      const Dataset data = load_dataset(ev_data);
      ev_cfg.method = method_from_string(ev_solver);
      const LossReport rep = evaluate(ck.explicit_params, ck.model.act, data, ev_cfg);
      json j = {{"loss", rep.value}, {"horizon", data.t_end}, {"solver", ev_solver}, {"per_experiment", rep.per_experiment}};
      ctx.out << j.dump(2) << "\n";
      return kExitOk;
    }

    if (ver->parsed()) {
      const Checkpoint ck = load_checkpoint(ver_model);
      const VerifyReport rep = verify_checkpoint(ck, ver_empirical, ver_pairs, ver_seed);
      const std::string text = rep.to_json().dump(2) + "\n";
      ctx.out << text;
      if (!ver_out.empty()) write_file_atomic(ver_out, text);
      if (!ck.cert) ctx.err << "verification failed: checkpoint carries no certificate (mode " << to_string(ck.model.mode) << ")\n";
      else if (!rep.passed) ctx.err << "verification failed\n";
      return rep.passed ? kExitOk : kExitVerification;
    }

    if (sim->parsed()) {
      const Checkpoint ck = load_checkpoint(sim_model);
      const ExplicitParams& e = ck.explicit_params;
      const Dims d = e.dims();
      const Vec x0 = initial_state(sim_x0, d.n);
      Vec u = Vec::Zero(d.m);
      if (!sim_u.empty()) {
        u = parse_csv_list(sim_u, "--u");
        if (u.size() != d.m) throw InputError("--u must have " + std::to_string(d.m) + " entries");
      }
      sim_cfg.method = method_from_string(sim_solver);
      sim_cfg.t0 = 0.0;
      sim_cfg.t1 = sim_t_end;
      const auto ts = sample_times(sim_times, sim_t_end);
      const Activation act = ck.model.act;
      const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(e, act, x, u, dx); };
      const OutputFn outf = [&](double, const Vec& x) { return output_map(e, act, x, u); };
      const Trajectory tr = integrate(rhs, x0, sim_cfg, ts, outf);
      std::ostringstream os;
      write_trajectory_csv(os, tr);
      write_file_atomic(sim_out, os.str());
      ctx.out << "wrote " << tr.times.size() << " samples to " << sim_out << " (nfe " << tr.nfe << ")\n";
      return kExitOk;
    }

    if (tube->parsed()) {
      const Checkpoint ck = load_checkpoint(tube_model);
      const Vec base = parse_csv_list(tube_x0, "--x0");
      const TubeResult res =
          tube_experiment(ck.explicit_params, ck.model.act, ck.cert ? &*ck.cert : nullptr, base, tube_opt);
      std::ostringstream os;
      write_tube_csv(os, res);
      write_file_atomic(tube_out, os.str());
      if (!tube_members.empty()) {
        std::ostringstream ms;
        write_tube_members_csv(ms, res);
        write_file_atomic(tube_members, ms.str());
      }
      ctx.out << "diameter " << res.diameter.front() << " -> " << res.diameter.back()
              << (res.p_weighted ? " (P-weighted)" : " (Euclidean)") << "\n";
      return kExitOk;
    }
  } catch (const InputError& e) {
    ctx.err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    ctx.err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConstructionError& e) {
    ctx.err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    ctx.err << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace noderen
