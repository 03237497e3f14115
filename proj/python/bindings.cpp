#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "noderen/cli.hpp"
#include "noderen/io.hpp"
#include "noderen/sysid.hpp"
#include "noderen/verification.hpp"

#include <sstream>

namespace py = pybind11;
using namespace noderen;

namespace {

Dims to_dims(const std::tuple<int, int, int, int>& t) {
  return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)};
}

std::optional<SupplyRate> supply_for(const std::optional<std::string>& property, double param, const Dims& d) {
  if (!property) return std::nullopt;
  return supply_rate_for({property_from_string(*property), param}, d.m, d.p);
}

SolverConfig solver_config(const std::string& method, int steps, double rtol, double atol) {
  SolverConfig sc;
  sc.method = method_from_string(method);
  sc.steps = steps;
  sc.rtol = rtol;
  sc.atol = atol;
  return sc;
}

py::dict trajectory_dict(const Trajectory& tr) {
  py::dict d;
  d["t"] = tr.times;
  d["x"] = tr.states;
  d["y"] = tr.outputs;
  d["nfe"] = tr.nfe;
  return d;
}

}  // namespace

PYBIND11_MODULE(_noderen, m) {
  m.doc() = "NodeREN parametrizations, integrators, training and certificate checks";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ConstructionError>(m, "ConstructionError", PyExc_ArithmeticError);

  py::class_<ExplicitParams>(m, "ExplicitParams")
      .def_static("zeros", [](std::tuple<int, int, int, int> d) { return ExplicitParams::zeros(to_dims(d)); })
      .def_readwrite("A", &ExplicitParams::A)
      .def_readwrite("B1", &ExplicitParams::B1)
      .def_readwrite("B2", &ExplicitParams::B2)
      .def_readwrite("C1", &ExplicitParams::C1)
      .def_readwrite("D11", &ExplicitParams::D11)
      .def_readwrite("D12", &ExplicitParams::D12)
      .def_readwrite("C2", &ExplicitParams::C2)
      .def_readwrite("D21", &ExplicitParams::D21)
      .def_readwrite("D22", &ExplicitParams::D22)
      .def_readwrite("bx", &ExplicitParams::bx)
      .def_readwrite("bv", &ExplicitParams::bv)
      .def_readwrite("by", &ExplicitParams::by)
      .def("validate", &ExplicitParams::validate);

  py::class_<Certificate>(m, "Certificate")
      .def(py::init([](Mat P, Vec lambda) { return Certificate{std::move(P), std::move(lambda)}; }), py::arg("P"),
           py::arg("lam"))
      .def_readwrite("P", &Certificate::P)
      .def_readwrite("lam", &Certificate::lambda);

  py::class_<SupplyRate>(m, "SupplyRate")
      .def_readonly("Q", &SupplyRate::Q)
      .def_readonly("S", &SupplyRate::S)
      .def_readonly("R", &SupplyRate::R)
      .def_readonly("delta", &SupplyRate::delta);
  m.def(
      "supply_rate",
      [](const std::string& property, double param, int mi, int p) {
        return supply_rate_for({property_from_string(property), param}, mi, p);
      },
      py::arg("property"), py::arg("param") = 1.0, py::arg("m") = 1, py::arg("p") = 1);

  py::class_<Model>(m, "Model")
      .def_property_readonly("mode", [](const Model& self) { return to_string(self.mode); })
      .def_property_readonly("dims", [](const Model& self) {
        return std::make_tuple(self.dims.n, self.dims.q, self.dims.m, self.dims.p);
      })
      .def_readwrite("theta", &Model::theta)
      .def_property_readonly("supply", [](const Model& self) { return self.supply; })
      .def("realize", [](const Model& self) {
        auto r = self.realize();
        return py::make_tuple(r.params, self.mode == Mode::general ? py::none() : py::cast(r.cert));
      })
      .def("block", [](const Model& self, const std::string& name) { return self.layout().get(self.theta, name); })
      .def("block_names", [](const Model& self) {
        const ParamLayout layout = self.layout();
        std::vector<std::string> names;
        for (const auto& b : layout.blocks()) names.push_back(b.name);
        return names;
      });

  m.def(
      "init_model",
      [](const std::string& mode, std::tuple<int, int, int, int> dims, const std::string& activation, double epsilon,
         double epsilon_p, double min_rate, std::optional<std::string> property, double param, std::uint64_t seed) {
        const Dims d = to_dims(dims);
        return init_model(mode_from_string(mode), d, Activation{activation_from_string(activation)},
                          Hyper{epsilon, epsilon_p, min_rate}, supply_for(property, param, d), seed);
      },
      py::arg("mode"), py::arg("dims"), py::arg("activation") = "tanh", py::arg("epsilon") = 0.01,
      py::arg("epsilon_p") = 0.01, py::arg("min_rate") = 0.0, py::arg("property") = py::none(),
      py::arg("param") = 1.0, py::arg("seed") = 0);

  m.def("cayley_contract", &cayley_contract, py::arg("M"), py::arg("p"), py::arg("m"));
  m.def("contractivity_lmi", &assemble_contractivity_lmi, py::arg("params"), py::arg("cert"), py::arg("rate") = 0.0);
  m.def("iqc_lmi", &assemble_iqc_lmi, py::arg("params"), py::arg("cert"), py::arg("supply"));
  m.def("certified_rate", &certified_rate, py::arg("params"), py::arg("cert"));
  m.def(
      "pd_check",
      [](const Mat& a, double tol) {
        const auto r = pd_check(a, tol);
        return py::make_tuple(r.positive, r.lambda_min);
      },
      py::arg("matrix"), py::arg("tol") = 0.0);
  m.def("lipschitz_bound", &lipschitz_bound, py::arg("params"));

  m.def(
      "simulate",
      [](const ExplicitParams& e, const std::string& activation, const Vec& x0, const Vec& u,
         const std::vector<double>& times, const std::string& method, int steps, double rtol, double atol) {
        const Activation act{activation_from_string(activation)};
        SolverConfig sc = solver_config(method, steps, rtol, atol);
        sc.t1 = times.empty() ? 0.0 : times.back();
        const Rhs rhs = [&](double, const Vec& x, Vec& dx) { state_derivative(e, act, x, u, dx); };
        const OutputFn out = [&](double, const Vec& x) { return output_map(e, act, x, u); };
        return trajectory_dict(integrate(rhs, x0, sc, times, out));
      },
      py::arg("params"), py::arg("activation"), py::arg("x0"), py::arg("u"), py::arg("times"),
      py::arg("method") = "dopri5", py::arg("steps") = 100, py::arg("rtol") = 1e-8, py::arg("atol") = 1e-8);

  py::class_<Experiment>(m, "Experiment")
      .def_readonly("init", &Experiment::init)
      .def_readonly("times", &Experiment::times)
      .def_readonly("z", &Experiment::z);
  py::class_<Dataset>(m, "Dataset")
      .def_readonly("experiments", &Dataset::experiments)
      .def_readonly("t_end", &Dataset::t_end)
      .def_readonly("noise_std", &Dataset::noise_std)
      .def_readonly("seed", &Dataset::seed)
      .def("total_samples", &Dataset::total_samples)
      .def("to_csv", &dataset_csv);

  m.def(
      "generate_dataset",
      [](int n_exp, double t_end, double noise_std, const std::string& sampling, std::uint64_t seed, int min_samples,
         int max_samples) {
        GenerateOptions g;
        g.n_exp = n_exp;
        g.t_end = t_end;
        g.noise_std = noise_std;
        g.sampling = sampling_from_string(sampling);
        g.seed = seed;
        g.min_samples = min_samples;
        g.max_samples = max_samples;
        return generate_dataset(PendulumConfig{}, g);
      },
      py::arg("n_exp") = 200, py::arg("t_end") = 3.0, py::arg("noise_std") = 0.1, py::arg("sampling") = "irregular",
      py::arg("seed") = 0, py::arg("min_samples") = 10, py::arg("max_samples") = 30);
  m.def("save_dataset", &save_dataset, py::arg("path"), py::arg("dataset"));
  m.def("load_dataset", &load_dataset, py::arg("path"));

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("model", &TrainResult::model)
      .def_readonly("initial", &TrainResult::initial)
      .def_readonly("certified_throughout", &TrainResult::certified_throughout)
      .def_readonly("diverged", &TrainResult::diverged)
      .def_readonly("retries", &TrainResult::retries)
      .def_readonly("final_train_loss", &TrainResult::final_train_loss)
      .def_property_readonly("train_loss", [](const TrainResult& r) {
        std::vector<double> out;
        for (const auto& em : r.metrics) out.push_back(em.train_loss);
        return out;
      })
      .def_property_readonly("lmi_lambda_min", [](const TrainResult& r) {
        std::vector<double> out;
        for (const auto& em : r.metrics) out.push_back(em.lmi_lambda_min);
        return out;
      });

  m.def(
      "train",
      [](const Dataset& data, const std::string& mode, std::tuple<int, int> nq, int epochs, double lr,
         const std::string& solver, int steps, std::uint64_t seed, std::optional<std::string> property, double param,
         const std::string& activation) {
        TrainOptions t;
        t.mode = mode_from_string(mode);
        t.dims = {std::get<0>(nq), std::get<1>(nq), 1, 2};
        if (property) t.property = IncrementalProperty{property_from_string(*property), param};
        t.act = Activation{activation_from_string(activation)};
        t.solver.method = method_from_string(solver);
        t.solver.steps = steps;
        t.epochs = epochs;
        t.adam.lr = lr;
        t.seed = seed;
        py::gil_scoped_release release;
        return train_sysid(data, t);
      },
      py::arg("data"), py::arg("mode") = "contractive", py::arg("nq") = std::make_tuple(4, 5), py::arg("epochs") = 500,
      py::arg("lr") = 1e-2, py::arg("solver") = "rk4", py::arg("steps") = 100, py::arg("seed") = 0,
      py::arg("property") = py::none(), py::arg("param") = 1.0, py::arg("activation") = "tanh");

  m.def(
      "evaluate",
      [](const Model& model, const Dataset& data, const std::string& method, int steps, double rtol, double atol) {
        return evaluate(model, data, solver_config(method, steps, rtol, atol)).value;
      },
      py::arg("model"), py::arg("data"), py::arg("method") = "dopri5", py::arg("steps") = 100, py::arg("rtol") = 1e-8,
      py::arg("atol") = 1e-8);
  m.def("certificate_margin", &certificate_margin, py::arg("model"));

  m.def(
      "loss_and_grad",
      [](const Model& model, const Dataset& data, const std::string& method, int steps) {
        SolverConfig sc = solver_config(method, steps, 1e-6, 1e-6);
        sc.t1 = data.t_end;
        const auto seqs = to_sequences(data, model.dims);
        const auto rep = grad_reverse(model, seqs, sc);
        return py::make_tuple(rep.value, rep.grad);
      },
      py::arg("model"), py::arg("data"), py::arg("method") = "rk4", py::arg("steps") = 100);
  m.def(
      "grad_fd",
      [](const Model& model, const Dataset& data, const std::string& method, int steps) {
        SolverConfig sc = solver_config(method, steps, 1e-6, 1e-6);
        sc.t1 = data.t_end;
        return grad_fd(model, to_sequences(data, model.dims), sc);
      },
      py::arg("model"), py::arg("data"), py::arg("method") = "rk4", py::arg("steps") = 100);

  m.def(
      "tube",
      [](const Model& model, const Vec& x0, double radius, int count, double horizon, int n_times, std::uint64_t seed) {
        TubeOptions opt;
        opt.radius = radius;
        opt.count = count;
        opt.horizon = horizon;
        opt.n_times = n_times;
        opt.seed = seed;
        const auto t = tube_experiment(model, x0, opt);
        py::dict d;
        d["t"] = t.times;
        d["diameter"] = t.diameter;
        d["y_min"] = t.y_min;
        d["y_max"] = t.y_max;
        d["p_weighted"] = t.p_weighted;
        return d;
      },
      py::arg("model"), py::arg("x0"), py::arg("radius") = 0.2, py::arg("count") = 16, py::arg("horizon") = 8.0,
      py::arg("n_times") = 161, py::arg("seed") = 0);

  m.def(
      "save_checkpoint",
      [](const std::string& path, const Model& model) { save_checkpoint(path, Checkpoint::from_model(model)); },
      py::arg("path"), py::arg("model"));
  m.def(
      "load_model", [](const std::string& path) { return load_checkpoint(path).model; }, py::arg("path"));
  m.def(
      "verify",
      [](const std::string& path, bool empirical, int pairs, std::uint64_t seed) {
        return verify_checkpoint(load_checkpoint(path), empirical, pairs, seed).to_json().dump();
      },
      py::arg("path"), py::arg("empirical") = false, py::arg("pairs") = 10, py::arg("seed") = 0);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli_dispatch(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
