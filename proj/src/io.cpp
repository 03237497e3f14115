#include "noderen/io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace noderen {

using nlohmann::json;

namespace {

const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw InputError("missing field '" + path + key + "'");
  return j.at(key);
}

template <class T>
T get_as(const json& j, const std::string& key, const std::string& path) {
  const json& v = field(j, key, path);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw InputError("field '" + path + key + "' has the wrong type");
  }
}

void require_finite(const Mat& m, const std::string& name) {
  if (!m.allFinite()) throw InputError("refusing to serialize non-finite values in '" + name + "'");
}

double rel_diff(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open '" + tmp.string() + "' for writing");
    os << content;
    os.flush();
    if (!os) throw InputError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw InputError("cannot move output into place at '" + path + "'");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Matrices

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Mat matrix_from_json(const json& j, const std::string& name) {
  if (!j.is_array()) throw InputError("field '" + name + "' must be a nested array");
  const auto r = static_cast<Eigen::Index>(j.size());
  Eigen::Index c = -1;
  Mat m;
  for (Eigen::Index i = 0; i < r; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array()) throw InputError("field '" + name + "' row " + std::to_string(i) + " is not an array");
    if (c < 0) {
      c = static_cast<Eigen::Index>(row.size());
      m.resize(r, c);
    } else if (static_cast<Eigen::Index>(row.size()) != c) {
      throw InputError("field '" + name + "' has ragged rows");
    }
    for (Eigen::Index k = 0; k < c; ++k) {
      const json& v = row[static_cast<std::size_t>(k)];
      if (!v.is_number()) throw InputError("field '" + name + "' has a non-numeric entry");
      m(i, k) = v.get<double>();
    }
  }
  if (r == 0) m.resize(0, 0);
  return m;
}

Vec vector_from_json(const json& j, const std::string& name) {
  if (!j.is_array()) throw InputError("field '" + name + "' must be an array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw InputError("field '" + name + "' has a non-numeric entry");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

namespace {

json vector_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Mat shaped(const json& j, const std::string& key, const std::string& path, Eigen::Index rows, Eigen::Index cols) {
  Mat m = matrix_from_json(field(j, key, path), path + key);
  // An empty nested array cannot carry a column count.
  if (m.size() == 0 && rows * cols == 0) return Mat::Zero(rows, cols);
  if (m.rows() != rows || m.cols() != cols) {
    throw InputError("field '" + path + key + "' has shape " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  return m;
}

Vec sized(const json& j, const std::string& key, const std::string& path, Eigen::Index n) {
  Vec v = vector_from_json(field(j, key, path), path + key);
  if (v.size() != n) {
    throw InputError("field '" + path + key + "' has length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(n));
  }
  return v;
}

}  // namespace

json explicit_to_json(const ExplicitParams& e) {
  const std::pair<const char*, const Mat*> mats[] = {{"A", &e.A},     {"B1", &e.B1},   {"B2", &e.B2},
                                                     {"C1", &e.C1},   {"D11", &e.D11}, {"D12", &e.D12},
                                                     {"C2", &e.C2},   {"D21", &e.D21}, {"D22", &e.D22}};
  json j = json::object();
  for (const auto& [name, m] : mats) {
    require_finite(*m, name);
    j[name] = matrix_to_json(*m);
  }
  require_finite(e.bx, "b_x");
  require_finite(e.bv, "b_v");
  require_finite(e.by, "b_y");
  j["b_x"] = vector_to_json(e.bx);
  j["b_v"] = vector_to_json(e.bv);
  j["b_y"] = vector_to_json(e.by);
  return j;
}

namespace {

ExplicitParams explicit_from_json_dims(const json& j, const Dims& d, const std::string& path) {
  ExplicitParams e;
  e.A = shaped(j, "A", path, d.n, d.n);
  e.B1 = shaped(j, "B1", path, d.n, d.q);
  e.B2 = shaped(j, "B2", path, d.n, d.m);
  e.C1 = shaped(j, "C1", path, d.q, d.n);
  e.D11 = shaped(j, "D11", path, d.q, d.q);
  e.D12 = shaped(j, "D12", path, d.q, d.m);
  e.C2 = shaped(j, "C2", path, d.p, d.n);
  e.D21 = shaped(j, "D21", path, d.p, d.q);
  e.D22 = shaped(j, "D22", path, d.p, d.m);
  e.bx = sized(j, "b_x", path, d.n);
  e.bv = sized(j, "b_v", path, d.q);
  e.by = sized(j, "b_y", path, d.p);
  return e;
}

}  // namespace

ExplicitParams explicit_from_json(const json& j) {
  const Mat A = matrix_from_json(field(j, "A", ""), "A");
  const Mat C1 = matrix_from_json(field(j, "C1", ""), "C1");
  const Mat B2 = matrix_from_json(field(j, "B2", ""), "B2");
  const Mat C2 = matrix_from_json(field(j, "C2", ""), "C2");
  Dims d{static_cast<int>(A.rows()), static_cast<int>(C1.rows()), static_cast<int>(B2.cols()),
         static_cast<int>(C2.rows())};
  ExplicitParams e = explicit_from_json_dims(j, d, "");
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint Checkpoint::from_model(const Model& model) {
  Checkpoint ck;
  ck.model = model;
  const auto real = model.realize();
  ck.explicit_params = real.params;
  if (model.mode != Mode::general) ck.cert = real.cert;
  return ck;
}

double Checkpoint::rederivation_error() const {
  const auto real = model.realize();
  const ExplicitParams& a = explicit_params;
  const ExplicitParams& b = real.params;
  double err = 0.0;
  err = std::max(err, rel_diff(a.A, b.A));
  err = std::max(err, rel_diff(a.B1, b.B1));
  err = std::max(err, rel_diff(a.B2, b.B2));
  err = std::max(err, rel_diff(a.C1, b.C1));
  err = std::max(err, rel_diff(a.D11, b.D11));
  err = std::max(err, rel_diff(a.D12, b.D12));
  err = std::max(err, rel_diff(a.C2, b.C2));
  err = std::max(err, rel_diff(a.D21, b.D21));
  err = std::max(err, rel_diff(a.D22, b.D22));
  err = std::max(err, rel_diff(a.bx, b.bx));
  err = std::max(err, rel_diff(a.bv, b.bv));
  err = std::max(err, rel_diff(a.by, b.by));
  if (cert && model.mode != Mode::general) {
    err = std::max(err, rel_diff(cert->P, real.cert.P));
    err = std::max(err, rel_diff(cert->lambda, real.cert.lambda));
  }
  return err;
}

std::string checkpoint_to_string(const Checkpoint& ck) {
  const Model& m = ck.model;
  json j;
  j["schema_version"] = kCheckpointSchema;
  j["mode"] = to_string(m.mode);
  j["dims"] = {{"n", m.dims.n}, {"q", m.dims.q}, {"m", m.dims.m}, {"p", m.dims.p}};
  j["activation"] = to_string(m.act.kind);
  j["hyper"] = {{"epsilon", m.hyper.epsilon}, {"epsilon_P", m.hyper.epsilon_P}, {"min_rate", m.hyper.min_rate}};

  const ParamLayout L = m.layout();
  if (m.theta.size() != L.size()) throw InputError("checkpoint: free-parameter vector has the wrong length");
  require_finite(m.theta, "free_parameters");
  json fp = json::object();
  for (const auto& b : L.blocks()) {
    const Mat blk = L.get(m.theta, b.name);
    fp[b.name] = b.cols == 1 ? vector_to_json(blk.col(0)) : matrix_to_json(blk);
  }
  j["free_parameters"] = fp;
  j["explicit"] = explicit_to_json(ck.explicit_params);
  if (ck.cert) {
    require_finite(ck.cert->P, "certificate.P");
    j["certificate"] = {{"P", matrix_to_json(ck.cert->P)}, {"lambda", vector_to_json(ck.cert->lambda)}};
  } else {
    j["certificate"] = nullptr;
  }
  if (m.supply) {
    json sr = {{"Q", matrix_to_json(m.supply->Q)},
               {"S", matrix_to_json(m.supply->S)},
               {"R", matrix_to_json(m.supply->R)},
               {"delta", m.supply->delta}};
    if (ck.property) {
      sr["property"] = to_string(ck.property->kind);
      sr["param"] = ck.property->param;
    }
    j["supply_rate"] = sr;
  } else {
    j["supply_rate"] = nullptr;
  }
  j["solver"] = {{"method", to_string(ck.solver.method)},
                 {"steps", ck.solver.steps},
                 {"rtol", ck.solver.rtol},
                 {"atol", ck.solver.atol}};
  j["optimizer"] = {{"name", "adam"},
                    {"lr", ck.optimizer.lr},
                    {"beta1", ck.optimizer.beta1},
                    {"beta2", ck.optimizer.beta2},
                    {"eps", ck.optimizer.eps}};
  json tr = {{"seed", ck.meta.seed},
             {"epochs", ck.meta.epochs},
             {"final_train_loss", ck.meta.final_train_loss},
             {"certified_throughout", ck.meta.certified_throughout},
             {"diverged", ck.meta.diverged},
             {"retries", ck.meta.retries}};
  tr["final_test_loss"] = ck.meta.final_test_loss ? json(*ck.meta.final_test_loss) : json(nullptr);
  if (!std::isfinite(ck.meta.final_train_loss)) tr["final_train_loss"] = nullptr;
  j["training"] = tr;
  return j.dump(2) + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  const int schema = get_as<int>(j, "schema_version", "");
  if (schema != kCheckpointSchema) throw InputError("field 'schema_version': unsupported version " + std::to_string(schema));

  Checkpoint ck;
  Model& m = ck.model;
  m.mode = mode_from_string(get_as<std::string>(j, "mode", ""));
  const json& d = field(j, "dims", "");
  m.dims = Dims{get_as<int>(d, "n", "dims."), get_as<int>(d, "q", "dims."), get_as<int>(d, "m", "dims."),
                get_as<int>(d, "p", "dims.")};
  m.dims.validate();
  m.act.kind = activation_from_string(get_as<std::string>(j, "activation", ""));
  const json& h = field(j, "hyper", "");
  m.hyper.epsilon = get_as<double>(h, "epsilon", "hyper.");
  m.hyper.epsilon_P = get_as<double>(h, "epsilon_P", "hyper.");
  m.hyper.min_rate = get_as<double>(h, "min_rate", "hyper.");

  const json& sr = field(j, "supply_rate", "");
  if (!sr.is_null()) {
    const int p = m.dims.p, mi = m.dims.m;
    m.supply = make_supply_rate(shaped(sr, "Q", "supply_rate.", p, p), shaped(sr, "S", "supply_rate.", mi, p),
                                shaped(sr, "R", "supply_rate.", mi, mi), get_as<double>(sr, "delta", "supply_rate."));
    if (sr.contains("property")) {
      ck.property = IncrementalProperty{property_from_string(get_as<std::string>(sr, "property", "supply_rate.")),
                                        get_as<double>(sr, "param", "supply_rate.")};
    }
  } else if (m.mode == Mode::iqc) {
    throw InputError("field 'supply_rate' is required in iqc mode");
  }

  const ParamLayout L = m.layout();
  m.theta = Vec::Zero(L.size());
  const json& fp = field(j, "free_parameters", "");
  for (const auto& b : L.blocks()) {
    Mat blk;
    if (b.cols == 1) {
      blk = sized(fp, b.name, "free_parameters.", b.rows);
    } else {
      blk = shaped(fp, b.name, "free_parameters.", b.rows, b.cols);
    }
    L.set(m.theta, b.name, blk);
  }

  ck.explicit_params = explicit_from_json_dims(field(j, "explicit", ""), m.dims, "explicit.");
  ck.explicit_params.validate();
  const json& c = field(j, "certificate", "");
  if (!c.is_null()) {
    Certificate cert;
    cert.P = shaped(c, "P", "certificate.", m.dims.n, m.dims.n);
    cert.lambda = sized(c, "lambda", "certificate.", m.dims.q);
    ck.cert = cert;
  }

  const json& s = field(j, "solver", "");
  ck.solver.method = method_from_string(get_as<std::string>(s, "method", "solver."));
  ck.solver.steps = get_as<int>(s, "steps", "solver.");
  ck.solver.rtol = get_as<double>(s, "rtol", "solver.");
  ck.solver.atol = get_as<double>(s, "atol", "solver.");
  const json& o = field(j, "optimizer", "");
  ck.optimizer.lr = get_as<double>(o, "lr", "optimizer.");
  ck.optimizer.beta1 = get_as<double>(o, "beta1", "optimizer.");
  ck.optimizer.beta2 = get_as<double>(o, "beta2", "optimizer.");
  ck.optimizer.eps = get_as<double>(o, "eps", "optimizer.");
  const json& t = field(j, "training", "");
  ck.meta.seed = get_as<std::uint64_t>(t, "seed", "training.");
  ck.meta.epochs = get_as<int>(t, "epochs", "training.");
  const json& ftl = field(t, "final_train_loss", "training.");
  ck.meta.final_train_loss = ftl.is_null() ? std::numeric_limits<double>::infinity() : ftl.get<double>();
  const json& fte = field(t, "final_test_loss", "training.");
  if (!fte.is_null()) ck.meta.final_test_loss = fte.get<double>();
  ck.meta.certified_throughout = get_as<bool>(t, "certified_throughout", "training.");
  ck.meta.diverged = get_as<bool>(t, "diverged", "training.");
  ck.meta.retries = get_as<int>(t, "retries", "training.");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file_atomic(path, checkpoint_to_string(ck)); }

Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_string(read_file(path)); }

// ---------------------------------------------------------------------------
// Datasets

std::string dataset_csv(const Dataset& ds) {
  std::string out = "exp_id,t,z1,z2\n";
  for (std::size_t i = 0; i < ds.experiments.size(); ++i) {
    const auto& ex = ds.experiments[i];
    for (std::size_t k = 0; k < ex.times.size(); ++k) {
      out += std::to_string(i) + ',' + fmt17(ex.times[k]) + ',' + fmt17(ex.z[k](0)) + ',' + fmt17(ex.z[k](1)) + '\n';
    }
  }
  return out;
}

std::string dataset_sidecar(const Dataset& ds) {
  json inits = json::array();
  for (const auto& ex : ds.experiments) inits.push_back({ex.init(0), ex.init(1)});
  json j = {{"N", ds.experiments.size()},
            {"T_end", ds.t_end},
            {"noise_std", ds.noise_std},
            {"seed", ds.seed},
            {"sampling", to_string(ds.sampling)},
            {"plant", {{"length", ds.plant.length}, {"damping", ds.plant.damping}, {"gravity", ds.plant.gravity}}},
            {"initial_conditions", inits}};
  return j.dump(2) + "\n";
}

void save_dataset(const std::string& path, const Dataset& ds) {
  write_file_atomic(path, dataset_csv(ds));
  write_file_atomic(path + ".json", dataset_sidecar(ds));
}

Dataset load_dataset(const std::string& path) {
  json side;
  try {
    side = json::parse(read_file(path + ".json"));
  } catch (const json::parse_error& e) {
    throw InputError("dataset sidecar '" + path + ".json' is not valid JSON: " + e.what());
  }
  Dataset ds;
  const auto N = get_as<std::size_t>(side, "N", "");
  ds.t_end = get_as<double>(side, "T_end", "");
  ds.noise_std = get_as<double>(side, "noise_std", "");
  ds.seed = get_as<std::uint64_t>(side, "seed", "");
  ds.sampling = sampling_from_string(get_as<std::string>(side, "sampling", ""));
  const json& pl = field(side, "plant", "");
  ds.plant.length = get_as<double>(pl, "length", "plant.");
  ds.plant.damping = get_as<double>(pl, "damping", "plant.");
  ds.plant.gravity = get_as<double>(pl, "gravity", "plant.");
  const Mat inits = matrix_from_json(field(side, "initial_conditions", ""), "initial_conditions");
  if (static_cast<std::size_t>(inits.rows()) != N || (N > 0 && inits.cols() != 2)) {
    throw InputError("field 'initial_conditions' must hold N pairs");
  }
  ds.experiments.resize(N);
  for (std::size_t i = 0; i < N; ++i) ds.experiments[i].init = inits.row(static_cast<Eigen::Index>(i)).transpose();

  std::istringstream is(read_file(path));
  std::string line;
  if (!std::getline(is, line) || line.rfind("exp_id,t,z1,z2", 0) != 0) {
    throw InputError("dataset '" + path + "': expected header exp_id,t,z1,z2");
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    std::string tok[4];
    for (auto& t : tok) {
      if (!std::getline(ls, t, ',')) throw InputError("dataset '" + path + "' line " + std::to_string(lineno) + ": expected 4 columns");
    }
    std::size_t id;
    double t, z1, z2;
    try {
      id = std::stoul(tok[0]);
      t = std::stod(tok[1]);
      z1 = std::stod(tok[2]);
      z2 = std::stod(tok[3]);
    } catch (const std::exception&) {
      throw InputError("dataset '" + path + "' line " + std::to_string(lineno) + ": non-numeric value");
    }
    if (id >= N) throw InputError("dataset '" + path + "' line " + std::to_string(lineno) + ": exp_id out of range");
    auto& ex = ds.experiments[id];
    if (!(t >= 0.0 && t <= ds.t_end) || (!ex.times.empty() && !(t > ex.times.back()))) {
      throw InputError("dataset '" + path + "' line " + std::to_string(lineno) +
                       ": times must be strictly ascending within [0, T_end]");
    }
    ex.times.push_back(t);
    Vec z(2);
    z << z1, z2;
    ex.z.push_back(z);
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (ds.experiments[i].times.empty()) throw InputError("dataset '" + path + "': experiment " + std::to_string(i) + " has no samples");
  }
  return ds;
}

std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch,train_loss,grad_norm,wall_ms\n";
  for (const auto& m : metrics) {
    out += std::to_string(m.epoch) + ',' + fmt17(m.train_loss) + ',' + fmt17(m.grad_norm) + ',' + fmt17(m.wall_ms) + '\n';
  }
  return out;
}

Vec parse_csv_list(const std::string& s, const std::string& name) {
  std::vector<double> vals;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    try {
      std::size_t used = 0;
      vals.push_back(std::stod(tok, &used));
      while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used]))) ++used;
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InputError("'" + name + "': cannot parse '" + tok + "' as a number");
    }
  }
  if (vals.empty()) throw InputError("'" + name + "' is empty");
  return Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

std::vector<double> parse_times_file(const std::string& text, const std::string& name) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    try {
      out.push_back(std::stod(line.substr(first)));
    } catch (const std::exception&) {
      throw InputError("'" + name + "': cannot parse '" + line + "' as a time");
    }
  }
  if (out.empty()) throw InputError("'" + name + "' holds no times");
  return out;
}

}  // namespace noderen
