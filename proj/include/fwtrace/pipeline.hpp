#ifndef FWTRACE_PIPELINE_HPP_
#define FWTRACE_PIPELINE_HPP_

// File-based stages behind the command-line tool. Each stage reads the
// artifacts of the previous one from the output directory, checks their
// hashes against the current configuration and writes its own artifact.

#include <fcntl.h>
#include <unistd.h>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fwtrace/curvature.hpp"
#include "fwtrace/data.hpp"
#include "fwtrace/errors.hpp"
#include "fwtrace/eval.hpp"
#include "fwtrace/hash.hpp"
#include "fwtrace/model.hpp"
#include "fwtrace/readout.hpp"
#include "fwtrace/simulator.hpp"
#include "fwtrace/trainer.hpp"
#include "json.hpp"

namespace fwtrace {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

inline std::uint64_t parse_hex16(const std::string& s) {
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(s, &used, 16);
    if (used != s.size()) throw FormatError("bad hash '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad hash '" + s + "'");
  }
}

inline std::uint64_t json_hash(const Json& j) {
  Fnv1a h;
  h.text(j.dump());
  return h.digest();
}

namespace detail {

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

template <typename T>
std::optional<T> get_opt(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return get_or<T>(j, key, T{});
}

inline void check_keys(const Json& j, const char* where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* x) { return k == x; }) ==
        keys.end()) {
      throw ConfigError(std::string("unknown field '") + k + "' in " + where);
    }
  }
}

}  // namespace detail

// Where examples come from: a synthetic generator or a pair of IDX files.
struct DatasetSource {
  std::string kind = "gaussian_blobs";  // gaussian_blobs | two_moons | quadratic_testbed | idx
  std::size_t n = 0;
  int classes = 2;
  int dim = 2;
  double sigma = 1.0;
  double noise = 0.1;
  int params = 1;
  double scale = 1.0;
  std::optional<std::uint64_t> seed;
  std::string images;
  std::string labels;
  std::size_t subset = 0;

  static DatasetSource from_json(const Json& j, const char* where) {
    detail::check_keys(j, where, {"kind", "n", "classes", "dim", "sigma", "noise", "params",
                                  "scale", "seed", "images", "labels", "subset"});
    DatasetSource s;
    s.kind = detail::get_or<std::string>(j, "kind", s.kind);
    s.n = detail::get_or<std::size_t>(j, "n", 0);
    s.classes = detail::get_or<int>(j, "classes", s.classes);
    s.dim = detail::get_or<int>(j, "dim", s.dim);
    s.sigma = detail::get_or<double>(j, "sigma", s.sigma);
    s.noise = detail::get_or<double>(j, "noise", s.noise);
    s.params = detail::get_or<int>(j, "params", s.params);
    s.scale = detail::get_or<double>(j, "scale", s.scale);
    s.seed = detail::get_opt<std::uint64_t>(j, "seed");
    s.images = detail::get_or<std::string>(j, "images", "");
    s.labels = detail::get_or<std::string>(j, "labels", "");
    s.subset = detail::get_or<std::size_t>(j, "subset", 0);
    s.validate(where);
    return s;
  }

  void validate(const char* where) const {
    const std::string w(where);
    if (kind == "idx") {
      if (images.empty() || labels.empty()) throw ConfigError(w + ": idx needs images and labels");
      return;
    }
    if (kind != "gaussian_blobs" && kind != "two_moons" && kind != "quadratic_testbed") {
      throw ConfigError(w + ": unknown dataset kind '" + kind + "'");
    }
    if (n == 0) throw ConfigError(w + ": n must be > 0");
    if (classes < 1 || dim < 1 || params < 1) throw ConfigError(w + ": sizes must be positive");
  }

  Json to_json() const {
    Json j{{"kind", kind}};
    if (kind == "idx") {
      j["images"] = images;
      j["labels"] = labels;
      j["subset"] = subset;
    } else {
      j["n"] = n;
      if (kind == "gaussian_blobs") {
        j["classes"] = classes;
        j["dim"] = dim;
        j["sigma"] = sigma;
      } else if (kind == "two_moons") {
        j["noise"] = noise;
      } else {
        j["params"] = params;
        j["scale"] = scale;
      }
    }
    if (seed) j["seed"] = *seed;
    return j;
  }

  std::vector<Example> build(std::uint64_t default_seed, const fs::path& base) const {
    const std::uint64_t s = seed.value_or(default_seed);
    if (kind == "idx") {
      auto resolve = [&](const std::string& p) {
        const fs::path path(p);
        return (path.is_absolute() ? path : base / path).string();
      };
      return load_idx(resolve(images), resolve(labels), subset, s);
    }
    if (kind == "gaussian_blobs") return gaussian_blobs(n, classes, dim, sigma, s);
    if (kind == "two_moons") return two_moons(n, noise, s);
    return quadratic_testbed(n, params, s, scale);
  }
};

struct EvaluationConfig {
  Correlation correlation = Correlation::kSpearman;
  OracleTarget oracle = OracleTarget::kTauIf;
  std::size_t lds_subsets = 50;
  double lds_alpha = 0.5;
  std::optional<std::uint64_t> lds_seed;
  std::size_t permutations = 1000;
  // Start retrains from theta* instead of the training initialization.
  bool warm_start = false;
};

struct SweepConfig {
  std::vector<double> etas;
  std::vector<std::int64_t> steps;
  std::vector<double> lambdas;
  std::vector<double> epsilons;  // per-example weights eps / N
  bool loo = false;
  bool lds = false;
  bool oracle = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSource dataset;
  DatasetSource queries;
  Functional functional = Functional::kLoss;
  ModelSpec model;
  TrainConfig train;
  std::optional<double> grad_norm_tol;
  SimulationConfig simulation;
  // Per-example weight eps / N; the absolute epsilon overrides it when set.
  double epsilon_per_example = 1e-2;
  std::optional<double> epsilon;
  std::optional<std::vector<std::uint64_t>> sources;
  EvaluationConfig evaluation;
  SweepConfig sweep;
  bool strict = false;
  bool per_example = false;
  bool allow_unconverged = false;
  std::optional<double> budget;
  // Not part of the hash: they do not change any result.
  std::string output_dir = "out";
  fs::path base_dir = ".";
  std::size_t workers = 1;

  static RunConfig from_json(const Json& j, const fs::path& base_dir = ".") {
    detail::check_keys(j, "config",
                       {"seed", "dataset", "queries", "model", "train", "simulation", "sources",
                        "evaluation", "sweep", "strict", "per_example", "allow_unconverged",
                        "budget", "output_dir"});
    RunConfig c;
    c.base_dir = base_dir;
    c.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
    if (!j.contains("dataset")) throw ConfigError("config needs a dataset");
    c.dataset = DatasetSource::from_json(j.at("dataset"), "dataset");
    if (!j.contains("queries")) throw ConfigError("config needs queries");
    Json q = j.at("queries");
    if (q.is_object() && q.contains("functional")) {
      c.functional = parse_functional(q.at("functional").get<std::string>());
      q.erase("functional");
    }
    c.queries = DatasetSource::from_json(q, "queries");

    if (!j.contains("model")) throw ConfigError("config needs a model");
    const Json& m = j.at("model");
    detail::check_keys(m, "model", {"layers", "activation", "loss", "bias", "weight_decay"});
    c.model.layer_sizes = detail::get_or<std::vector<int>>(m, "layers", {});
    c.model.activation = parse_activation(detail::get_or<std::string>(m, "activation", "tanh"));
    c.model.loss = parse_loss(detail::get_or<std::string>(m, "loss", "cross_entropy"));
    c.model.bias = detail::get_or<bool>(m, "bias", true);
    c.model.weight_decay = detail::get_or<double>(m, "weight_decay", 0.0);
    c.model.validate();

    const Json t = j.value("train", Json::object());
    detail::check_keys(t, "train", {"step_size", "max_steps", "grad_norm_tol", "momentum"});
    c.train.step_size = detail::get_or<double>(t, "step_size", c.train.step_size);
    c.train.max_steps = detail::get_or<std::int64_t>(t, "max_steps", c.train.max_steps);
    c.train.momentum = detail::get_or<double>(t, "momentum", 0.0);
    c.grad_norm_tol = detail::get_opt<double>(t, "grad_norm_tol");

    const Json s = j.value("simulation", Json::object());
    detail::check_keys(s, "simulation", {"epsilon", "epsilon_per_example", "eta", "steps",
                                         "lambda", "variant", "drift_correction"});
    c.epsilon = detail::get_opt<double>(s, "epsilon");
    c.epsilon_per_example = detail::get_or<double>(s, "epsilon_per_example", 1e-2);
    c.simulation.eta = detail::get_or<double>(s, "eta", c.simulation.eta);
    c.simulation.steps = detail::get_or<std::int64_t>(s, "steps", c.simulation.steps);
    c.simulation.lambda = detail::get_or<double>(s, "lambda", c.simulation.lambda);
    c.simulation.variant = parse_variant(detail::get_or<std::string>(s, "variant", "pair"));
    c.simulation.drift_correction = detail::get_or<bool>(s, "drift_correction", false);

    if (j.contains("sources") && !j.at("sources").is_null()) {
      const Json& src = j.at("sources");
      if (src.is_string()) {
        if (src.get<std::string>() != "all") throw ConfigError("sources must be \"all\" or a list");
      } else {
        c.sources = detail::get_or<std::vector<std::uint64_t>>(j, "sources", {});
      }
    }

    const Json e = j.value("evaluation", Json::object());
    detail::check_keys(e, "evaluation", {"correlation", "oracle", "lds_subsets", "lds_alpha",
                                         "lds_seed", "permutations", "warm_start"});
    c.evaluation.correlation =
        parse_correlation(detail::get_or<std::string>(e, "correlation", "spearman"));
    const std::string oracle = detail::get_or<std::string>(e, "oracle", "tau_if");
    if (oracle == "tau_if") {
      c.evaluation.oracle = OracleTarget::kTauIf;
    } else if (oracle == "linear_reference") {
      c.evaluation.oracle = OracleTarget::kLinearReference;
    } else {
      throw ConfigError("unknown oracle '" + oracle + "'");
    }
    c.evaluation.lds_subsets = detail::get_or<std::size_t>(e, "lds_subsets", 50);
    c.evaluation.lds_alpha = detail::get_or<double>(e, "lds_alpha", 0.5);
    c.evaluation.lds_seed = detail::get_opt<std::uint64_t>(e, "lds_seed");
    c.evaluation.permutations = detail::get_or<std::size_t>(e, "permutations", 1000);
    c.evaluation.warm_start = detail::get_or<bool>(e, "warm_start", false);

    if (j.contains("sweep")) c.sweep = parse_sweep(j.at("sweep"));
    c.strict = detail::get_or<bool>(j, "strict", false);
    c.per_example = detail::get_or<bool>(j, "per_example", false);
    c.allow_unconverged = detail::get_or<bool>(j, "allow_unconverged", false);
    c.budget = detail::get_opt<double>(j, "budget");
    c.output_dir = detail::get_or<std::string>(j, "output_dir", "out");
    return c;
  }

  static SweepConfig parse_sweep(const Json& w) {
    detail::check_keys(w, "sweep",
                       {"etas", "steps", "lambdas", "epsilons", "loo", "lds", "oracle"});
    SweepConfig g;
    g.etas = detail::get_or<std::vector<double>>(w, "etas", {});
    g.steps = detail::get_or<std::vector<std::int64_t>>(w, "steps", {});
    g.lambdas = detail::get_or<std::vector<double>>(w, "lambdas", {});
    g.epsilons = detail::get_or<std::vector<double>>(w, "epsilons", {});
    g.loo = detail::get_or<bool>(w, "loo", false);
    g.lds = detail::get_or<bool>(w, "lds", false);
    g.oracle = detail::get_or<bool>(w, "oracle", true);
    return g;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    Json j;
    try {
      j = Json::parse(in);
    } catch (const Json::exception& e) {
      throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    try {
      return from_json(j, fs::path(path).parent_path());
    } catch (const Json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }

  Json model_json() const {
    std::string loss = to_string(model.loss);
    return {{"layers", model.layer_sizes},
            {"activation", to_string(model.activation)},
            {"loss", loss},
            {"bias", model.bias},
            {"weight_decay", model.weight_decay}};
  }

  Json train_json() const {
    Json t{{"step_size", train.step_size},
           {"max_steps", train.max_steps},
           {"momentum", train.momentum}};
    if (grad_norm_tol) t["grad_norm_tol"] = *grad_norm_tol;
    return t;
  }

  Json simulation_json() const {
    Json s{{"eta", simulation.eta},
           {"steps", simulation.steps},
           {"lambda", simulation.lambda},
           {"variant", to_string(simulation.variant)},
           {"drift_correction", simulation.drift_correction},
           {"epsilon_per_example", epsilon_per_example}};
    if (epsilon) s["epsilon"] = *epsilon;
    return s;
  }

  Json to_json() const {
    Json q = queries.to_json();
    q["functional"] = to_string(functional);
    Json e{{"correlation", to_string(evaluation.correlation)},
           {"oracle", evaluation.oracle == OracleTarget::kTauIf ? "tau_if" : "linear_reference"},
           {"lds_subsets", evaluation.lds_subsets},
           {"lds_alpha", evaluation.lds_alpha},
           {"permutations", evaluation.permutations},
           {"warm_start", evaluation.warm_start}};
    if (evaluation.lds_seed) e["lds_seed"] = *evaluation.lds_seed;
    Json j{{"seed", seed},
           {"dataset", dataset.to_json()},
           {"queries", q},
           {"model", model_json()},
           {"train", train_json()},
           {"simulation", simulation_json()},
           {"evaluation", e},
           {"sweep",
            {{"etas", sweep.etas},
             {"steps", sweep.steps},
             {"lambdas", sweep.lambdas},
             {"epsilons", sweep.epsilons},
             {"loo", sweep.loo},
             {"lds", sweep.lds},
             {"oracle", sweep.oracle}}},
           {"strict", strict},
           {"per_example", per_example},
           {"allow_unconverged", allow_unconverged}};
    j["sources"] = sources ? Json(*sources) : Json("all");
    if (budget) j["budget"] = *budget;
    return j;
  }

  std::uint64_t hash() const { return json_hash(to_json()); }

  // Everything that determines theta*.
  std::uint64_t train_hash() const {
    return json_hash(Json{{"seed", seed},
                          {"dataset", dataset.to_json()},
                          {"model", model_json()},
                          {"train", train_json()}});
  }

  TrainConfig train_config(Eigen::Index parameter_count) const {
    TrainConfig t = train;
    t.seed = seed;
    t.grad_norm_tol = grad_norm_tol.value_or(TrainConfig::default_tolerance(parameter_count));
    return t;
  }

  SimulationConfig simulation_config(std::size_t n) const {
    SimulationConfig s = simulation;
    s.epsilon = epsilon.value_or(epsilon_per_example * static_cast<double>(n));
    return s;
  }

  fs::path output_path(const std::string& name) const {
    const fs::path dir(output_dir);
    return (dir.is_absolute() ? dir : base_dir / dir) / name;
  }
};

// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> eta;
  std::optional<std::int64_t> steps;
  std::optional<double> lambda;
  std::optional<double> epsilon;
  std::optional<std::string> variant;
  bool drift_correction = false;
  bool per_example = false;
  bool strict = false;
  std::optional<double> budget;
  std::optional<std::size_t> workers;
  std::optional<std::string> output_dir;

  void apply(RunConfig& c) const {
    if (seed) c.seed = *seed;
    if (eta) c.simulation.eta = *eta;
    if (steps) c.simulation.steps = *steps;
    if (lambda) c.simulation.lambda = *lambda;
    if (epsilon) c.epsilon = *epsilon;
    if (variant) c.simulation.variant = parse_variant(*variant);
    if (drift_correction) c.simulation.drift_correction = true;
    if (per_example) c.per_example = true;
    if (strict) c.strict = true;
    if (budget) c.budget = *budget;
    c.workers = workers.value_or(default_workers());
    if (output_dir) {
      c.output_dir = *output_dir;
      c.base_dir = fs::current_path();
    }
  }
};

// --- checkpoint -------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'F', 'W', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ParameterVector theta;
  std::uint64_t train_hash = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_hash = 0;
  TrainReport report;
};

// magic(4) version(2) spec(8) train(8) config(8) dataset(8) P(8)
// grad_norm(8) loss(8) steps(8) converged(1) theta(8P)
inline std::string checkpoint_serialize(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint64_t>(c.theta.spec_hash);
  w.put<std::uint64_t>(c.train_hash);
  w.put<std::uint64_t>(c.config_hash);
  w.put<std::uint64_t>(c.dataset_hash);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(c.theta.size()));
  w.put<double>(c.report.final_grad_norm);
  w.put<double>(c.report.final_loss);
  w.put<std::int64_t>(c.report.steps_taken);
  w.put<std::uint8_t>(c.report.converged ? 1 : 0);
  w.put_reals(c.theta.values);
  return w.bytes();
}

inline Checkpoint checkpoint_deserialize(const std::string& bytes) {
  constexpr std::uint64_t header = 4 + 2 + 8 * 5 + 8 * 3 + 1;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CorruptHeaderError("missing FWCK magic");
  }
  detail::ByteReader r(bytes, header);
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CorruptHeaderError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.theta.spec_hash = r.get<std::uint64_t>();
  c.train_hash = r.get<std::uint64_t>();
  c.config_hash = r.get<std::uint64_t>();
  c.dataset_hash = r.get<std::uint64_t>();
  const auto p = r.get<std::uint64_t>();
  c.report.final_grad_norm = r.get<double>();
  c.report.final_loss = r.get<double>();
  c.report.steps_taken = r.get<std::int64_t>();
  c.report.converged = r.get<std::uint8_t>() != 0;
  r.set_expected(header + 8 * p);
  c.theta.values = r.get_reals(p);
  if (r.position() != bytes.size()) throw FormatError("trailing bytes after checkpoint");
  return c;
}

// --- files ------------------------------------------------------------------

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path.string());
}

// Exclusive ownership of an output directory for one invocation.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".fwtrace.lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + dir.string());
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw ConfigError("output directory " + dir.string() +
                        " is locked by another invocation (remove " + path_.string() +
                        " if it is left over)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto ignored = ::write(fd_, pid.data(), pid.size());
  }
  ~OutputLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

// Space-separated key=value tokens from '#' provenance lines.
inline std::map<std::string, std::string> parse_provenance(const std::vector<std::string>& lines) {
  std::map<std::string, std::string> out;
  for (const std::string& line : lines) {
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) {
      const auto eq = tok.find('=');
      if (eq != std::string::npos) out[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
  }
  return out;
}

inline void expect_hash(const std::string& what, std::uint64_t expected, std::uint64_t found) {
  if (expected != found) {
    throw StalenessError(what + " hash mismatch: expected " + hex16(expected) + ", found " +
                         hex16(found));
  }
}

// --- stages -----------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream& log = std::cerr)
      : cfg_(std::move(cfg)), log_(log), model_(cfg_.model) {}

  const RunConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }

  const Dataset& data() {
    if (!data_) data_.emplace(cfg_.dataset.build(cfg_.seed, cfg_.base_dir));
    return *data_;
  }

  const std::vector<Query>& queries() {
    if (!queries_) {
      queries_.emplace();
      for (const Example& e : cfg_.queries.build(cfg_.seed + 1, cfg_.base_dir)) {
        queries_->push_back(to_query(e, cfg_.functional));
      }
      if (queries_->empty()) throw ConfigError("query set is empty");
    }
    return *queries_;
  }

  std::vector<std::uint64_t> source_ids() {
    if (cfg_.sources) return *cfg_.sources;
    std::vector<std::uint64_t> ids;
    for (const Example& e : data().examples()) ids.push_back(e.id);
    return ids;
  }

  std::string provenance(const std::optional<std::uint64_t>& theta_hash = {},
                         const std::optional<SimulationConfig>& sim = {}) const {
    std::string s = "config=" + hex16(cfg_.hash()) + " train=" + hex16(cfg_.train_hash());
    if (theta_hash) s += " theta_star=" + hex16(*theta_hash);
    if (sim) s += " sim=" + hex16(sim->hash());
    return s;
  }

  void check_data(std::size_t n_expected) {
    if (data().size() != n_expected) {
      throw StalenessError("artifact built for N=" + std::to_string(n_expected) +
                           " but the dataset has N=" + std::to_string(data().size()));
    }
  }

  // train: theta* checkpoint plus TrainReport JSON.
  Json train() {
    OutputLock lock(cfg_.output_path(""));
    const Dataset& d = data();
    if (d.features().rows() != model_.spec().input_size()) {
      throw ConfigError("model input size " + std::to_string(model_.spec().input_size()) +
                        " does not match feature dimension " +
                        std::to_string(d.features().rows()));
    }
    const TrainConfig tc = cfg_.train_config(model_.parameter_count());
    const TrainResult r = fwtrace::train(model_, d, tc);
    Checkpoint c{r.theta, cfg_.train_hash(), cfg_.hash(), dataset_hash(d), r.report};
    write_file(cfg_.output_path("checkpoint.fwck"), checkpoint_serialize(c));
    Json report{{"converged", r.report.converged},
                {"final_grad_norm", r.report.final_grad_norm},
                {"grad_norm_tol", tc.grad_norm_tol},
                {"final_loss", r.report.final_loss},
                {"steps_taken", r.report.steps_taken},
                {"parameters", model_.parameter_count()},
                {"examples", d.size()},
                {"theta_star_hash", hex16(r.theta.content_hash())},
                {"spec_hash", hex16(r.theta.spec_hash)},
                {"config_hash", hex16(cfg_.hash())},
                {"train_hash", hex16(cfg_.train_hash())},
                {"config", cfg_.to_json()}};
    write_file(cfg_.output_path("train_report.json"), report.dump(2) + "\n");
    log_ << "trained " << model_.parameter_count() << " parameters in " << r.report.steps_taken
         << " steps, grad norm " << r.report.final_grad_norm
         << (r.report.converged ? " (converged)" : " (NOT converged)") << "\n";
    return report;
  }

  Checkpoint load_checkpoint(const std::optional<std::string>& path = {}) {
    const std::string p = path.value_or(cfg_.output_path("checkpoint.fwck").string());
    Checkpoint c = checkpoint_deserialize(read_file_bytes(p));
    expect_hash("checkpoint model spec", model_.spec_hash(), c.theta.spec_hash);
    expect_hash("checkpoint training setup", cfg_.train_hash(), c.train_hash);
    if (c.theta.size() != model_.parameter_count()) {
      throw StalenessError("checkpoint has " + std::to_string(c.theta.size()) +
                           " parameters, model has " + std::to_string(model_.parameter_count()));
    }
    return c;
  }

  std::optional<double> convergence_guard() const {
    if (cfg_.allow_unconverged) return std::nullopt;
    return cfg_.train_config(model_.parameter_count()).grad_norm_tol;
  }

  Stability stability(const ParameterVector& theta, double lambda, double eta) {
    if (model_.parameter_count() <= kDenseBudget) {
      return stability_check(build_curvature(model_, theta, data(), lambda), eta);
    }
    return stability_check_matrix_free(model_, theta, data(), lambda, eta);
  }

  // simulate: FWIM store for the configured (or given) source examples.
  Json simulate(const std::optional<std::vector<std::uint64_t>>& ids = {},
                const std::optional<std::string>& store_path = {}) {
    OutputLock lock(cfg_.output_path(""));
    const Checkpoint ck = load_checkpoint();
    const std::vector<std::uint64_t> sources = ids.value_or(source_ids());
    if (sources.empty()) throw ConfigError("no source examples to simulate");
    for (std::uint64_t id : sources) {
      if (!data().find(id)) throw MembershipError(id);
    }
    const SimulationConfig sim = cfg_.simulation_config(data().size());
    sim.validate();
    if (const auto tol = convergence_guard()) require_converged(model_, ck.theta, data(), *tol);
    SimulateOptions opts;
    opts.strict_stability = cfg_.strict;
    const Stability st = stability(ck.theta, sim.lambda, sim.eta);
    opts.spectral_radius = st.spectral_radius;
    if (!st.stable) {
      log_ << "warning: spectral radius of I - eta H_lambda is " << st.spectral_radius
           << " (>= 1)\n";
    }
    const BatchResult batch = simulate_batch(model_, ck.theta, data(), sources, sim, opts,
                                             cfg_.workers);
    ImprintStore store;
    for (const InfluenceImprint& imp : batch.imprints) store.insert(imp);
    const std::string path = store_path.value_or(cfg_.output_path("imprints.fwim").string());
    if (!store.empty()) store_save(store, path);
    Json failures = Json::array();
    for (const BatchFailure& f : batch.failures) {
      failures.push_back({{"example_id", f.example_id}, {"error", f.message}});
    }
    Json report{{"store", path},
                {"count", store.size()},
                {"failures", failures},
                {"inner_gradient_evaluations", batch.inner_gradient_evaluations},
                {"spectral_radius", st.spectral_radius},
                {"stable", st.stable},
                {"epsilon", sim.epsilon},
                {"simulation_hash", hex16(sim.hash())},
                {"theta_star_hash", hex16(ck.theta.content_hash())},
                {"config_hash", hex16(cfg_.hash())}};
    write_file(fs::path(path).replace_extension(".json"), report.dump(2) + "\n");
    log_ << "simulated " << store.size() << " of " << sources.size() << " examples, "
         << batch.inner_gradient_evaluations << " inner gradient evaluations\n";
    if (!batch.failures.empty()) {
      throw SimulationFailedError(batch.failures.size(), sources.size(),
                                  batch.failures.front().message);
    }
    return report;
  }

  // attribute: score CSV for every (stored example, query) pair.
  ScoreTable attribute(const std::optional<std::string>& store_path = {},
                       const std::optional<std::string>& scores_path = {},
                       std::optional<Variant> variant = {}) {
    OutputLock lock(cfg_.output_path(""));
    const Checkpoint ck = load_checkpoint();
    const std::string sp = store_path.value_or(cfg_.output_path("imprints.fwim").string());
    const ImprintStore store =
        store_load(sp, ExpectedHashes{model_.spec_hash(), ck.theta.content_hash()});
    check_data(store.header().n);
    AttributeOptions opts;
    opts.variant = variant;
    opts.per_example = cfg_.per_example;
    opts.workers = cfg_.workers;
    const ScoreTable table = attribute_matrix(model_, store, queries(), ck.theta, opts);
    std::string prov = provenance(ck.theta.content_hash(), store.header().config) +
                       " n=" + std::to_string(store.header().n) +
                       " per_example=" + (cfg_.per_example ? "1" : "0") +
                       " store_variant=" + to_string(store.header().config.variant) +
                       " readout=" + to_string(table.variant);
    if (table.variant != store.header().config.variant) prov += " mirrored=1";
    const std::string out = scores_path.value_or(cfg_.output_path("scores.csv").string());
    write_file(out, scores_to_csv(table, prov));
    for (const std::string& f : table.failures) log_ << "failed cell: " << f << "\n";
    log_ << "scored " << table.rows() << " x " << table.cols() << " pairs with "
         << table.forward_passes << " forward passes\n";
    return table;
  }

  struct LoadedScores {
    ScoreTable table;
    std::map<std::string, std::string> provenance;
  };

  LoadedScores load_scores(const Checkpoint& ck, const std::optional<std::string>& path) {
    const std::string p = path.value_or(cfg_.output_path("scores.csv").string());
    ParsedScores parsed = scores_from_csv(read_file_bytes(p));
    LoadedScores s{std::move(parsed.table), parse_provenance(parsed.comments)};
    const auto it = s.provenance.find("theta_star");
    if (it == s.provenance.end()) throw FormatError(p + " has no theta_star provenance");
    expect_hash("score table theta*", ck.theta.content_hash(), parse_hex16(it->second));
    s.table.per_example = s.provenance.count("per_example") && s.provenance["per_example"] == "1";
    if (s.table.any_failed()) throw FormatError(p + ": " + s.table.failures.front());
    return s;
  }

  RetrainOptions retrain_options(const Checkpoint& ck) const {
    RetrainOptions ro;
    ro.train = cfg_.train_config(model_.parameter_count());
    if (cfg_.evaluation.warm_start) ro.warm_start = ck.theta;
    ro.workers = cfg_.workers;
    return ro;
  }

  // evaluate: EvaluationReport JSON for mode loo | lds | oracle.
  Json evaluate(const std::string& mode, const std::optional<std::string>& scores_path = {}) {
    OutputLock lock(cfg_.output_path(""));
    const Checkpoint ck = load_checkpoint();
    if (!cfg_.allow_unconverged) {
      require_converged(model_, ck.theta, data(), *convergence_guard());
    }
    const LoadedScores scores = load_scores(ck, scores_path);
    const ScoreTable& table = scores.table;
    const Correlation kind = cfg_.evaluation.correlation;
    Json report{{"mode", mode},
                {"correlation", to_string(kind)},
                {"examples", table.rows()},
                {"queries", table.cols()},
                {"forward_passes", table.forward_passes},
                {"theta_star_hash", hex16(ck.theta.content_hash())},
                {"config_hash", hex16(cfg_.hash())},
                {"scores_provenance", scores.provenance},
                {"config", cfg_.to_json()}};
    std::vector<Query> qs = select_queries(table.query_ids);
    auto put_summary = [&](const char* key, const MetricSummary& m) {
      report[key] = {{"mean", m.mean},
                     {"standard_error", m.standard_error},
                     {"per_query", m.per_query}};
    };
    if (mode == "loo") {
      const LooGroundTruth truth =
          compute_loo(model_, data(), qs, ck.theta, table.example_ids, retrain_options(ck));
      const MetricSummary m = loo_eval(table, truth, kind);
      put_summary("loo", m);
      report["retrains"] = truth.retrains;
      report["unconverged_retrains"] = truth.unconverged;
      report["max_retrain_steps"] = truth.max_steps_taken;
      if (cfg_.evaluation.permutations > 0) {
        const std::vector<double> null = loo_permutation_null(
            table, truth, cfg_.evaluation.permutations, cfg_.seed, kind);
        const double q95 = quantile_sorted(null, 0.95);
        report["null_q95"] = q95;
        report["above_null_q95"] = m.mean > q95;
      }
    } else if (mode == "lds") {
      if (table.rows() != data().size()) {
        throw ConfigError("LDS needs scores for all " + std::to_string(data().size()) +
                          " training examples, the score table has " +
                          std::to_string(table.rows()) + " (simulate with sources \"all\")");
      }
      const SubsetDesign design =
          SubsetDesign::make(data().size(), cfg_.evaluation.lds_subsets, cfg_.evaluation.lds_alpha,
                             cfg_.evaluation.lds_seed.value_or(cfg_.seed));
      const LdsGroundTruth truth = compute_lds(model_, data(), qs, design, retrain_options(ck));
      put_summary("lds", lds_eval(table, data(), design, truth, kind));
      report["retrains"] = truth.retrains;
      report["unconverged_retrains"] = truth.unconverged;
      report["subsets"] = design.masks.size();
      report["alpha"] = design.alpha;
    } else if (mode == "oracle") {
      const SimulationConfig sim = cfg_.simulation_config(data().size());
      const CurvatureBundle bundle = build_curvature(model_, ck.theta, data(), sim.lambda);
      const DenseMatrix ref =
          oracle_table(model_, ck.theta, data(), qs, table.example_ids, bundle,
                       cfg_.evaluation.oracle, sim.eta, sim.steps, table.per_example);
      const OracleAgreement a = oracle_agreement(flatten(table.values), flatten(ref), kind);
      report["oracle"] = {
          {"target", cfg_.evaluation.oracle == OracleTarget::kTauIf ? "tau_if" : "linear_reference"},
          {"rho", a.rho},
          {"max_relative_deviation", a.max_relative_deviation}};
    } else {
      throw ConfigError("unknown evaluation mode '" + mode + "' (loo, lds or oracle)");
    }
    write_file(cfg_.output_path("report_" + mode + ".json"), report.dump(2) + "\n");
    return report;
  }

  // sweep: one CSV row per grid point.
  std::vector<SweepRow> sweep(const std::optional<SweepConfig>& grid_override = {}) {
    OutputLock lock(cfg_.output_path(""));
    const SweepConfig g = grid_override.value_or(cfg_.sweep);
    const Checkpoint ck = load_checkpoint();
    if (!cfg_.allow_unconverged) {
      require_converged(model_, ck.theta, data(), *convergence_guard());
    }
    const double n = static_cast<double>(data().size());
    SweepGrid grid;
    grid.etas = g.etas.empty() ? std::vector<double>{cfg_.simulation.eta} : g.etas;
    grid.steps = g.steps.empty() ? std::vector<std::int64_t>{cfg_.simulation.steps} : g.steps;
    grid.lambdas = g.lambdas.empty() ? std::vector<double>{cfg_.simulation.lambda} : g.lambdas;
    if (g.epsilons.empty()) {
      grid.epsilons = {cfg_.simulation_config(data().size()).epsilon};
    } else {
      for (double w : g.epsilons) grid.epsilons.push_back(w * n);
    }
    grid.variant = cfg_.simulation.variant;
    grid.drift_correction = cfg_.simulation.drift_correction;

    SweepSetup setup;
    setup.model = &model_;
    setup.data = &data();
    setup.theta_star = ck.theta;
    setup.example_ids = source_ids();
    setup.queries = queries();
    setup.oracle = cfg_.evaluation.oracle;
    setup.correlation = cfg_.evaluation.correlation;
    setup.workers = cfg_.workers;
    const double estimate = sweep_cost_estimate(grid, setup.example_ids.size(), setup.queries.size());
    if (cfg_.budget && estimate > *cfg_.budget) throw BudgetError(estimate, *cfg_.budget);
    if (g.oracle && model_.parameter_count() <= kDenseBudget) {
      setup.hessian = assemble_hessian(model_, ck.theta, data());
    }
    std::optional<LooGroundTruth> loo;
    std::optional<SubsetDesign> design;
    std::optional<LdsGroundTruth> lds;
    if (g.loo) {
      loo = compute_loo(model_, data(), setup.queries, ck.theta, setup.example_ids,
                        retrain_options(ck));
      setup.loo = &*loo;
    }
    if (g.lds) {
      design = SubsetDesign::make(data().size(), cfg_.evaluation.lds_subsets,
                                  cfg_.evaluation.lds_alpha,
                                  cfg_.evaluation.lds_seed.value_or(cfg_.seed));
      lds = compute_lds(model_, data(), setup.queries, *design, retrain_options(ck));
      setup.design = &*design;
      setup.lds = &*lds;
    }
    const std::vector<SweepRow> rows = fwtrace::sweep(setup, grid);
    write_file(cfg_.output_path("sweep.csv"),
               sweep_to_csv(rows, provenance(ck.theta.content_hash())));
    log_ << "swept " << rows.size() << " grid points\n";
    return rows;
  }

  Json ingest() {
    const Dataset& d = data();
    std::set<int> labels;
    for (const Example& e : d.examples()) labels.insert(e.label);
    return {{"examples", d.size()},
            {"dimension", d.features().rows()},
            {"labels", labels.size()},
            {"queries", queries().size()},
            {"dataset_hash", hex16(dataset_hash(d))}};
  }

 private:
  std::vector<Query> select_queries(const std::vector<std::uint64_t>& ids) {
    std::map<std::uint64_t, const Query*> by_id;
    for (const Query& q : queries()) by_id[q.id] = &q;
    std::vector<Query> out;
    for (std::uint64_t id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw StalenessError("score table query " + std::to_string(id) +
                                                  " is not in the configured query set");
      out.push_back(*it->second);
    }
    return out;
  }

  RunConfig cfg_;
  std::ostream& log_;
  Model model_;
  std::optional<Dataset> data_;
  std::optional<std::vector<Query>> queries_;
};

}  // namespace fwtrace

#endif  // FWTRACE_PIPELINE_HPP_
