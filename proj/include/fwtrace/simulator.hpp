#ifndef FWTRACE_SIMULATOR_HPP_
#define FWTRACE_SIMULATOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fwtrace/errors.hpp"
#include "fwtrace/hash.hpp"
#include "fwtrace/model.hpp"
#include "fwtrace/parallel.hpp"
#include "fwtrace/trainer.hpp"

namespace fwtrace {

// pair: up- and down-weighted trajectories. single: only the up-weighted one,
// mirrored at readout time.
enum class Variant : std::uint8_t { kPair = 0, kSingle = 1 };

inline const char* to_string(Variant v) { return v == Variant::kPair ? "pair" : "single"; }
inline Variant parse_variant(const std::string& s) {
  if (s == "pair") return Variant::kPair;
  if (s == "single") return Variant::kSingle;
  throw ConfigError("unknown variant '" + s + "'");
}

struct SimulationConfig {
  double epsilon = 1.0;
  double eta = 3e-2;
  std::int64_t steps = 500;
  double lambda = 1e-3;
  Variant variant = Variant::kPair;
  bool drift_correction = false;
  bool record_diagnostics = false;

  // epsilon / N = 1e-2, eta = 3e-2, T = 500, lambda = 1e-3.
  static SimulationConfig defaults(std::size_t n) {
    SimulationConfig cfg;
    cfg.epsilon = 1e-2 * static_cast<double>(n);
    return cfg;
  }

  void validate(bool allow_signed_epsilon = false) const {
    if (!std::isfinite(epsilon) || epsilon == 0.0 || (!allow_signed_epsilon && epsilon < 0.0)) {
      throw ConfigError("epsilon must be > 0");
    }
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be > 0");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  }

  std::uint8_t flags() const {
    return static_cast<std::uint8_t>((drift_correction ? 1 : 0) | (record_diagnostics ? 2 : 0));
  }

  // Hash of the fields persisted in an imprint store config block.
  std::uint64_t hash() const {
    Fnv1a h;
    h.text("fwtrace.simcfg.v1");
    h.value(epsilon);
    h.value(eta);
    h.value(lambda);
    h.value<std::uint64_t>(static_cast<std::uint64_t>(steps));
    h.value(static_cast<std::uint8_t>(variant));
    h.value(flags());
    return h.digest();
  }

  // Inner gradient evaluations per simulated example: T * k with k = 1 or 2
  // trajectories, plus one for the unperturbed twin under drift correction.
  std::uint64_t inner_evaluations_per_example() const {
    const std::uint64_t k =
        (variant == Variant::kPair ? 2u : 1u) + (drift_correction ? 1u : 0u);
    return static_cast<std::uint64_t>(steps) * k;
  }

  bool operator==(const SimulationConfig&) const = default;
};

// Parameter displacements theta_T^(+/-) - theta* for one training example.
struct InfluenceImprint {
  std::uint64_t example_id = 0;
  RealVector delta_plus;
  std::optional<RealVector> delta_minus;
  SimulationConfig config;
  std::uint64_t theta_star_hash = 0;
  std::uint64_t spec_hash = 0;
  std::uint64_t n = 0;
  // Runtime-only blow-up flag; not persisted in the store format.
  bool unstable = false;

  bool operator==(const InfluenceImprint& o) const {
    return example_id == o.example_id && delta_plus == o.delta_plus &&
           delta_minus.has_value() == o.delta_minus.has_value() &&
           (!delta_minus || *delta_minus == *o.delta_minus) && config == o.config &&
           theta_star_hash == o.theta_star_hash && spec_hash == o.spec_hash && n == o.n;
  }
};

// Per-step norms for t = 0..T. delta/sigma are empty for variant=single.
struct TrajectoryDiagnostics {
  std::vector<double> delta_norm;  // ||theta_t^+ - theta_t^-||
  std::vector<double> sigma_norm;  // ||Delta theta_t^+ + Delta theta_t^-||
  std::vector<double> plus_norm;
  std::vector<double> minus_norm;
};

struct SimulateOptions {
  // Spectral radius of I - eta H_lambda when known (stability_check).
  std::optional<double> spectral_radius;
  // Refuse to run when spectral_radius >= 1 instead of warning.
  bool strict_stability = false;
  // Gradient-norm guard on theta*; unset skips the check.
  std::optional<double> convergence_tol;
  // Testing hook: permits negative epsilon to exercise the sign symmetry.
  bool allow_signed_epsilon = false;
  // Additional steps at which displacements are captured (for T sweeps).
  std::vector<std::int64_t> snapshot_steps;
};

struct DisplacementSnapshot {
  RealVector plus;
  std::optional<RealVector> minus;
};

struct SimulationResult {
  InfluenceImprint imprint;
  std::optional<TrajectoryDiagnostics> diagnostics;
  std::map<std::int64_t, DisplacementSnapshot> snapshots;
  std::uint64_t inner_gradient_evaluations = 0;
  // Set when a known spectral radius >= 1 was ignored (non-strict mode).
  bool stability_warning = false;
};

// Runs the reweighted damped descent
//   theta_{t+1} = theta_t - eta [grad L(theta_t) + s (eps/N) grad l(theta_t; b)
//                                 + lambda (theta_t - theta*)]
// from theta_0 = theta* for s = +1 (and s = -1 for the pair variant).
inline SimulationResult simulate(const Model& model, const ParameterVector& theta_star,
                                 const Dataset& data, std::uint64_t example_id,
                                 const SimulationConfig& cfg, const SimulateOptions& opts = {}) {
  cfg.validate(opts.allow_signed_epsilon);
  const Example& b = data.by_id(example_id);
  if (opts.convergence_tol) require_converged(model, theta_star, data, *opts.convergence_tol);
  SimulationResult result;
  if (opts.spectral_radius && !(*opts.spectral_radius < 1.0)) {
    if (opts.strict_stability) throw UnstableConfigError(*opts.spectral_radius);
    result.stability_warning = true;
  }

  const bool pair = cfg.variant == Variant::kPair;
  const double weight = cfg.epsilon / static_cast<double>(data.size());

  ParameterVector plus = theta_star;
  ParameterVector minus = theta_star;
  ParameterVector twin = theta_star;
  const double g_b_norm = model.grad_example(theta_star, b).norm();

  auto step_of = [&](const ParameterVector& theta, double sign) {
    RealVector g = model.grad_mean(theta, data);
    if (sign != 0.0) g += (sign * weight) * model.grad_example(theta, b);
    if (cfg.lambda > 0.0) g += cfg.lambda * (theta.values - theta_star.values);
    return g;
  };

  auto displacement = [&](const ParameterVector& theta) -> RealVector {
    RealVector d = theta.values - theta_star.values;
    if (cfg.drift_correction) d -= twin.values - theta_star.values;
    return d;
  };

  std::optional<TrajectoryDiagnostics> diag;
  auto record = [&]() {
    if (!diag) return;
    const RealVector dp = displacement(plus);
    diag->plus_norm.push_back(dp.norm());
    if (pair) {
      const RealVector dm = displacement(minus);
      diag->minus_norm.push_back(dm.norm());
      diag->delta_norm.push_back((dp - dm).norm());
      diag->sigma_norm.push_back((dp + dm).norm());
    }
  };
  if (cfg.record_diagnostics) diag.emplace();
  record();

  std::vector<std::int64_t> snaps = opts.snapshot_steps;
  std::sort(snaps.begin(), snaps.end());
  auto take_snapshot = [&](std::int64_t t) {
    if (!std::binary_search(snaps.begin(), snaps.end(), t)) return;
    DisplacementSnapshot s{displacement(plus), {}};
    if (pair) s.minus = displacement(minus);
    result.snapshots[t] = std::move(s);
  };
  take_snapshot(0);

  for (std::int64_t t = 0; t < cfg.steps; ++t) {
    bool finite = true;
    try {
      const RealVector up = step_of(plus, 1.0);
      plus.values -= cfg.eta * up;
      ++result.inner_gradient_evaluations;
      finite = plus.values.allFinite();
      if (pair) {
        const RealVector down = step_of(minus, -1.0);
        minus.values -= cfg.eta * down;
        ++result.inner_gradient_evaluations;
        finite = finite && minus.values.allFinite();
      }
      if (cfg.drift_correction) {
        const RealVector free = step_of(twin, 0.0);
        twin.values -= cfg.eta * free;
        ++result.inner_gradient_evaluations;
        finite = finite && twin.values.allFinite();
      }
    } catch (const NumericError&) {
      finite = false;  // the objective overflowed at an iterate
    }
    if (!finite) throw InstabilityError(t + 1, opts.spectral_radius);
    record();
    take_snapshot(t + 1);
  }

  InfluenceImprint& imprint = result.imprint;
  imprint.example_id = example_id;
  imprint.delta_plus = displacement(plus);
  if (pair) imprint.delta_minus = displacement(minus);
  imprint.config = cfg;
  imprint.theta_star_hash = theta_star.content_hash();
  imprint.spec_hash = theta_star.spec_hash;
  imprint.n = data.size();
  const double guard = 1e3 * std::abs(weight) * g_b_norm * static_cast<double>(cfg.steps) * cfg.eta;
  imprint.unstable = imprint.delta_plus.norm() > guard;
  result.diagnostics = std::move(diag);
  return result;
}

struct BatchFailure {
  std::uint64_t example_id = 0;
  std::string message;
};

struct BatchResult {
  std::vector<InfluenceImprint> imprints;
  std::vector<BatchFailure> failures;
  std::uint64_t inner_gradient_evaluations = 0;
  bool stability_warning = false;
};

// Independent simulate() calls; a failure on one example is recorded and the
// rest of the batch continues.
inline BatchResult simulate_batch(const Model& model, const ParameterVector& theta_star,
                                  const Dataset& data, const std::vector<std::uint64_t>& ids,
                                  const SimulationConfig& cfg, SimulateOptions opts = {},
                                  std::size_t workers = 1) {
  cfg.validate(opts.allow_signed_epsilon);
  if (opts.convergence_tol) {
    require_converged(model, theta_star, data, *opts.convergence_tol);
    opts.convergence_tol.reset();
  }
  if (opts.spectral_radius && !(*opts.spectral_radius < 1.0) && opts.strict_stability) {
    throw UnstableConfigError(*opts.spectral_radius);
  }
  std::vector<std::optional<SimulationResult>> slots(ids.size());
  std::vector<std::string> errors(ids.size());
  parallel_for(ids.size(), workers, [&](std::size_t i) {
    try {
      slots[i] = simulate(model, theta_star, data, ids[i], cfg, opts);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  BatchResult out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (slots[i]) {
      out.inner_gradient_evaluations += slots[i]->inner_gradient_evaluations;
      out.stability_warning = out.stability_warning || slots[i]->stability_warning;
      out.imprints.push_back(std::move(slots[i]->imprint));
    } else {
      out.failures.push_back({ids[i], errors[i]});
    }
  }
  return out;
}

// Per-step ratios of diagnostics recorded at epsilon and epsilon / 2. The
// antisymmetric part should scale linearly (ratio 2) and the symmetric part
// quadratically (ratio 4). 0/0 entries (t = 0) are reported as 0.
struct DiagnosticsReport {
  std::vector<double> delta_ratio;
  std::vector<double> sigma_ratio;
  double final_delta_ratio = 0.0;
  double final_sigma_ratio = 0.0;
  // Whether ||delta_t|| <= (2 eps/N) ||g_b|| eta (1 - rho^t)/(1 - rho) (1 + tol)
  // held at every step; set only when a spectral radius below 1 is supplied.
  std::optional<bool> within_stability_bound;
};

inline DiagnosticsReport diagnostics_check(const TrajectoryDiagnostics& at_eps,
                                           const TrajectoryDiagnostics& at_half_eps,
                                           const SimulationConfig& cfg, std::size_t n,
                                           double g_b_norm,
                                           std::optional<double> spectral_radius = {},
                                           double tolerance = 1e-6) {
  if (at_eps.delta_norm.empty() || at_half_eps.delta_norm.empty()) {
    throw ConfigError("diagnostics_check needs pair-variant diagnostics for both runs");
  }
  if (at_eps.delta_norm.size() != at_half_eps.delta_norm.size()) {
    throw DimensionError("diagnostics recorded with different step counts");
  }
  auto ratio = [](double a, double b) { return (a == 0.0 && b == 0.0) ? 0.0 : a / b; };
  DiagnosticsReport r;
  for (std::size_t t = 0; t < at_eps.delta_norm.size(); ++t) {
    r.delta_ratio.push_back(ratio(at_eps.delta_norm[t], at_half_eps.delta_norm[t]));
    r.sigma_ratio.push_back(ratio(at_eps.sigma_norm[t], at_half_eps.sigma_norm[t]));
  }
  r.final_delta_ratio = r.delta_ratio.back();
  r.final_sigma_ratio = r.sigma_ratio.back();
  if (spectral_radius && *spectral_radius < 1.0) {
    const double rho = *spectral_radius;
    const double w = std::abs(cfg.epsilon) / static_cast<double>(n);
    bool ok = true;
    for (std::size_t t = 0; t < at_eps.delta_norm.size(); ++t) {
      const double bound = 2.0 * w * g_b_norm * cfg.eta *
                           (1.0 - std::pow(rho, static_cast<double>(t))) / (1.0 - rho);
      ok = ok && at_eps.delta_norm[t] <= bound * (1.0 + tolerance) + 1e-300;
    }
    r.within_stability_bound = ok;
  }
  return r;
}

}  // namespace fwtrace

#endif  // FWTRACE_SIMULATOR_HPP_
