#ifndef FWTRACE_TRAINER_HPP_
#define FWTRACE_TRAINER_HPP_

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "fwtrace/errors.hpp"
#include "fwtrace/model.hpp"

namespace fwtrace {

struct TrainConfig {
  double step_size = 0.1;
  std::int64_t max_steps = 100000;
  double grad_norm_tol = 1e-6;
  std::uint64_t seed = 0;
  // Nesterov momentum coefficient. Zero gives plain full-batch gradient descent.
  double momentum = 0.0;

  // 1e-6 * sqrt(P).
  static double default_tolerance(Eigen::Index parameter_count) {
    return 1e-6 * std::sqrt(static_cast<double>(parameter_count));
  }

  void validate() const {
    if (!(step_size > 0.0)) throw ConfigError("step_size must be > 0");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (!(grad_norm_tol > 0.0)) throw ConfigError("grad_norm_tol must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  }
};

struct TrainReport {
  double final_grad_norm = 0.0;
  std::int64_t steps_taken = 0;
  double final_loss = 0.0;
  bool converged = false;
};

struct TrainResult {
  ParameterVector theta;
  TrainReport report;
};

// Deterministic full-batch descent on the mean objective from `start`.
// Stops when the gradient norm reaches cfg.grad_norm_tol or after
// cfg.max_steps updates; the report always describes the returned point.
inline TrainResult descend(const Model& model, const Dataset& data, const TrainConfig& cfg,
                           ParameterVector start) {
  cfg.validate();
  if (data.empty()) throw ConfigError("cannot train on an empty dataset");
  ParameterVector theta = std::move(start);
  ParameterVector previous = theta;
  for (std::int64_t step = 0;; ++step) {
    // Nesterov look-ahead point; equals theta when momentum is zero.
    ParameterVector probe = theta;
    if (cfg.momentum > 0.0 && step > 0) {
      probe.values += cfg.momentum * (theta.values - previous.values);
    }
    Model::ValueAndGradient vg;
    try {
      vg = model.value_and_grad_mean(probe, data);
    } catch (const NumericError&) {
      throw DivergenceError(step);
    }
    auto& [loss, grad] = vg;
    if (!std::isfinite(loss) || !grad.allFinite()) throw DivergenceError(step);
    const double norm = grad.norm();
    if (norm <= cfg.grad_norm_tol || step == cfg.max_steps) {
      return {std::move(probe), {norm, step, loss, norm <= cfg.grad_norm_tol}};
    }
    previous = std::move(theta);
    probe.values -= cfg.step_size * grad;
    theta = std::move(probe);
  }
}

inline TrainResult train(const Model& model, const Dataset& data, const TrainConfig& cfg) {
  return descend(model, data, cfg, model.param_init(cfg.seed));
}

// Same pipeline as train() restricted to the masked-in examples. With no
// warm start the run begins from param_init(cfg.seed), so differences from
// the full run isolate the data change.
inline TrainResult retrain_subset(const Model& model, const Dataset& data,
                                  const std::vector<bool>& included, const TrainConfig& cfg,
                                  const std::optional<ParameterVector>& warm_start = {}) {
  Dataset kept = data.subset(included);
  if (kept.empty()) throw ConfigError("retrain_subset: no examples included");
  return descend(model, kept, cfg, warm_start ? *warm_start : model.param_init(cfg.seed));
}

inline double grad_mean_norm(const Model& model, const ParameterVector& theta,
                             const Dataset& data) {
  return model.grad_mean(theta, data).norm();
}

// Attribution assumes a stationary reference point; refuse otherwise.
inline void require_converged(const Model& model, const ParameterVector& theta,
                              const Dataset& data, double tolerance) {
  const double norm = grad_mean_norm(model, theta, data);
  if (!(norm <= tolerance)) throw NotConvergedError(norm, tolerance);
}

}  // namespace fwtrace

#endif  // FWTRACE_TRAINER_HPP_
