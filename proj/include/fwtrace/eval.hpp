#ifndef FWTRACE_EVAL_HPP_
#define FWTRACE_EVAL_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fwtrace/curvature.hpp"
#include "fwtrace/data.hpp"
#include "fwtrace/errors.hpp"
#include "fwtrace/model.hpp"
#include "fwtrace/parallel.hpp"
#include "fwtrace/readout.hpp"
#include "fwtrace/simulator.hpp"
#include "fwtrace/trainer.hpp"

namespace fwtrace {

enum class Correlation : std::uint8_t { kSpearman = 0, kPearson = 1 };

inline const char* to_string(Correlation c) {
  return c == Correlation::kSpearman ? "spearman" : "pearson";
}
inline Correlation parse_correlation(const std::string& s) {
  if (s == "spearman") return Correlation::kSpearman;
  if (s == "pearson") return Correlation::kPearson;
  throw ConfigError("unknown correlation '" + s + "'");
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("correlation inputs differ in length");
  if (x.size() < 2) throw MetricUndefinedError("need at least 2 points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw MetricUndefinedError("zero variance in input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Ranks starting at 1, ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  for (double v : x) {
    if (!std::isfinite(v)) throw MetricUndefinedError("non-finite score");
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw MetricUndefinedError("non-finite ground truth");
  }
  return pearson(average_ranks(x), average_ranks(y));
}

inline double correlation(const std::vector<double>& x, const std::vector<double>& y,
                          Correlation kind) {
  return kind == Correlation::kSpearman ? spearman(x, y) : pearson(x, y);
}

struct MetricSummary {
  std::vector<double> per_query;
  double mean = 0.0;
  double standard_error = 0.0;
};

inline MetricSummary summarize(std::vector<double> per_query) {
  MetricSummary s;
  const double n = static_cast<double>(per_query.size());
  s.mean = std::accumulate(per_query.begin(), per_query.end(), 0.0) / n;
  if (per_query.size() > 1) {
    double ss = 0.0;
    for (double v : per_query) ss += (v - s.mean) * (v - s.mean);
    s.standard_error = std::sqrt(ss / (n - 1.0) / n);
  }
  s.per_query = std::move(per_query);
  return s;
}

// Retraining protocol shared by LOO and LDS ground truth. Without a warm
// start every retrain begins from param_init(train.seed).
struct RetrainOptions {
  TrainConfig train;
  std::optional<ParameterVector> warm_start;
  std::size_t workers = 1;
};

// Delta_b(q) = F(q; retrained without b) - F(q; reference). Rows follow
// example_ids, columns the query order.
struct LooGroundTruth {
  std::vector<std::uint64_t> example_ids;
  std::vector<std::uint64_t> query_ids;
  DenseMatrix delta;
  RealVector reference_outputs;
  std::uint64_t retrains = 0;
  std::int64_t max_steps_taken = 0;
  std::size_t unconverged = 0;
};

inline RealVector query_outputs(const Model& model, const ParameterVector& theta,
                                const std::vector<Query>& queries) {
  RealVector out(static_cast<Eigen::Index>(queries.size()));
  for (std::size_t j = 0; j < queries.size(); ++j) {
    out[static_cast<Eigen::Index>(j)] = model.query_value(theta, queries[j]);
  }
  return out;
}

inline LooGroundTruth compute_loo(const Model& model, const Dataset& data,
                                  const std::vector<Query>& queries,
                                  const ParameterVector& reference,
                                  const std::vector<std::uint64_t>& example_ids,
                                  const RetrainOptions& opts) {
  LooGroundTruth truth;
  truth.example_ids = example_ids;
  for (const Query& q : queries) truth.query_ids.push_back(q.id);
  truth.reference_outputs = query_outputs(model, reference, queries);
  truth.delta = DenseMatrix::Zero(static_cast<Eigen::Index>(example_ids.size()),
                                  static_cast<Eigen::Index>(queries.size()));
  std::vector<TrainReport> reports(example_ids.size());
  parallel_for(example_ids.size(), opts.workers, [&](std::size_t i) {
    std::vector<bool> mask(data.size(), true);
    const auto pos = data.find(example_ids[i]);
    if (!pos) throw MembershipError(example_ids[i]);
    mask[*pos] = false;
    const TrainResult r = retrain_subset(model, data, mask, opts.train, opts.warm_start);
    reports[i] = r.report;
    truth.delta.row(static_cast<Eigen::Index>(i)) =
        (query_outputs(model, r.theta, queries) - truth.reference_outputs).transpose();
  });
  truth.retrains = example_ids.size();
  for (const TrainReport& r : reports) {
    truth.max_steps_taken = std::max(truth.max_steps_taken, r.steps_taken);
    if (!r.converged) ++truth.unconverged;
  }
  return truth;
}

// Removal is down-weighting by one example, while scores measure the effect of
// up-weighting; the truth is negated once so that a perfect estimator scores +1.
inline constexpr double kLooSignAlignment = -1.0;

namespace detail {

inline std::size_t row_of(const std::vector<std::uint64_t>& ids, std::uint64_t id,
                          const char* what) {
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) {
    throw DimensionError(std::string(what) + " has no entry for id " + std::to_string(id));
  }
  return static_cast<std::size_t>(it - ids.begin());
}

}  // namespace detail

// Per query, correlation over examples between scores and aligned removal
// effects; the aggregate is the mean over queries.
inline MetricSummary loo_eval(const ScoreTable& scores, const LooGroundTruth& truth,
                              Correlation kind = Correlation::kSpearman) {
  if (truth.example_ids.size() < 3) throw ConfigError("LOO evaluation needs at least 3 examples");
  std::vector<double> per_query;
  for (std::size_t j = 0; j < truth.query_ids.size(); ++j) {
    const std::size_t sj = detail::row_of(scores.query_ids, truth.query_ids[j], "score table");
    std::vector<double> s, t;
    for (std::size_t i = 0; i < truth.example_ids.size(); ++i) {
      const std::size_t si =
          detail::row_of(scores.example_ids, truth.example_ids[i], "score table");
      s.push_back(scores.values(static_cast<Eigen::Index>(si), static_cast<Eigen::Index>(sj)));
      t.push_back(kLooSignAlignment *
                  truth.delta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    per_query.push_back(correlation(s, t, kind));
  }
  return summarize(std::move(per_query));
}

// Permutation null for loo_eval: example labels of the score rows are
// shuffled (the same permutation for every query) and the mean correlation
// recomputed. Returns the sorted null means.
inline std::vector<double> loo_permutation_null(const ScoreTable& scores,
                                                const LooGroundTruth& truth,
                                                std::size_t permutations, std::uint64_t seed,
                                                Correlation kind = Correlation::kSpearman) {
  std::mt19937_64 rng(seed);
  std::vector<double> null;
  null.reserve(permutations);
  ScoreTable shuffled = scores;
  std::vector<std::size_t> perm(scores.rows());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t k = 0; k < permutations; ++k) {
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(perm[i - 1], perm[pick(rng)]);
    }
    for (std::size_t i = 0; i < perm.size(); ++i) {
      shuffled.values.row(static_cast<Eigen::Index>(i)) =
          scores.values.row(static_cast<Eigen::Index>(perm[i]));
    }
    null.push_back(loo_eval(shuffled, truth, kind).mean);
  }
  std::sort(null.begin(), null.end());
  return null;
}

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ConfigError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// M random subsets of round(alpha N) examples each, all distinct.
struct SubsetDesign {
  std::size_t m = 50;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  std::vector<std::vector<bool>> masks;

  static SubsetDesign make(std::size_t n, std::size_t m, double alpha, std::uint64_t seed) {
    if (m < 3) throw ConfigError("LDS design needs M >= 3 subsets");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    const auto k = static_cast<std::size_t>(std::llround(alpha * static_cast<double>(n)));
    if (k == 0 || k >= n) throw ConfigError("round(alpha N) must lie in [1, N-1]");
    SubsetDesign d{m, alpha, seed, {}};
    std::set<std::vector<bool>> seen;
    std::mt19937_64 rng(seed);
    std::size_t attempts = 0;
    while (d.masks.size() < m) {
      if (++attempts > 100 * m) throw ConfigError("cannot draw enough distinct subsets");
      std::vector<bool> mask(n, false);
      for (std::size_t i : seeded_subset(n, k, rng())) mask[i] = true;
      if (seen.insert(mask).second) d.masks.push_back(std::move(mask));
    }
    return d;
  }
};

// F(q; retrained on subset s) for every subset and query (M x Q).
struct LdsGroundTruth {
  std::vector<std::uint64_t> query_ids;
  DenseMatrix outputs;
  std::uint64_t retrains = 0;
  std::size_t unconverged = 0;
};

inline LdsGroundTruth compute_lds(const Model& model, const Dataset& data,
                                  const std::vector<Query>& queries, const SubsetDesign& design,
                                  const RetrainOptions& opts) {
  LdsGroundTruth truth;
  for (const Query& q : queries) truth.query_ids.push_back(q.id);
  truth.outputs = DenseMatrix::Zero(static_cast<Eigen::Index>(design.masks.size()),
                                    static_cast<Eigen::Index>(queries.size()));
  std::vector<char> converged(design.masks.size(), 0);
  parallel_for(design.masks.size(), opts.workers, [&](std::size_t s) {
    const TrainResult r = retrain_subset(model, data, design.masks[s], opts.train, opts.warm_start);
    converged[s] = r.report.converged;
    truth.outputs.row(static_cast<Eigen::Index>(s)) =
        query_outputs(model, r.theta, queries).transpose();
  });
  truth.retrains = design.masks.size();
  truth.unconverged =
      static_cast<std::size_t>(std::count(converged.begin(), converged.end(), 0));
  return truth;
}

// Per query, correlation over subsets between the summed scores of the
// included examples and the retrained output. `data` fixes the mask order.
inline MetricSummary lds_eval(const ScoreTable& scores, const Dataset& data,
                              const SubsetDesign& design, const LdsGroundTruth& truth,
                              Correlation kind = Correlation::kSpearman) {
  if (design.masks.size() < 3) throw ConfigError("LDS design needs M >= 3 subsets");
  if (static_cast<std::size_t>(truth.outputs.rows()) != design.masks.size()) {
    throw DimensionError("LDS outputs need one row per subset");
  }
  std::vector<std::size_t> score_row(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    score_row[i] = detail::row_of(scores.example_ids, data[i].id, "score table");
  }
  std::vector<double> per_query;
  for (std::size_t j = 0; j < truth.query_ids.size(); ++j) {
    const auto sj = static_cast<Eigen::Index>(
        detail::row_of(scores.query_ids, truth.query_ids[j], "score table"));
    std::vector<double> predicted, actual;
    for (std::size_t s = 0; s < design.masks.size(); ++s) {
      double sum = 0.0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (design.masks[s][i]) sum += scores.values(static_cast<Eigen::Index>(score_row[i]), sj);
      }
      predicted.push_back(sum);
      actual.push_back(truth.outputs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)));
    }
    per_query.push_back(correlation(predicted, actual, kind));
  }
  return summarize(std::move(per_query));
}

struct OracleAgreement {
  double rho = 0.0;
  double max_relative_deviation = 0.0;
};

inline OracleAgreement oracle_agreement(const std::vector<double>& scores,
                                        const std::vector<double>& reference,
                                        Correlation kind = Correlation::kSpearman) {
  OracleAgreement a;
  a.rho = correlation(scores, reference, kind);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    a.max_relative_deviation = std::max(
        a.max_relative_deviation,
        std::abs(scores[i] - reference[i]) / (std::abs(reference[i]) + 1e-12));
  }
  return a;
}

// Exact oracle values for every (example, query) cell of a score table.
enum class OracleTarget : std::uint8_t { kTauIf = 0, kLinearReference = 1 };

inline DenseMatrix oracle_table(const Model& model, const ParameterVector& theta_star,
                                const Dataset& data, const std::vector<Query>& queries,
                                const std::vector<std::uint64_t>& example_ids,
                                const CurvatureBundle& bundle, OracleTarget target,
                                double eta = 0.0, std::int64_t steps = 0,
                                bool per_example = false) {
  DenseMatrix out(static_cast<Eigen::Index>(example_ids.size()),
                  static_cast<Eigen::Index>(queries.size()));
  std::vector<RealVector> g_q;
  for (const Query& q : queries) g_q.push_back(model.grad_query(theta_star, q));
  const double n = static_cast<double>(data.size());
  for (std::size_t i = 0; i < example_ids.size(); ++i) {
    const RealVector g_b = model.grad_example(theta_star, data.by_id(example_ids[i]));
    // Both targets are returned in the readout's scale unless per_example.
    const RealVector solved = target == OracleTarget::kTauIf
                                  ? damped_inverse_apply(bundle, g_b)
                                  : apply_power_series(bundle.damped, g_b, eta, steps);
    for (std::size_t j = 0; j < queries.size(); ++j) {
      const double v = -g_q[j].dot(solved);
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = per_example ? v / n : v;
    }
  }
  return out;
}

inline std::vector<double> flatten(const DenseMatrix& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  }
  return v;
}

// --- sweeps -----------------------------------------------------------------

struct SweepGrid {
  std::vector<double> etas;
  std::vector<std::int64_t> steps;
  std::vector<double> lambdas;
  std::vector<double> epsilons;
  Variant variant = Variant::kPair;
  bool drift_correction = false;

  std::size_t points() const {
    return etas.size() * steps.size() * lambdas.size() * epsilons.size();
  }
};

struct SweepRow {
  double eta = 0.0;
  std::int64_t steps = 0;
  double lambda = 0.0;
  double epsilon = 0.0;
  std::optional<double> loo;
  std::optional<double> lds;
  std::optional<double> oracle_rho;
  std::optional<double> oracle_max_rel_dev;
  std::optional<double> stability_rho;
  bool unstable = false;
  std::string note;
  double wall_seconds = 0.0;
  std::uint64_t inner_gradient_evaluations = 0;
  std::uint64_t forward_passes = 0;
};

// Everything a sweep point is evaluated against. Ground truths are fixed by
// the dataset and training protocol, so they are computed once outside.
struct SweepSetup {
  const Model* model = nullptr;
  const Dataset* data = nullptr;
  ParameterVector theta_star;
  std::vector<std::uint64_t> example_ids;
  std::vector<Query> queries;
  // Dense Hessian at theta* (lambda = 0); enables the oracle and stability columns.
  std::optional<SymMatrix> hessian;
  OracleTarget oracle = OracleTarget::kTauIf;
  const LooGroundTruth* loo = nullptr;
  const SubsetDesign* design = nullptr;
  const LdsGroundTruth* lds = nullptr;
  Correlation correlation = Correlation::kSpearman;
  std::size_t workers = 1;
};

// Operation estimate for budget checks: inner gradient evaluations plus
// forward passes of every grid point. Points sharing (eta, lambda, epsilon)
// share one simulation run to the largest T.
inline double sweep_cost_estimate(const SweepGrid& grid, std::size_t examples,
                                  std::size_t queries) {
  SimulationConfig probe;
  probe.variant = grid.variant;
  probe.drift_correction = grid.drift_correction;
  probe.steps = grid.steps.empty() ? 0 : *std::max_element(grid.steps.begin(), grid.steps.end());
  const double groups =
      static_cast<double>(grid.etas.size() * grid.lambdas.size() * grid.epsilons.size());
  const double inner = groups * static_cast<double>(examples) *
                       static_cast<double>(probe.inner_evaluations_per_example());
  const double forward = static_cast<double>(grid.points()) * 2.0 *
                         static_cast<double>(examples * queries);
  return inner + forward;
}

inline std::vector<SweepRow> sweep(const SweepSetup& setup, const SweepGrid& grid,
                                   std::optional<double> budget = {}) {
  if (grid.points() == 0) throw ConfigError("sweep grid is empty");
  for (std::int64_t t : grid.steps) {
    if (t < 0) throw ConfigError("sweep steps must be >= 0");
  }
  const double estimate = sweep_cost_estimate(grid, setup.example_ids.size(), setup.queries.size());
  if (budget && estimate > *budget) throw BudgetError(estimate, *budget);
  const Model& model = *setup.model;
  const Dataset& data = *setup.data;
  std::vector<std::int64_t> steps = grid.steps;
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());

  std::vector<SweepRow> rows;
  for (double eta : grid.etas) {
    for (double lambda : grid.lambdas) {
      std::optional<CurvatureBundle> bundle;
      std::optional<Stability> stability;
      if (setup.hessian) {
        bundle = CurvatureBundle::from_hessian(*setup.hessian, lambda, setup.theta_star.content_hash());
        stability = stability_check(*bundle, eta);
      }
      std::optional<DenseMatrix> tau;
      if (bundle && setup.oracle == OracleTarget::kTauIf) {
        try {
          tau = oracle_table(model, setup.theta_star, data, setup.queries, setup.example_ids,
                             *bundle, OracleTarget::kTauIf);
        } catch (const SingularMatrixError&) {
        }
      }
      for (double eps : grid.epsilons) {
        const auto start = std::chrono::steady_clock::now();
        SimulationConfig cfg;
        cfg.epsilon = eps;
        cfg.eta = eta;
        cfg.lambda = lambda;
        cfg.steps = steps.back();
        cfg.variant = grid.variant;
        cfg.drift_correction = grid.drift_correction;
        SimulateOptions opts;
        opts.snapshot_steps = steps;
        if (stability) opts.spectral_radius = stability->spectral_radius;

        std::vector<std::optional<SimulationResult>> runs(setup.example_ids.size());
        std::vector<std::string> errors(setup.example_ids.size());
        parallel_for(setup.example_ids.size(), setup.workers, [&](std::size_t i) {
          try {
            runs[i] = simulate(model, setup.theta_star, data, setup.example_ids[i], cfg, opts);
          } catch (const Error& e) {
            errors[i] = e.what();
          }
        });
        std::uint64_t inner = 0;
        std::string failure;
        bool flagged = stability && !stability->stable;
        for (std::size_t i = 0; i < runs.size(); ++i) {
          if (runs[i]) {
            inner += runs[i]->inner_gradient_evaluations;
            flagged = flagged || runs[i]->imprint.unstable;
          } else if (failure.empty()) {
            failure = errors[i];
          }
        }
        const double sim_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        for (std::int64_t t : steps) {
          if (std::find(grid.steps.begin(), grid.steps.end(), t) == grid.steps.end()) continue;
          const auto t0 = std::chrono::steady_clock::now();
          SweepRow row;
          row.eta = eta;
          row.steps = t;
          row.lambda = lambda;
          row.epsilon = eps;
          row.inner_gradient_evaluations = inner;
          if (stability) row.stability_rho = stability->spectral_radius;
          row.unstable = flagged;
          if (!failure.empty()) {
            row.unstable = true;
            row.note = failure;
            row.wall_seconds = sim_seconds;
            rows.push_back(std::move(row));
            continue;
          }
          ImprintStore store;
          SimulationConfig at_t = cfg;
          at_t.steps = t;
          for (std::size_t i = 0; i < runs.size(); ++i) {
            const DisplacementSnapshot& snap = runs[i]->snapshots.at(t);
            InfluenceImprint imp = runs[i]->imprint;
            imp.delta_plus = snap.plus;
            imp.delta_minus = snap.minus;
            imp.config = at_t;
            store.insert(std::move(imp));
          }
          AttributeOptions aopts;
          aopts.workers = setup.workers;
          const ScoreTable table = attribute_matrix(model, store, setup.queries, setup.theta_star, aopts);
          row.forward_passes = table.forward_passes;
          try {
            if (table.any_failed()) throw NumericError(table.failures.front());
            if (bundle) {
              if (setup.oracle == OracleTarget::kTauIf && !tau) {
                throw NumericError("H + lambda I is not positive definite; no oracle column");
              }
              const DenseMatrix ref =
                  setup.oracle == OracleTarget::kTauIf
                      ? *tau
                      : oracle_table(model, setup.theta_star, data, setup.queries,
                                     setup.example_ids, *bundle, OracleTarget::kLinearReference,
                                     eta, t);
              // Align the store's sorted rows with example_ids order.
              DenseMatrix aligned(ref.rows(), ref.cols());
              for (std::size_t i = 0; i < setup.example_ids.size(); ++i) {
                aligned.row(static_cast<Eigen::Index>(
                    detail::row_of(table.example_ids, setup.example_ids[i], "score table"))) =
                    ref.row(static_cast<Eigen::Index>(i));
              }
              const OracleAgreement a =
                  oracle_agreement(flatten(table.values), flatten(aligned), setup.correlation);
              row.oracle_rho = a.rho;
              row.oracle_max_rel_dev = a.max_relative_deviation;
            }
            if (setup.loo) row.loo = loo_eval(table, *setup.loo, setup.correlation).mean;
            if (setup.design && setup.lds) {
              row.lds = lds_eval(table, data, *setup.design, *setup.lds, setup.correlation).mean;
            }
          } catch (const Error& e) {
            row.note = e.what();
          }
          row.wall_seconds =
              sim_seconds +
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          rows.push_back(std::move(row));
        }
      }
    }
  }
  return rows;
}

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows,
                                const std::string& provenance = "") {
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
  std::string out;
  if (!provenance.empty()) out += "# " + provenance + "\n";
  out +=
      "eta,steps,lambda,epsilon,loo,lds,oracle_rho,oracle_max_rel_dev,stability_rho,unstable,"
      "wall_seconds,inner_gradient_evaluations,forward_passes,note\n";
  for (const SweepRow& r : rows) {
    std::string note = r.note;
    std::replace(note.begin(), note.end(), ',', ';');
    std::replace(note.begin(), note.end(), '\n', ' ');
    out += format_real(r.eta) + ',' + std::to_string(r.steps) + ',' + format_real(r.lambda) + ',' +
           format_real(r.epsilon) + ',' + opt(r.loo) + ',' + opt(r.lds) + ',' + opt(r.oracle_rho) +
           ',' + opt(r.oracle_max_rel_dev) + ',' + opt(r.stability_rho) + ',' +
           (r.unstable ? "1" : "0") + ',' + format_real(r.wall_seconds) + ',' +
           std::to_string(r.inner_gradient_evaluations) + ',' + std::to_string(r.forward_passes) +
           ',' + note + '\n';
  }
  return out;
}

// --- error curves -----------------------------------------------------------

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("fit inputs differ in length");
  if (x.size() < 4) throw ConfigError("a slope fit needs at least 4 points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (!(sxx > 0.0)) throw ConfigError("slope fit needs distinct abscissae");
  return {sxy / sxx, my - (sxy / sxx) * mx};
}

inline std::vector<double> log_abs(const std::vector<double>& v) {
  std::vector<double> out;
  for (double x : v) {
    if (!(std::abs(x) > 0.0) || !std::isfinite(x)) {
      throw MetricUndefinedError("cannot take the log of a zero or non-finite error");
    }
    out.push_back(std::log(std::abs(x)));
  }
  return out;
}

// log|truncation error| against T: the fitted per-step factor exp(slope)
// should match the spectral radius of I - eta H_lambda once one eigendirection
// dominates.
struct TruncationCurve {
  std::vector<std::int64_t> steps;
  std::vector<double> error;
  double fitted_factor = 0.0;
  double spectral_radius = 0.0;
  double relative_deviation = 0.0;
};

inline TruncationCurve truncation_curve(const CurvatureBundle& bundle, double eta,
                                        const std::vector<std::int64_t>& steps,
                                        const RealVector& g_b, const RealVector& g_q) {
  if (steps.size() < 4) throw ConfigError("truncation curve needs at least 4 values of T");
  TruncationCurve c;
  c.steps = steps;
  std::vector<double> x;
  for (std::int64_t t : steps) {
    x.push_back(static_cast<double>(t));
    c.error.push_back(truncation_error(bundle, eta, t, g_b, g_q));
  }
  c.fitted_factor = std::exp(fit_line(x, log_abs(c.error)).slope);
  c.spectral_radius = stability_check(bundle, eta).spectral_radius;
  c.relative_deviation = std::abs(c.fitted_factor - c.spectral_radius) / c.spectral_radius;
  return c;
}

// log|score - reference| against log eps for both readouts.
struct BiasCurve {
  std::vector<double> epsilons;
  std::vector<double> symmetric_bias;
  std::vector<double> single_bias;
  double symmetric_slope = 0.0;
  double single_slope = 0.0;
};

inline BiasCurve bias_curve(const Model& model, const ParameterVector& theta_star,
                            const Dataset& data, std::uint64_t example_id, const Query& q,
                            SimulationConfig cfg, const std::vector<double>& epsilons,
                            double reference) {
  if (epsilons.size() < 4) throw ConfigError("bias curve needs at least 4 values of epsilon");
  BiasCurve c;
  c.epsilons = epsilons;
  cfg.variant = Variant::kPair;
  for (double eps : epsilons) {
    cfg.epsilon = eps;
    const InfluenceImprint imp = simulate(model, theta_star, data, example_id, cfg).imprint;
    c.symmetric_bias.push_back(score_symmetric(model, imp, q, theta_star).value - reference);
    c.single_bias.push_back(score_single(model, imp, q, theta_star).value - reference);
  }
  std::vector<double> lx;
  for (double e : epsilons) lx.push_back(std::log(e));
  c.symmetric_slope = fit_line(lx, log_abs(c.symmetric_bias)).slope;
  c.single_slope = fit_line(lx, log_abs(c.single_bias)).slope;
  return c;
}

}  // namespace fwtrace

#endif  // FWTRACE_EVAL_HPP_
