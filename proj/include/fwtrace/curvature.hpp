#ifndef FWTRACE_CURVATURE_HPP_
#define FWTRACE_CURVATURE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>

#include "fwtrace/errors.hpp"
#include "fwtrace/model.hpp"
#include "fwtrace/numerics.hpp"

namespace fwtrace {

// Dense assembly cap for the exact oracle.
inline constexpr Eigen::Index kDenseBudget = 5000;

// Central finite difference of a gradient map along v:
// [g(theta + h v/|v|) - g(theta - h v/|v|)] / (2h) * |v|, h = 1e-4 / sqrt(P).
template <typename GradientAt>
RealVector fd_directional(const GradientAt& gradient_at, const ParameterVector& theta,
                          const RealVector& v) {
  require_same_length(theta.values, v, "hessian-vector product");
  const double norm = v.norm();
  if (!(norm > 0.0)) throw ConfigError("hessian-vector product needs a nonzero vector");
  const double h = 1e-4 / std::sqrt(static_cast<double>(theta.size()));
  const RealVector step = (h / norm) * v;
  RealVector hv = (gradient_at(theta.displaced(step)) - gradient_at(theta.displaced(-step))) *
                  (norm / (2.0 * h));
  require_finite(hv, "hessian-vector product");
  return hv;
}

inline RealVector hvp(const Model& model, const ParameterVector& theta, const Dataset& data,
                      const RealVector& v) {
  return fd_directional(
      [&](const ParameterVector& p) { return model.grad_mean(p, data); }, theta, v);
}

// Column i is the finite-difference product with e_i; not yet symmetrized.
template <typename GradientAt>
DenseMatrix fd_hessian_columns(const GradientAt& gradient_at, const ParameterVector& theta) {
  const Eigen::Index p = theta.size();
  if (p > kDenseBudget) {
    throw DimensionError("dense Hessian assembly needs P <= " + std::to_string(kDenseBudget) +
                         ", got " + std::to_string(p));
  }
  DenseMatrix columns(p, p);
  RealVector unit = RealVector::Zero(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    unit[i] = 1.0;
    columns.col(i) = fd_directional(gradient_at, theta, unit);
    unit[i] = 0.0;
  }
  return columns;
}

inline DenseMatrix assemble_hessian_unsymmetrized(const Model& model,
                                                  const ParameterVector& theta,
                                                  const Dataset& data) {
  return fd_hessian_columns([&](const ParameterVector& p) { return model.grad_mean(p, data); },
                            theta);
}

inline SymMatrix assemble_hessian(const Model& model, const ParameterVector& theta,
                                  const Dataset& data) {
  return SymMatrix::symmetrized(assemble_hessian_unsymmetrized(model, theta, data));
}

inline SymMatrix per_example_hessian(const Model& model, const ParameterVector& theta,
                                     const Example& b) {
  return SymMatrix::symmetrized(fd_hessian_columns(
      [&](const ParameterVector& p) { return model.grad_example(p, b); }, theta));
}

inline SymMatrix query_hessian(const Model& model, const ParameterVector& theta,
                               const Query& q) {
  return SymMatrix::symmetrized(fd_hessian_columns(
      [&](const ParameterVector& p) { return model.grad_query(p, q); }, theta));
}

// Hessian of the mean objective at theta*, its damped version H + lambda I,
// and the hash of the parameters it was built at.
struct CurvatureBundle {
  SymMatrix hessian;
  double lambda = 0.0;
  SymMatrix damped;
  std::uint64_t theta_star_hash = 0;

  static CurvatureBundle from_hessian(SymMatrix h, double lambda, std::uint64_t theta_hash) {
    if (!(lambda >= 0.0)) throw ConfigError("damping lambda must be >= 0");
    SymMatrix damped = h.shifted(lambda);
    return {std::move(h), lambda, std::move(damped), theta_hash};
  }

  Eigen::Index dim() const { return hessian.dim(); }
};

inline CurvatureBundle build_curvature(const Model& model, const ParameterVector& theta_star,
                                       const Dataset& data, double lambda) {
  return CurvatureBundle::from_hessian(assemble_hessian(model, theta_star, data), lambda,
                                       theta_star.content_hash());
}

struct IfScore {
  double value = 0.0;
  std::uint64_t example_id = 0;
  std::uint64_t query_id = 0;
  double lambda = 0.0;
};

// H_lambda^{-1} g_b, with an error that points at the damping on failure.
inline RealVector damped_inverse_apply(const CurvatureBundle& bundle, const RealVector& g) {
  return solve_spd(bundle.damped, g, "H + lambda I is not positive definite; increase lambda");
}

// -(1/N) g_q^T H_lambda^{-1} g_b.
inline IfScore tau_if(const CurvatureBundle& bundle, const RealVector& g_b, const RealVector& g_q,
                      std::size_t n, std::uint64_t example_id = 0, std::uint64_t query_id = 0) {
  if (n == 0) throw ConfigError("tau_if needs N >= 1");
  require_same_length(g_b, g_q, "tau_if");
  const double value = -dot(g_q, damped_inverse_apply(bundle, g_b)) / static_cast<double>(n);
  if (!std::isfinite(value)) throw NumericError("tau_if is not finite");
  return {value, example_id, query_id, bundle.lambda};
}

// -g_q^T S_T(H_lambda) g_b: the quantity the symmetric readout estimates.
inline double linear_reference(const CurvatureBundle& bundle, double eta, std::int64_t steps,
                               const RealVector& g_b, const RealVector& g_q) {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  require_same_length(g_b, g_q, "linear_reference");
  return -dot(g_q, apply_power_series(bundle.damped, g_b, eta, steps));
}

// T -> infinity limit of linear_reference: -g_q^T H_lambda^{-1} g_b.
inline double linear_reference_limit(const CurvatureBundle& bundle, const RealVector& g_b,
                                     const RealVector& g_q) {
  return -dot(g_q, damped_inverse_apply(bundle, g_b));
}

// g_q^T (I - eta H_lambda)^T H_lambda^{-1} g_b, so that
// linear_reference(T) = linear_reference_limit + truncation_error(T).
inline double truncation_error(const CurvatureBundle& bundle, double eta, std::int64_t steps,
                               const RealVector& g_b, const RealVector& g_q) {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  require_same_length(g_b, g_q, "truncation_error");
  RealVector x = damped_inverse_apply(bundle, g_b);
  const DenseMatrix& h = bundle.damped.matrix();
  for (std::int64_t t = 0; t < steps; ++t) x -= eta * (h * x);
  return dot(g_q, x);
}

struct Stability {
  bool stable = false;
  double spectral_radius = 0.0;
  EigenRange eigs;
};

inline Stability stability_from_range(const EigenRange& range, double eta) {
  const double rho =
      std::max(std::abs(1.0 - eta * range.min), std::abs(1.0 - eta * range.max));
  return {rho < 1.0, rho, range};
}

// rho = max(|1 - eta lambda_min(H_lambda)|, |1 - eta lambda_max(H_lambda)|).
// Power iteration can stall on clustered ends of the spectrum; the dense
// matrix is at hand, so a full symmetric eigensolve settles it.
inline Stability stability_check(const CurvatureBundle& bundle, double eta) {
  try {
    return stability_from_range(extreme_eigs(bundle.damped), eta);
  } catch (const ConvergenceError&) {
    Eigen::SelfAdjointEigenSolver<DenseMatrix> solver(bundle.damped.matrix(),
                                                      Eigen::EigenvaluesOnly);
    const RealVector& ev = solver.eigenvalues();
    return stability_from_range({ev.minCoeff(), ev.maxCoeff()}, eta);
  }
}

// Matrix-free variant built on finite-difference Hessian-vector products, for
// models too large for dense assembly. Falls back to Lanczos when power
// iteration does not converge within opt.max_iterations.
inline Stability stability_check_matrix_free(const Model& model, const ParameterVector& theta,
                                             const Dataset& data, double lambda, double eta,
                                             const PowerIterationOptions& opt = {}) {
  auto apply = [&](const RealVector& v) -> RealVector {
    if (v.norm() == 0.0) return RealVector::Zero(v.size());
    return hvp(model, theta, data, v) + lambda * v;
  };
  try {
    return stability_from_range(extreme_eigs_operator(apply, theta.size(), opt), eta);
  } catch (const ConvergenceError&) {
    return stability_from_range(lanczos_extremes(apply, theta.size(), 200, opt.seed), eta);
  }
}

// Full eigenspectrum of H as CSV (index,eigenvalue), ascending.
inline void export_spectrum_csv(const CurvatureBundle& bundle, const std::string& path) {
  Eigen::SelfAdjointEigenSolver<DenseMatrix> solver(bundle.hessian.matrix(),
                                                    Eigen::EigenvaluesOnly);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "index,eigenvalue\n";
  out.precision(17);
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    out << i << ',' << solver.eigenvalues()[i] << '\n';
  }
}

}  // namespace fwtrace

#endif  // FWTRACE_CURVATURE_HPP_
