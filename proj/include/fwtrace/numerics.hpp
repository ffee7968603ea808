#ifndef FWTRACE_NUMERICS_HPP_
#define FWTRACE_NUMERICS_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include "fwtrace/errors.hpp"

namespace fwtrace {

// Flat float64 vector; houses parameters, gradients and displacements.
using RealVector = Eigen::VectorXd;
using DenseMatrix = Eigen::MatrixXd;

inline bool all_finite(const RealVector& v) { return v.allFinite(); }

inline void require_finite(const RealVector& v, const std::string& what) {
  if (!v.allFinite()) throw NumericError(what + " has non-finite entries");
}

inline void require_same_length(const RealVector& a, const RealVector& b,
                                const std::string& what) {
  if (a.size() != b.size()) {
    throw DimensionError(what + ": lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
}

inline double dot(const RealVector& a, const RealVector& b) {
  require_same_length(a, b, "dot");
  return a.dot(b);
}

// Dense symmetric matrix stored as a full square array.
class SymMatrix {
 public:
  SymMatrix() = default;

  // Validates squareness and symmetry within 1e-8 * (1 + |m_ij|).
  explicit SymMatrix(DenseMatrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols()) {
      throw DimensionError("symmetric matrix must be square, got " +
                           std::to_string(m_.rows()) + "x" + std::to_string(m_.cols()));
    }
    for (Eigen::Index j = 0; j < m_.cols(); ++j) {
      for (Eigen::Index i = j + 1; i < m_.rows(); ++i) {
        if (std::abs(m_(i, j) - m_(j, i)) > 1e-8 * (1.0 + std::abs(m_(i, j)))) {
          throw NumericError("matrix is not symmetric at (" + std::to_string(i) + ", " +
                             std::to_string(j) + ")");
        }
      }
    }
    if (!m_.allFinite()) throw NumericError("symmetric matrix has non-finite entries");
  }

  // Replaces m with (m + m^T) / 2; no symmetry precondition.
  static SymMatrix symmetrized(const DenseMatrix& m) {
    if (m.rows() != m.cols()) throw DimensionError("symmetrize needs a square matrix");
    return SymMatrix(DenseMatrix(0.5 * (m + m.transpose())));
  }

  static SymMatrix identity(Eigen::Index n) {
    return SymMatrix(DenseMatrix::Identity(n, n));
  }
  static SymMatrix zero(Eigen::Index n) { return SymMatrix(DenseMatrix::Zero(n, n)); }
  static SymMatrix diagonal(const RealVector& d) {
    return SymMatrix(DenseMatrix(d.asDiagonal()));
  }

  Eigen::Index dim() const { return m_.rows(); }
  const DenseMatrix& matrix() const { return m_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

  RealVector operator*(const RealVector& v) const {
    if (v.size() != dim()) {
      throw DimensionError("matrix-vector product: matrix " + std::to_string(dim()) +
                           ", vector " + std::to_string(v.size()));
    }
    return m_ * v;
  }

  SymMatrix shifted(double lambda) const {
    SymMatrix out = *this;
    out.m_.diagonal().array() += lambda;
    return out;
  }

 private:
  DenseMatrix m_;
};

// Lower Cholesky factor of an SPD matrix. Throws SingularMatrixError naming
// the first non-positive pivot.
inline DenseMatrix cholesky_lower(const SymMatrix& m, const std::string& hint = "") {
  const Eigen::Index n = m.dim();
  const DenseMatrix& a = m.matrix();
  DenseMatrix l = DenseMatrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(d > 0.0)) throw SingularMatrixError(static_cast<std::size_t>(j), d, hint);
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    const Eigen::Index rest = n - j - 1;
    if (rest > 0) {
      l.col(j).tail(rest) =
          (a.col(j).tail(rest) - l.bottomLeftCorner(rest, j) * l.row(j).head(j).transpose()) /
          ljj;
    }
  }
  return l;
}

inline RealVector solve_spd(const SymMatrix& m, const RealVector& rhs,
                            const std::string& hint = "") {
  if (rhs.size() != m.dim()) {
    throw DimensionError("solve_spd: matrix " + std::to_string(m.dim()) + ", rhs " +
                         std::to_string(rhs.size()));
  }
  const DenseMatrix l = cholesky_lower(m, hint);
  const auto tri = l.triangularView<Eigen::Lower>();
  RealVector x = tri.transpose().solve(tri.solve(rhs));
  // One step of iterative refinement tightens the residual on ill-conditioned input.
  const RealVector r = rhs - m.matrix() * x;
  x += tri.transpose().solve(tri.solve(r));
  require_finite(x, "solve_spd result");
  return x;
}

struct EigenRange {
  double min = 0.0;
  double max = 0.0;
};

struct PowerIterationOptions {
  int max_iterations = 10000;
  // Stop once ||B v - rho v|| <= residual_tol * scale.
  double residual_tol = 1e-7;
  // Or once the Rayleigh quotient has not moved for this many iterations.
  int stagnation_window = 25;
  std::uint64_t seed = 0x5eed;
};

namespace detail {

// Largest eigenvalue of a positive semidefinite operator via power iteration
// with Rayleigh quotients.
template <typename Apply>
double top_eigenvalue_psd(const Apply& apply, Eigen::Index n, double scale,
                          const PowerIterationOptions& opt, const char* label) {
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RealVector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  v.normalize();
  double rho = 0.0;
  double residual = 0.0;
  int still = 0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    RealVector w = apply(v);
    const double next = v.dot(w);
    residual = (w - next * v).norm();
    if (residual <= opt.residual_tol * scale) return next;
    if (it > 0 && std::abs(next - rho) <= 1e-15 * scale) {
      if (++still >= opt.stagnation_window) return next;
    } else {
      still = 0;
    }
    rho = next;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    v = w / norm;
  }
  throw ConvergenceError(std::string("power iteration for ") + label, residual);
}

// max |lambda| estimated from norm growth, which converges even when the two
// extreme eigenvalues have opposite signs and equal magnitude.
template <typename Apply>
double spectral_bound(const Apply& apply, Eigen::Index n, const PowerIterationOptions& opt) {
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  RealVector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  v.normalize();
  double growth = 0.0;
  for (int it = 0; it < std::min(opt.max_iterations, 200); ++it) {
    RealVector w = apply(apply(v));
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = std::sqrt(norm);
    if (it > 5 && std::abs(next - growth) <= 1e-3 * next) {
      growth = next;
      break;
    }
    growth = next;
    v = w / norm;
  }
  return growth;
}

}  // namespace detail

// Extreme eigenvalues of a symmetric operator given only products v -> M v.
// Power iteration runs on the shifted operators M + s I and s I - M, whose
// spectra are nonnegative when s bounds the spectral radius.
// `radius_bound`, when given, must bound the spectral radius from above;
// otherwise it is estimated from norm growth and padded.
template <typename Apply>
EigenRange extreme_eigs_operator(const Apply& apply, Eigen::Index n,
                                 const PowerIterationOptions& opt = {},
                                 std::optional<double> radius_bound = std::nullopt) {
  if (n == 0) throw DimensionError("extreme_eigs on an empty operator");
  const double bound =
      radius_bound ? *radius_bound : 1.5 * detail::spectral_bound(apply, n, opt);
  if (bound == 0.0) return {0.0, 0.0};
  const double shift = bound;
  const double scale = 2.0 * shift;
  auto upper = [&](const RealVector& v) -> RealVector { return apply(v) + shift * v; };
  auto lower = [&](const RealVector& v) -> RealVector { return shift * v - apply(v); };
  const double top = detail::top_eigenvalue_psd(upper, n, scale, opt, "largest eigenvalue");
  PowerIterationOptions second = opt;
  second.seed = opt.seed + 1;
  const double bottom =
      detail::top_eigenvalue_psd(lower, n, scale, second, "smallest eigenvalue");
  return {shift - bottom, top - shift};
}

// Extreme Ritz values after `steps` Lanczos iterations with full
// reorthogonalization. Both ends converge together, which helps where power
// iteration crawls through a clustered end of the spectrum.
template <typename Apply>
EigenRange lanczos_extremes(const Apply& apply, Eigen::Index n, int steps,
                            std::uint64_t seed = 0x5eed) {
  if (n == 0) throw DimensionError("lanczos on an empty operator");
  const Eigen::Index k = std::min<Eigen::Index>(std::max(steps, 1), n);
  DenseMatrix v(n, k);
  RealVector alpha(k), beta(k);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) v(i, 0) = normal(rng);
  v.col(0).normalize();
  Eigen::Index m = k;
  for (Eigen::Index j = 0; j < k; ++j) {
    RealVector w = apply(RealVector(v.col(j)));
    alpha[j] = v.col(j).dot(w);
    for (int pass = 0; pass < 2; ++pass) {
      w -= v.leftCols(j + 1) * (v.leftCols(j + 1).transpose() * w);
    }
    beta[j] = w.norm();
    if (j + 1 == k) break;
    if (beta[j] <= 1e-12 * std::max(1.0, std::abs(alpha[j]))) {
      m = j + 1;  // invariant subspace found
      break;
    }
    v.col(j + 1) = w / beta[j];
  }
  Eigen::SelfAdjointEigenSolver<DenseMatrix> tri;
  tri.computeFromTridiagonal(alpha.head(m), beta.head(std::max<Eigen::Index>(m - 1, 0)),
                             Eigen::EigenvaluesOnly);
  return {tri.eigenvalues().minCoeff(), tri.eigenvalues().maxCoeff()};
}

inline EigenRange extreme_eigs(const SymMatrix& m, const PowerIterationOptions& opt = {}) {
  const DenseMatrix& a = m.matrix();
  // Gershgorin: every eigenvalue lies within the largest absolute row sum.
  const double gershgorin = m.dim() == 0 ? 0.0 : a.cwiseAbs().rowwise().sum().maxCoeff();
  return extreme_eigs_operator([&a](const RealVector& v) -> RealVector { return a * v; },
                               m.dim(), opt, gershgorin);
}

// S_T(M) = eta * sum_{t<T} (I - eta M)^t, built by repeated doubling:
// S_{2k} = S_k + A^k S_k and S_{k+1} = S_k + eta A^k.
inline SymMatrix matrix_power_series(const SymMatrix& m, double eta, std::int64_t steps) {
  if (steps < 0) throw ConfigError("matrix_power_series needs steps >= 0");
  const Eigen::Index n = m.dim();
  if (n > 2000) throw DimensionError("matrix_power_series is limited to P <= 2000");
  const DenseMatrix a = DenseMatrix::Identity(n, n) - eta * m.matrix();
  DenseMatrix sum = DenseMatrix::Zero(n, n);
  DenseMatrix power = DenseMatrix::Identity(n, n);
  int top_bit = 63;
  while (top_bit >= 0 && ((steps >> top_bit) & 1) == 0) --top_bit;
  for (int bit = top_bit; bit >= 0; --bit) {
    sum += power * sum;
    power = power * power;
    if ((steps >> bit) & 1) {
      sum += eta * power;
      power = a * power;
    }
  }
  return SymMatrix::symmetrized(sum);
}

// S_T(M) v through the vector recursion x_{t+1} = (I - eta M) x_t + eta v.
template <typename Apply>
RealVector apply_power_series(const Apply& apply, const RealVector& v, double eta,
                              std::int64_t steps) {
  RealVector x = RealVector::Zero(v.size());
  for (std::int64_t t = 0; t < steps; ++t) {
    x = x - eta * apply(x) + eta * v;
  }
  return x;
}

inline RealVector apply_power_series(const SymMatrix& m, const RealVector& v, double eta,
                                     std::int64_t steps) {
  if (v.size() != m.dim()) throw DimensionError("apply_power_series: size mismatch");
  const DenseMatrix& a = m.matrix();
  return apply_power_series([&a](const RealVector& x) -> RealVector { return a * x; }, v,
                            eta, steps);
}

}  // namespace fwtrace

#endif  // FWTRACE_NUMERICS_HPP_
