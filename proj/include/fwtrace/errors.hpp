#ifndef FWTRACE_ERRORS_HPP_
#define FWTRACE_ERRORS_HPP_

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>

namespace fwtrace {

// Process exit codes used by the command-line driver. Library errors map onto
// these through Error::exit_code().
enum class ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kStaleness = 3,
  kMetricUndefined = 4,
  kInstability = 5,
};

namespace detail {

inline std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const noexcept { return ExitCode::kInternal; }
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what)
      : Error("dimension error: " + what) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error("configuration error: " + what) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

class BudgetError : public Error {
 public:
  BudgetError(double estimate, double budget)
      : Error("budget exceeded: estimated " + detail::real_text(estimate) +
              " operations, budget " + detail::real_text(budget)),
        estimate_(estimate),
        budget_(budget) {}
  double estimate() const { return estimate_; }
  double budget() const { return budget_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }

 private:
  double estimate_;
  double budget_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error("numeric error: " + what) {}
};

class SingularMatrixError : public Error {
 public:
  SingularMatrixError(std::size_t pivot, double value, const std::string& hint = "")
      : Error("matrix is not positive definite: pivot " + std::to_string(pivot) +
              " has value " + detail::real_text(value) +
              (hint.empty() ? "" : " (" + hint + ")")),
        pivot_(pivot) {}
  std::size_t pivot() const { return pivot_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kInstability; }

 private:
  std::size_t pivot_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error("no convergence: " + what + ", residual " + detail::real_text(residual)),
        residual_(residual) {}
  double residual() const { return residual_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kInstability; }

 private:
  double residual_;
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::int64_t step)
      : Error("training diverged at step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const { return step_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kInstability; }

 private:
  std::int64_t step_;
};

class InstabilityError : public Error {
 public:
  InstabilityError(std::int64_t step, std::optional<double> spectral_radius)
      : Error("simulation became non-finite at step " + std::to_string(step) +
              (spectral_radius ? ", spectral radius of I - eta*H_lambda is " +
                                     detail::real_text(*spectral_radius)
                               : std::string())),
        step_(step),
        spectral_radius_(spectral_radius) {}
  std::int64_t step() const { return step_; }
  std::optional<double> spectral_radius() const { return spectral_radius_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kInstability; }

 private:
  std::int64_t step_;
  std::optional<double> spectral_radius_;
};

// Refusal raised before a simulation with a spectral radius >= 1 when the
// caller asked for strict stability.
// Some examples of a simulation batch failed; the rest were stored.
class SimulationFailedError : public Error {
 public:
  SimulationFailedError(std::size_t failed, std::size_t total, const std::string& first)
      : Error(std::to_string(failed) + " of " + std::to_string(total) +
              " simulations failed; first: " + first) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kInstability; }
};

class UnstableConfigError : public Error {
 public:
  explicit UnstableConfigError(double spectral_radius)
      : Error("unstable simulation config: spectral radius " +
              detail::real_text(spectral_radius) + " >= 1; lower eta or raise lambda"),
        spectral_radius_(spectral_radius) {}
  double spectral_radius() const { return spectral_radius_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kInstability; }

 private:
  double spectral_radius_;
};

class NotConvergedError : public Error {
 public:
  NotConvergedError(double grad_norm, double tolerance)
      : Error("reference parameters are not converged: gradient norm " +
              detail::real_text(grad_norm) + " > tolerance " + detail::real_text(tolerance)),
        grad_norm_(grad_norm) {}
  double grad_norm() const { return grad_norm_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }

 private:
  double grad_norm_;
};

class MembershipError : public Error {
 public:
  explicit MembershipError(std::uint64_t id)
      : Error("example " + std::to_string(id) + " is not in the dataset"), id_(id) {}
  std::uint64_t id() const { return id_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }

 private:
  std::uint64_t id_;
};

class StalenessError : public Error {
 public:
  explicit StalenessError(const std::string& what) : Error("stale artifact: " + what) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kStaleness; }
};

// Store / checkpoint / IDX decoding failures.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

class CorruptHeaderError : public FormatError {
 public:
  explicit CorruptHeaderError(const std::string& what)
      : FormatError("corrupt header: " + what) {}
};

class TruncatedError : public FormatError {
 public:
  TruncatedError(std::uint64_t expected, std::uint64_t actual)
      : FormatError("truncated payload: expected " + std::to_string(expected) +
                    " bytes, found " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}
  std::uint64_t expected() const { return expected_; }
  std::uint64_t actual() const { return actual_; }

 private:
  std::uint64_t expected_;
  std::uint64_t actual_;
};

class CountMismatchError : public FormatError {
 public:
  CountMismatchError(std::uint64_t images, std::uint64_t labels)
      : FormatError("image count " + std::to_string(images) +
                    " does not match label count " + std::to_string(labels)) {}
};

class MetricUndefinedError : public Error {
 public:
  explicit MetricUndefinedError(const std::string& what)
      : Error("undefined correlation: " + what) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kMetricUndefined; }
};

}  // namespace fwtrace

#endif  // FWTRACE_ERRORS_HPP_
