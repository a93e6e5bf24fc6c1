#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace fgts {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Invalid shapes, out-of-range hyperparameters, malformed config files.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A sampler produced a non-finite iterate or gradient.
class NumericalDivergence : public std::runtime_error {
 public:
  NumericalDivergence(const std::string& what, std::uint64_t iteration)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration) + ")"),
        detail_(what), iteration_(iteration) {}

  std::uint64_t iteration() const noexcept { return iteration_; }
  /// The message without the iteration suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t iteration_;
};

/// Linear-algebra failure, e.g. a covariance that is not positive definite.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, double condition_number)
      : std::runtime_error(what + " (condition number " + std::to_string(condition_number) + ")"),
        condition_(condition_number) {}

  double condition_number() const noexcept { return condition_; }

 private:
  double condition_;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// Condition number of a symmetric positive semi-definite matrix (inf when singular).
inline double spd_condition_number(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace fgts
