#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace qesr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Error taxonomy. The CLI maps these onto process exit codes:
// InvalidInputError -> 2, ConditioningError/InversionFailureError -> 4,
// SimulationInstabilityError -> 5, every other fit-stage error -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidInputError : Error { using Error::Error; };
struct SingularDesignError : Error { using Error::Error; };
struct SmallTailError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct FeasibilityError : Error { using Error::Error; };
struct ScaleError : Error { using Error::Error; };
struct ConditioningError : Error { using Error::Error; };
struct InversionFailureError : Error { using Error::Error; };
struct BootstrapInstabilityError : Error { using Error::Error; };
struct SimulationInstabilityError : Error { using Error::Error; };
struct NonConvergenceError : Error {
  NonConvergenceError(const std::string& msg, std::vector<double> iterate)
      : Error(msg), best_iterate(std::move(iterate)) {}
  std::vector<double> best_iterate;
};

enum class Tail { Lower, Upper };

// Probability level plus which tail the shortfall lives in.
struct TauLevel {
  double tau = 0.5;
  Tail tail = Tail::Lower;
  void validate() const;
};

// Regression data. X always carries the intercept as column 0; full column
// rank is checked at fit time, not here.
struct Dataset {
  Vector y;
  Matrix X;
  std::vector<std::string> column_names;

  Eigen::Index n() const { return y.size(); }
  Eigen::Index p() const { return X.cols(); }
  void validate() const;
  int column_index(const std::string& name) const;  // -1 when absent
};

// Paired coefficient vectors on the user scale; shift records the internal
// response translation that was undone on the intercepts.
struct Theta {
  Vector theta_q;
  Vector theta_e;
  double shift = 0.0;
};

}  // namespace qesr
