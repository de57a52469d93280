#include "qesr/types.hpp"

#include <cmath>

namespace qesr {

void TauLevel::validate() const {
  if (!(tau > 0.0 && tau < 1.0) || !std::isfinite(tau)) {
    throw InvalidInputError("tau must lie strictly inside (0, 1), got " +
                            std::to_string(tau));
  }
}

void Dataset::validate() const {
  const Eigen::Index nn = y.size();
  const Eigen::Index pp = X.cols();
  if (X.rows() != nn) {
    throw InvalidInputError("response length " + std::to_string(nn) +
                            " does not match design rows " +
                            std::to_string(X.rows()));
  }
  if (pp < 1) throw InvalidInputError("design matrix has no columns");
  if (static_cast<Eigen::Index>(column_names.size()) != pp) {
    throw InvalidInputError("column_names size " +
                            std::to_string(column_names.size()) +
                            " does not match design columns " +
                            std::to_string(pp));
  }
  if (nn < pp + 1) {
    throw InvalidInputError("need at least p+1 = " + std::to_string(pp + 1) +
                            " observations, got " + std::to_string(nn));
  }
  if (!y.allFinite() || !X.allFinite()) {
    throw InvalidInputError("dataset contains non-finite entries");
  }
  for (Eigen::Index i = 0; i < nn; ++i) {
    if (X(i, 0) != 1.0) {
      throw InvalidInputError("design column 0 must be the intercept (all "
                              "ones); row " + std::to_string(i) + " has " +
                              std::to_string(X(i, 0)));
    }
  }
}

int Dataset::column_index(const std::string& name) const {
  for (std::size_t j = 0; j < column_names.size(); ++j) {
    if (column_names[j] == name) return static_cast<int>(j);
  }
  return -1;
}

}  // namespace qesr
