#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace statesel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised for malformed inputs: dimension mismatches, out-of-range
/// tolerances, unknown model names, bad config keys.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a numerical routine cannot proceed (singular innovation
/// covariance, non-converging iteration).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_dim(const Vector& v, Eigen::Index expected, const char* what) {
    if (v.size() != expected) {
        throw ConfigError(std::string(what) + ": expected dimension " + std::to_string(expected) +
                          ", got " + std::to_string(v.size()));
    }
}

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace detail
}  // namespace statesel
