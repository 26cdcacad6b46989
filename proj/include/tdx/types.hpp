#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace tdx {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class ErrorCode {
    NonFiniteCoefficient,
    SingularFundamentalMatrix,
    StepTooLarge,
    InvalidParameter,
    UnboundedCoefficient,
    NotSPD,
    NonFiniteState,
    GridTooSmall,
    GridCoverage,
    GridMismatch,
    ConfigInvalid,
    UnknownExample,
};

const char* to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Coefficient callables. They must be pure; the simulators call them from
// several threads at once.
using VectorField = std::function<Vector(double t, const Vector& x)>;
using MatrixField = std::function<Matrix(double t, const Vector& x)>;

}  // namespace tdx
