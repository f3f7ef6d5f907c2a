#pragma once

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>

namespace amt {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using BoolMat = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Error taxonomy. Every failure the library raises belongs to one of five
// categories; the CLI maps categories to exit codes.
enum class ErrorCategory { config, io, shape, lifecycle, numeric };

inline const char* to_string(ErrorCategory c) {
    switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::lifecycle: return "lifecycle";
    case ErrorCategory::numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorCategory category, const std::string& msg)
        : std::runtime_error(msg), category_(category) {}
    ErrorCategory category() const { return category_; }

  private:
    ErrorCategory category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(ErrorCategory::shape, msg) {}
};

struct EmptyInputError : Error {
    explicit EmptyInputError(const std::string& msg) : Error(ErrorCategory::shape, msg) {}
};

struct ParameterError : Error {
    explicit ParameterError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};

struct LabelError : Error {
    explicit LabelError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorCategory::io, msg) {}
};

struct LifecycleError : Error {
    explicit LifecycleError(const std::string& msg) : Error(ErrorCategory::lifecycle, msg) {}
};

struct MaskingError : Error {
    explicit MaskingError(const std::string& msg) : Error(ErrorCategory::numeric, msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorCategory::numeric, msg) {}
};

inline std::string shape_str(Index rows, Index cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
std::string shape_str(const Eigen::MatrixBase<Derived>& m) {
    return shape_str(m.rows(), m.cols());
}

}  // namespace amt
