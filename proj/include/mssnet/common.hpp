#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mssnet {

// Row-major so that per-voxel feature rows are contiguous for gather/scatter.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr std::uint32_t kIgnoreLabel = 255;

// Error taxonomy. Each class names the failing contract; callers that do not
// care catch `Error`.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidInputError : Error {
  using Error::Error;
};
struct EmptyInputError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct AlignmentError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct InternalError : Error {
  using Error::Error;
};
struct DegenerateError : Error {
  using Error::Error;
};
struct MalformedFileError : Error {
  using Error::Error;
};
struct PairingError : Error {
  using Error::Error;
};
struct PipelineError : Error {
  using Error::Error;
};
struct OracleInvalidError : Error {
  using Error::Error;
};
struct CheckpointMismatchError : Error {
  using Error::Error;
};
struct StepAbortedError : Error {
  using Error::Error;
};

}  // namespace mssnet
