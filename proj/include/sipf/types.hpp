#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sipf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using VectorMap = Eigen::Map<Vector>;
using ConstVectorMap = Eigen::Map<const Vector>;

using TokenSeq = std::vector<int>;

/// Final answer of a reasoning path; empty means MALFORMED.
using Answer = std::optional<long long>;

inline constexpr Answer kMalformed = std::nullopt;

}  // namespace sipf
