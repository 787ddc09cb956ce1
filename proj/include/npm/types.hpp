#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace npm {

using Scalar = double;
using Vector = Eigen::VectorXd;
// One row per token position.
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using TokenId = std::int32_t;

// Reserved vocabulary ids. These occupy the first five lines of every
// persisted vocab file, in this order.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kMask = 2;
inline constexpr TokenId kMaskStart = 3;
inline constexpr TokenId kMaskEnd = 4;
inline constexpr TokenId kNumReserved = 5;

inline bool is_reserved(TokenId id) { return id >= 0 && id < kNumReserved; }

using TokenSeq = std::vector<TokenId>;

}  // namespace npm
