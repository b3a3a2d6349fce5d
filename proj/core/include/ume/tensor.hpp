#pragma once

#include <Eigen/Dense>

namespace ume {

// Row-major so that a sequence of token states reads as one row per position
// and checkpoints can dump `data()` directly.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace ume
