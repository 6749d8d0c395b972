#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

#include "ckd/rng.hpp"

namespace ckd {

// Tokens are rows, channels are columns. Row-major so a token is contiguous.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

[[noreturn]] inline void contract_error(const std::string& msg) {
  throw std::invalid_argument(msg);
}

[[noreturn]] inline void data_error(const std::string& msg) {
  throw std::runtime_error(msg);
}

template <class S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

template <class S>
void fill_truncated_normal(Mat<S>& m, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<S>(rng.truncated_normal(stddev));
}

// In-place row-wise softmax.
template <class S>
void softmax_rows(Mat<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const S mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace ckd
