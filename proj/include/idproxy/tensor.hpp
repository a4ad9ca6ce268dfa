#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "idproxy/common.hpp"

namespace idproxy::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

// Dense tensor used at the kernel-registry boundary (grad checking, the
// checkpoint container). Model internals work on Eigen matrices directly.
template <class S>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<S> data;
  bool requires_grad = false;
  std::vector<S> grad;  // same length as data when populated

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shp) : shape(std::move(shp)) {
    data.assign(static_cast<size_t>(numel()), S(0));
  }

  int64_t numel() const {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  Eigen::Map<Mat<S>> mat() {
    return Eigen::Map<Mat<S>>(data.data(), rows(), cols());
  }
  Eigen::Map<const Mat<S>> mat() const {
    return Eigen::Map<const Mat<S>>(data.data(), rows(), cols());
  }

  static Tensor from_mat(const Mat<S>& m) {
    Tensor t({m.rows(), m.cols()});
    Eigen::Map<Mat<S>>(t.data.data(), m.rows(), m.cols()) = m;
    return t;
  }
};

using TensorD = Tensor<double>;

inline std::string shape_str(int64_t r, int64_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <class A, class B>
void check_same_shape(const char* op, const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrClass::shape, std::string(op) + ": shape mismatch " +
                              shape_str(a.rows(), a.cols()) + " vs " +
                              shape_str(b.rows(), b.cols()));
}

// Fill helpers pinned to the repo RNG.
template <class S>
void fill_normal(Mat<S>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<S>(rng.normal() * stddev);
}

template <class S>
void fill_uniform(Mat<S>& m, Rng& rng, double lo, double hi) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<S>(lo + (hi - lo) * rng.uniform());
}

}  // namespace idproxy::nn
