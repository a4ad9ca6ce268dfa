#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "idproxy/tensor.hpp"

// Forward/backward kernel set. Every backward returns the exact analytic
// gradient of its forward map; the grad-check registry verifies each one
// against central differences.

namespace idproxy::nn {

inline constexpr double kProbClipLo = 1e-7;   // probability clip before logs
inline constexpr double kProbClipHi = 1.0 - 1e-7;
inline constexpr double kL2NormFloor = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

// ---- matmul ----

template <class S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  if (a.cols() != b.rows())
    fail(ErrClass::shape, "matmul: shape mismatch " + shape_str(a.rows(), a.cols()) +
                              " vs " + shape_str(b.rows(), b.cols()));
  Mat<S> c(a.rows(), b.cols());
  c.noalias() = a * b;
  return c;
}

template <class S>
void matmul_backward(const Mat<S>& a, const Mat<S>& b, const Mat<S>& gout,
                     Mat<S>& da, Mat<S>& db) {
  da.resize(a.rows(), a.cols());
  db.resize(b.rows(), b.cols());
  da.noalias() = gout * b.transpose();
  db.noalias() = a.transpose() * gout;
}

// ---- add (same shape) and row-broadcast bias add ----

template <class S>
Mat<S> add(const Mat<S>& a, const Mat<S>& b) {
  check_same_shape("add", a, b);
  return a + b;
}
// backward: da = db = gout.

template <class S>
Mat<S> add_bias(const Mat<S>& x, const Vec<S>& bias) {
  if (x.cols() != bias.size())
    fail(ErrClass::shape, "add_bias: shape mismatch " + shape_str(x.rows(), x.cols()) +
                              " vs " + shape_str(bias.size(), 1));
  return x.rowwise() + bias.transpose();
}

template <class S>
Vec<S> add_bias_backward_bias(const Mat<S>& gout) {
  return gout.colwise().sum().transpose();
}

// ---- concat along columns ----

template <class S>
Mat<S> concat_cols(const std::vector<const Mat<S>*>& parts) {
  if (parts.empty()) fail(ErrClass::shape, "concat: no inputs");
  Eigen::Index rows = parts[0]->rows(), cols = 0;
  for (const auto* p : parts) {
    if (p->rows() != rows)
      fail(ErrClass::shape, "concat: row mismatch " + shape_str(rows, parts[0]->cols()) +
                                " vs " + shape_str(p->rows(), p->cols()));
    cols += p->cols();
  }
  Mat<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto* p : parts) {
    out.middleCols(at, p->cols()) = *p;
    at += p->cols();
  }
  return out;
}
// backward: slice gout by the same column offsets.

// ---- softmax / log-softmax, row-wise, numerically stable ----

template <class S>
Mat<S> softmax_rows(const Mat<S>& x) {
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

template <class S>
Mat<S> softmax_rows_backward(const Mat<S>& y, const Mat<S>& gout) {
  check_same_shape("softmax_backward", y, gout);
  Mat<S> dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const S dot = y.row(i).cwiseProduct(gout.row(i)).sum();
    dx.row(i) = y.row(i).array() * (gout.row(i).array() - dot);
  }
  return dx;
}

template <class S>
Mat<S> log_softmax_rows(const Mat<S>& x) {
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S m = x.row(i).maxCoeff();
    const S lse = m + std::log((x.row(i).array() - m).exp().sum());
    y.row(i) = x.row(i).array() - lse;
  }
  return y;
}

template <class S>
Mat<S> log_softmax_rows_backward(const Mat<S>& y, const Mat<S>& gout) {
  check_same_shape("log_softmax_backward", y, gout);
  Mat<S> dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const S gsum = gout.row(i).sum();
    dx.row(i) = gout.row(i) - (y.row(i).array().exp() * gsum).matrix();
  }
  return dx;
}

// ---- sigmoid / relu ----

template <class S>
Mat<S> sigmoid(const Mat<S>& x) {
  // Evaluated branch-wise so large |x| never overflows exp.
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S v = x.data()[i];
    if (v >= S(0)) {
      const S e = std::exp(-v);
      y.data()[i] = S(1) / (S(1) + e);
    } else {
      const S e = std::exp(v);
      y.data()[i] = e / (S(1) + e);
    }
  }
  return y;
}

template <class S>
Mat<S> sigmoid_backward(const Mat<S>& y, const Mat<S>& gout) {
  check_same_shape("sigmoid_backward", y, gout);
  return gout.cwiseProduct(y.cwiseProduct((Mat<S>::Ones(y.rows(), y.cols()) - y)));
}

template <class S>
Mat<S> relu(const Mat<S>& x) {
  return x.cwiseMax(S(0));
}

template <class S>
Mat<S> relu_backward(const Mat<S>& x, const Mat<S>& gout) {
  check_same_shape("relu_backward", x, gout);
  return (x.array() > S(0)).template cast<S>().matrix().cwiseProduct(gout);
}

// ---- layer norm, row-wise, with affine parameters ----

template <class S>
struct LayerNormCache {
  Mat<S> xhat;       // normalized input
  Vec<S> inv_std;    // 1 / sqrt(var + eps) per row
};

template <class S>
Mat<S> layer_norm(const Mat<S>& x, const Vec<S>& gamma, const Vec<S>& beta,
                  LayerNormCache<S>* cache = nullptr) {
  if (x.cols() != gamma.size() || x.cols() != beta.size())
    fail(ErrClass::shape, "layer_norm: shape mismatch " + shape_str(x.rows(), x.cols()) +
                              " vs gamma " + shape_str(gamma.size(), 1));
  Mat<S> y(x.rows(), x.cols());
  Mat<S> xhat(x.rows(), x.cols());
  Vec<S> inv_std(x.rows());
  const S inv_n = S(1) / static_cast<S>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S mu = x.row(i).sum() * inv_n;
    const S var = (x.row(i).array() - mu).square().sum() * inv_n;
    const S is = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    inv_std(i) = is;
    xhat.row(i) = (x.row(i).array() - mu) * is;
    y.row(i) = xhat.row(i).cwiseProduct(gamma.transpose()) + beta.transpose();
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <class S>
void layer_norm_backward(const LayerNormCache<S>& cache, const Vec<S>& gamma,
                         const Mat<S>& gout, Mat<S>& dx, Vec<S>& dgamma, Vec<S>& dbeta) {
  const auto& xhat = cache.xhat;
  dx.resize(xhat.rows(), xhat.cols());
  dgamma = Vec<S>::Zero(xhat.cols());
  dbeta = Vec<S>::Zero(xhat.cols());
  const S inv_n = S(1) / static_cast<S>(xhat.cols());
  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
    const auto g = gout.row(i);
    dgamma += g.cwiseProduct(xhat.row(i)).transpose();
    dbeta += g.transpose();
    // dL/dxhat = g * gamma; then the standard two-correction form.
    Eigen::Matrix<S, 1, Eigen::Dynamic> gh = g.cwiseProduct(gamma.transpose());
    const S mean_gh = gh.sum() * inv_n;
    const S mean_gh_xhat = gh.cwiseProduct(xhat.row(i)).sum() * inv_n;
    dx.row(i) =
        (gh.array() - mean_gh - xhat.row(i).array() * mean_gh_xhat) * cache.inv_std(i);
  }
}

// ---- row-wise l2 normalization ----

template <class S>
Mat<S> l2_normalize_rows(const Mat<S>& x, Vec<S>* norms_out = nullptr) {
  Mat<S> y(x.rows(), x.cols());
  Vec<S> norms(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S n = x.row(i).norm();
    if (!(n > static_cast<S>(kL2NormFloor)))
      fail(ErrClass::degenerate,
           "l2_normalize: near-zero input norm at row " + std::to_string(i));
    norms(i) = n;
    y.row(i) = x.row(i) / n;
  }
  if (norms_out) *norms_out = std::move(norms);
  return y;
}

template <class S>
Mat<S> l2_normalize_rows_backward(const Mat<S>& y, const Vec<S>& norms, const Mat<S>& gout) {
  check_same_shape("l2_normalize_backward", y, gout);
  Mat<S> dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const S dot = y.row(i).cwiseProduct(gout.row(i)).sum();
    dx.row(i) = (gout.row(i) - y.row(i) * dot) / norms(i);
  }
  return dx;
}

// ---- elementwise product ----

template <class S>
Mat<S> elementwise_mul(const Mat<S>& a, const Mat<S>& b) {
  check_same_shape("elementwise_mul", a, b);
  return a.cwiseProduct(b);
}
// backward: da = gout .* b, db = gout .* a.

// ---- binary cross entropy over a batch of probabilities ----

template <class S>
S clip_prob(S p) {
  return std::min(static_cast<S>(kProbClipHi), std::max(static_cast<S>(kProbClipLo), p));
}

template <class S>
S cross_entropy_binary(const Mat<S>& p, const Mat<S>& y) {
  check_same_shape("cross_entropy_binary", p, y);
  if (p.size() == 0) fail(ErrClass::data, "cross_entropy_binary: empty batch");
  S loss = S(0);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const S pc = clip_prob(p.data()[i]);
    const S yy = y.data()[i];
    loss -= yy * std::log(pc) + (S(1) - yy) * std::log(S(1) - pc);
  }
  return loss / static_cast<S>(p.size());
}

template <class S>
Mat<S> cross_entropy_binary_backward(const Mat<S>& p, const Mat<S>& y, S gout = S(1)) {
  check_same_shape("cross_entropy_binary_backward", p, y);
  Mat<S> dp(p.rows(), p.cols());
  const S inv_n = S(1) / static_cast<S>(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const S pc = clip_prob(p.data()[i]);
    const bool clipped = pc != p.data()[i];
    // clip has zero slope outside the interior
    dp.data()[i] = clipped ? S(0)
                           : gout * inv_n * (pc - y.data()[i]) / (pc * (S(1) - pc));
  }
  return dp;
}

// Fused logit form used by the trainers: d(BCE(sigmoid(z)))/dz = (p - y)/N.
// Exact for unclipped probabilities; the clip region has zero slope.
template <class S>
Mat<S> bce_sigmoid_backward_logits(const Mat<S>& p, const Mat<S>& y) {
  check_same_shape("bce_sigmoid_backward_logits", p, y);
  Mat<S> dz(p.rows(), p.cols());
  const S inv_n = S(1) / static_cast<S>(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const S pv = p.data()[i];
    const bool clipped =
        pv <= static_cast<S>(kProbClipLo) || pv >= static_cast<S>(kProbClipHi);
    dz.data()[i] = clipped ? S(0) : inv_n * (pv - y.data()[i]);
  }
  return dz;
}

template <class S>
bool all_finite(const Mat<S>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (!std::isfinite(static_cast<double>(m.data()[i]))) return false;
  return true;
}

}  // namespace idproxy::nn
