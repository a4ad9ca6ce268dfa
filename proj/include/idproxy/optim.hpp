#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "idproxy/tensor.hpp"

namespace idproxy::nn {

struct AdamWConfig {
  double lr = 1e-4;  // AdamW learning rate
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled-weight-decay Adam update with bias correction, applied in place.
// `t` is the 1-based step count after incrementing.
template <class S>
void adamw_update(Mat<S>& w, const Mat<S>& g, Mat<S>& m, Mat<S>& v, int64_t t,
                  const AdamWConfig& cfg) {
  if (cfg.lr <= 0.0) fail(ErrClass::config, "adamw: lr must be positive");
  check_same_shape("adamw", w, g);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S corr1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const S corr2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const S lr = static_cast<S>(cfg.lr), wd = static_cast<S>(cfg.weight_decay);
  const S eps = static_cast<S>(cfg.eps);
  m = b1 * m + (S(1) - b1) * g;
  v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
  const Mat<S> mhat = m / corr1;
  const Mat<S> vhat = v / corr2;
  w -= lr * (((mhat.array() / (vhat.array().sqrt() + eps)) + wd * w.array()).matrix());
}

// Named dense parameter set with gradient and AdamW state per tensor.
template <class S>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Mat<S> w, g, m, v;
  };

  Mat<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) fail(ErrClass::config, "duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Mat<S>::Zero(rows, cols), Mat<S>::Zero(rows, cols),
                        Mat<S>::Zero(rows, cols), Mat<S>::Zero(rows, cols)});
    return entries_.back().w;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrClass::not_found, "no such parameter: " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrClass::not_found, "no such parameter: " + name);
    return entries_[it->second];
  }

  Mat<S>& w(const std::string& name) { return entry(name).w; }
  const Mat<S>& w(const std::string& name) const { return entry(name).w; }
  Mat<S>& g(const std::string& name) { return entry(name).g; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.g.setZero();
  }

  void step(const AdamWConfig& cfg) {
    ++t_;
    for (auto& e : entries_) adamw_update(e.w, e.g, e.m, e.v, t_, cfg);
  }

  int64_t step_count() const { return t_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.w.size();
    return n;
  }

  // Hash of parameter values (names, shapes, float32 payload). Used for the
  // encoder freeze check across Stage-2 / ranker training.
  uint64_t value_hash() const {
    Fnv64 h;
    for (const auto& e : entries_) {
      h.update(e.name);
      const int64_t r = e.w.rows(), c = e.w.cols();
      h.update(&r, sizeof(r));
      h.update(&c, sizeof(c));
      for (Eigen::Index i = 0; i < e.w.size(); ++i) {
        const float f = static_cast<float>(e.w.data()[i]);
        h.update(&f, sizeof(f));
      }
    }
    return h.value();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
  int64_t t_ = 0;
};

// Embedding table with lazily updated per-row AdamW state: only rows touched
// by a batch receive gradient and weight decay, so rows of items absent from
// the training split stay bit-identical to their initialization.
template <class S>
class EmbTable {
 public:
  EmbTable() = default;
  EmbTable(Eigen::Index rows, Eigen::Index cols)
      : w(Mat<S>::Zero(rows, cols)), m_(Mat<S>::Zero(rows, cols)),
        v_(Mat<S>::Zero(rows, cols)) {}

  Mat<S> w;

  void accumulate(Eigen::Index row, const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>& g) {
    auto [it, fresh] = pending_.try_emplace(row, Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(w.cols()));
    it->second += g;
  }

  void step(const AdamWConfig& cfg) {
    if (cfg.lr <= 0.0) fail(ErrClass::config, "adamw: lr must be positive");
    ++t_;
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    const S corr1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t_)));
    const S corr2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t_)));
    const S lr = static_cast<S>(cfg.lr), wd = static_cast<S>(cfg.weight_decay);
    const S eps = static_cast<S>(cfg.eps);
    // Deterministic order regardless of map iteration.
    rows_buf_.clear();
    for (auto& kv : pending_) rows_buf_.push_back(kv.first);
    std::sort(rows_buf_.begin(), rows_buf_.end());
    for (Eigen::Index r : rows_buf_) {
      const auto& g = pending_[r];
      m_.row(r) = b1 * m_.row(r) + (S(1) - b1) * g;
      v_.row(r) = b2 * v_.row(r) + (S(1) - b2) * g.cwiseProduct(g);
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        const S mhat = m_(r, j) / corr1;
        const S vhat = v_(r, j) / corr2;
        w(r, j) -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w(r, j));
      }
    }
    pending_.clear();
  }

  int64_t param_count() const { return w.size(); }

  // Accumulated-but-unapplied gradient of one row (zero if untouched).
  Eigen::Matrix<S, 1, Eigen::Dynamic> pending_grad(Eigen::Index row) const {
    auto it = pending_.find(row);
    if (it == pending_.end()) return Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(w.cols());
    return it->second;
  }

 private:
  Mat<S> m_, v_;
  std::unordered_map<Eigen::Index, Eigen::Matrix<S, 1, Eigen::Dynamic>> pending_;
  std::vector<Eigen::Index> rows_buf_;
  int64_t t_ = 0;
};

}  // namespace idproxy::nn
