#pragma once

#include <map>
#include <string>
#include <vector>

#include "idproxy/encoder.hpp"

// Stage 2: cluster the frozen encoder's layers into three groups, pool the
// medoid layer of each group, and fuse the pooled states with the coarse
// proxy through a small adaptor and residual gate into the fine proxy. The
// adaptor trains jointly with the ranker; the encoder never moves.

namespace idproxy::align2 {

using nn::Mat;
using nn::MatD;
using nn::MatF;
using nn::Vec;
using nn::VecD;
using nn::VecF;

// ---- k-means ----

struct KmeansResult {
  std::vector<int32_t> assignments;    // per point
  MatD centroids;                      // k x dim
  std::vector<double> inertia_trace;   // one entry per Lloyd iteration
};

// Lloyd's algorithm with k-means++ seeding. An emptied cluster is re-seeded
// at the point farthest from its current centroid. Deterministic per seed.
KmeansResult kmeans(const MatD& points, int64_t k, uint64_t seed,
                    int64_t max_iters = 100);

// ---- layer partition ----

struct LayerPartition {
  std::vector<int64_t> layers;       // 3 medoid layer indices, ascending, in [1, L]
  std::vector<int32_t> assignments;  // cluster id per layer 1..L
  uint64_t probe_hash = 0;           // signature of the probe item set
  uint64_t seed = 0;
};

// Features: per layer, the probe-set mean of the stage-1 pooled states.
LayerPartition partition_layers(const enc::Encoder<float>& encoder,
                                const std::vector<data::Item>& probe_items,
                                uint64_t seed);

void save_partition(const LayerPartition& p, const std::string& path);
LayerPartition load_partition(const std::string& path);

// Pooled hidden states for selected layers, concatenated per item.
std::map<int64_t, VecF> pool_layer_features(const std::vector<data::Item>& items,
                                            const enc::Encoder<float>& encoder,
                                            const std::vector<int64_t>& layers);

// ---- fine adaptor + residual gate ----

struct AdaptorConfig {
  int64_t d_pooled = 64;   // encoder hidden width D (input is 3 pooled layers)
  int64_t d_hidden = 64;   // adaptor hidden width (= D)
  int64_t d_coarse = 32;   // coarse proxy width d
  int64_t d_fine = 32;     // fine proxy width d-tilde (= ranker embedding width)
  uint64_t init_seed = 3;

  void validate() const {
    if (d_pooled < 1 || d_hidden < 1 || d_coarse < 1 || d_fine < 1)
      fail(ErrClass::config, "adaptor: dimensions must be >= 1");
  }
  std::string canonical_json() const;
  uint64_t hash() const;
};

template <class S>
class Adaptor {
 public:
  explicit Adaptor(const AdaptorConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg_.init_seed);
    nn::fill_normal(params_.add("w1", 3 * cfg_.d_pooled, cfg_.d_hidden), rng, 0.02);
    params_.add("b1", 1, cfg_.d_hidden);
    nn::fill_normal(params_.add("w2", cfg_.d_hidden, cfg_.d_fine), rng, 0.02);
    params_.add("b2", 1, cfg_.d_fine);
    nn::fill_normal(params_.add("wc", cfg_.d_coarse, cfg_.d_fine), rng, 0.02);
    nn::fill_normal(params_.add("wg", cfg_.d_coarse + cfg_.d_fine, cfg_.d_fine), rng, 0.02);
  }

  const AdaptorConfig& config() const { return cfg_; }
  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }
  int64_t param_count() const { return params_.param_count(); }

  struct Cache {
    Mat<S> z_cat, h1, p_raw, gate_in, r, p_coarse;
  };

  // p_raw_fine = relu(z_cat W1 + b1) W2 + b2
  Mat<S> fine_adaptor(const Mat<S>& z_cat, Cache* cache = nullptr) const {
    if (z_cat.cols() != 3 * cfg_.d_pooled)
      fail(ErrClass::shape, "fine_adaptor: expected " + std::to_string(3 * cfg_.d_pooled) +
                                " pooled columns, got " + std::to_string(z_cat.cols()));
    Mat<S> pre = z_cat * params_.w("w1");
    pre.rowwise() += params_.w("b1").row(0);
    Mat<S> h1 = nn::relu(pre);
    Mat<S> p_raw = h1 * params_.w("w2");
    p_raw.rowwise() += params_.w("b2").row(0);
    if (cache) {
      cache->z_cat = z_cat;
      cache->h1 = std::move(h1);
      cache->p_raw = p_raw;
    }
    return p_raw;
  }

  // p_fine = p_coarse Wc + r ⊙ p_raw_fine,  r = σ([p_coarse, p_raw_fine] Wg)
  Mat<S> gate_fuse(const Mat<S>& p_coarse, const Mat<S>& p_raw, Cache* cache = nullptr) const {
    if (p_coarse.cols() != cfg_.d_coarse)
      fail(ErrClass::shape, "gate_fuse: coarse proxy width mismatch");
    if (p_raw.cols() != cfg_.d_fine || p_raw.rows() != p_coarse.rows())
      fail(ErrClass::shape, "gate_fuse: raw fine proxy shape mismatch");
    Mat<S> gate_in = nn::concat_cols<S>({&p_coarse, &p_raw});
    Mat<S> r = nn::sigmoid(Mat<S>(gate_in * params_.w("wg")));
    Mat<S> p_fine = p_coarse * params_.w("wc") + r.cwiseProduct(p_raw);
    if (cache) {
      cache->gate_in = std::move(gate_in);
      cache->r = std::move(r);
      cache->p_coarse = p_coarse;
    }
    return p_fine;
  }

  // Convenience: full fine-proxy forward.
  Mat<S> forward(const Mat<S>& z_cat, const Mat<S>& p_coarse, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    const Mat<S> p_raw = fine_adaptor(z_cat, &c);
    return gate_fuse(p_coarse, p_raw, &c);
  }

  // Accumulates parameter gradients; coarse proxies are constants by design
  // so no gradient is returned for them.
  void backward(const Cache& cache, const Mat<S>& dp_fine) {
    // gate: p_fine = p_c Wc + r ⊙ p_raw
    params_.g("wc") += cache.p_coarse.transpose() * dp_fine;
    Mat<S> dr = dp_fine.cwiseProduct(cache.p_raw);
    Mat<S> dp_raw = dp_fine.cwiseProduct(cache.r);
    Mat<S> dpre_g = nn::sigmoid_backward(cache.r, dr);
    params_.g("wg") += cache.gate_in.transpose() * dpre_g;
    Mat<S> dgate_in = dpre_g * params_.w("wg").transpose();
    dp_raw += dgate_in.rightCols(cfg_.d_fine);

    // adaptor: p_raw = relu(z W1 + b1) W2 + b2
    params_.g("w2") += cache.h1.transpose() * dp_raw;
    params_.g("b2") += dp_raw.colwise().sum();
    Mat<S> dh1 = dp_raw * params_.w("w2").transpose();
    dh1 = (cache.h1.array() > S(0)).template cast<S>().matrix().cwiseProduct(dh1);
    params_.g("w1") += cache.z_cat.transpose() * dh1;
    params_.g("b1") += dh1.colwise().sum();
  }

  void save(const std::string& path) const { nn::save_checkpoint(params_, cfg_.hash(), path); }
  void load(const std::string& path) { nn::load_checkpoint(params_, cfg_.hash(), path); }
  uint64_t param_hash() const { return params_.value_hash(); }

 private:
  AdaptorConfig cfg_;
  nn::ParamSet<S> params_;
};

using AdaptorF = Adaptor<float>;
using AdaptorD = Adaptor<double>;

// Fine proxies for every item under a frozen encoder and adaptor.
std::map<int64_t, VecF> emit_fine_proxies(const std::vector<data::Item>& items,
                                          const enc::Encoder<float>& encoder,
                                          const LayerPartition& partition,
                                          const AdaptorF& adaptor,
                                          const std::map<int64_t, VecF>& coarse);

}  // namespace idproxy::align2
