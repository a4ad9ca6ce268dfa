#pragma once

#include <map>
#include <vector>

#include "idproxy/corpus.hpp"
#include "idproxy/encoder.hpp"

// Stage 1: align content proxies with the ranker's ID-embedding space using
// an in-batch contrastive loss over warm items. Targets are constants; the
// encoder and projection receive the gradient.

namespace idproxy::align {

using nn::Mat;
using nn::MatD;
using nn::VecD;

struct IdEmbeddingTable {
  std::map<int64_t, data::IdTableRow> raw;
  std::map<int64_t, VecD> preprocessed;  // unit-norm targets, count >= tau only
  int64_t tau = 0;
};

struct Stage1Config {
  int64_t tau = 5;
  double tau_c = 0.07;     // contrastive temperature
  int64_t batch_size = 512;
  double lr = 1e-4;
  int64_t epochs = 30;
  double weight_decay = 0.0;
  uint64_t seed = 1;

  void validate() const {
    if (tau < 0) fail(ErrClass::config, "stage1: tau must be >= 0");
    if (!(tau_c > 0.0)) fail(ErrClass::config, "stage1: tau_c must be > 0");
    if (batch_size < 2) fail(ErrClass::config, "stage1: batch_size must be >= 2");
    if (lr <= 0.0) fail(ErrClass::config, "stage1: lr must be > 0");
    if (epochs < 1) fail(ErrClass::config, "stage1: epochs must be >= 1");
  }
  std::string canonical_json() const;
};

// Frequency filter + l2 normalization of the raw table.
IdEmbeddingTable preprocess_id_table(const std::map<int64_t, data::IdTableRow>& raw,
                                     int64_t tau);

// Eq.-style contrastive loss: mean over rows of −log softmax similarity of
// the matching target among in-batch targets. Rows of both inputs must be
// unit norm within 1e-3. If dh is non-null it receives d(loss)/d(h) — targets
// are constants by design.
template <class S>
S pal_loss(const Mat<S>& h, const Mat<S>& e, double tau_c, Mat<S>* dh = nullptr) {
  if (!(tau_c > 0.0)) fail(ErrClass::config, "pal_loss: tau_c must be > 0");
  nn::check_same_shape("pal_loss", h, e);
  if (h.rows() < 1) fail(ErrClass::data, "pal_loss: empty batch");
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    if (std::fabs(static_cast<double>(h.row(i).norm()) - 1.0) > 1e-3)
      fail(ErrClass::data, "pal_loss: proxy row " + std::to_string(i) + " not unit norm");
    if (std::fabs(static_cast<double>(e.row(i).norm()) - 1.0) > 1e-3)
      fail(ErrClass::data, "pal_loss: target row " + std::to_string(i) + " not unit norm");
  }
  const Eigen::Index n = h.rows();
  const S inv_tau = static_cast<S>(1.0 / tau_c);
  Mat<S> sim = h * e.transpose() * inv_tau;  // n x n
  S loss = S(0);
  Mat<S> soft = nn::softmax_rows(sim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S m = sim.row(i).maxCoeff();
    const S lse = m + std::log((sim.row(i).array() - m).exp().sum());
    loss += lse - sim(i, i);
  }
  loss /= static_cast<S>(n);
  if (dh) {
    // d(loss)/d(sim) = (softmax - I) / n, then through sim = h e^T / tau_c.
    soft.diagonal().array() -= S(1);
    soft /= static_cast<S>(n);
    *dh = soft * e * inv_tau;
  }
  return loss;
}

struct Stage1Result {
  std::map<int64_t, nn::VecF> proxies;  // p_coarse for every item, unit norm
  std::vector<double> epoch_losses;
  bool batch_size_adjusted = false;
};

// Minibatch PAL training over warm items with preprocessed targets; after
// training, proxies are emitted for all items (cold included) in inference
// mode. Deterministic given cfg.seed and the encoder's init seed.
Stage1Result train_stage1(const data::Corpus& corpus, const IdEmbeddingTable& table,
                          enc::Encoder<float>& encoder, const Stage1Config& cfg);

// Emit p_coarse for every corpus item with the current encoder parameters.
std::map<int64_t, nn::VecF> emit_coarse_proxies(const data::Corpus& corpus,
                                                const enc::Encoder<float>& encoder);
std::map<int64_t, nn::VecF> emit_coarse_proxies(const std::vector<data::Item>& items,
                                                const enc::Encoder<float>& encoder);

// Fraction of warm items whose own target is among the k highest-dot-product
// targets for their proxy (ties broken by item id ascending).
double retrieval_eval(const std::map<int64_t, nn::VecF>& proxies,
                      const IdEmbeddingTable& table, int64_t k);

// Mean cosine between proxies and their targets over preprocessed items.
double mean_alignment_cosine(const std::map<int64_t, nn::VecF>& proxies,
                             const IdEmbeddingTable& table);

}  // namespace idproxy::align
