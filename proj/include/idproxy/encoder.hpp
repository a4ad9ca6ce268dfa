#pragma once

#include <string>
#include <vector>

#include "idproxy/checkpoint.hpp"
#include "idproxy/corpus.hpp"
#include "idproxy/kernels.hpp"
#include "idproxy/optim.hpp"

// Content encoder: a small bidirectional pre-norm transformer over a prompt of
// [BOS] + projected image patches + text tokens + a fixed literal suffix
// holding the [EMB] summary slot. Exposes every layer's hidden states, an
// attention pooling over tokens, and the MLP projection into the ID space.
// Backward passes are written out by hand; grad checks cover the full chain.

namespace idproxy::enc {

using nn::Mat;
using nn::Vec;

struct EncoderConfig {
  int64_t n_layers = 8;
  int64_t d_hidden = 64;
  int64_t n_heads = 4;
  int64_t vocab_size = 500;  // text tokens; specials are appended after
  int64_t max_tokens = 32;
  int64_t d_id = 32;
  uint64_t init_seed = 7;

  void validate() const {
    if (n_layers < 3) fail(ErrClass::config, "encoder: n_layers must be >= 3");
    if (d_hidden < 1 || n_heads < 1 || vocab_size < 1 || max_tokens < 1 || d_id < 1)
      fail(ErrClass::config, "encoder: dimensions and counts must be >= 1");
    if (d_hidden % n_heads != 0)
      fail(ErrClass::config, "encoder: d_hidden must be divisible by n_heads");
  }

  std::string canonical_json() const;
  uint64_t hash() const;

  // Special token ids live after the text vocabulary.
  int64_t tok_bos() const { return vocab_size; }
  int64_t tok_eos() const { return vocab_size + 1; }
  int64_t tok_emb() const { return vocab_size + 2; }
  int64_t tok_quote() const { return vocab_size + 3; }
  int64_t tok_suffix(int i) const { return vocab_size + 4 + i; }  // i in [0,5)
  int64_t n_embeddings() const { return vocab_size + 4 + kSuffixLen; }

  static constexpr int kSuffixLen = 5;  // literal words before the quoted slot
};

// One prompt: token ids with kPatchSlot sentinels at the patch positions.
struct PromptTokens {
  static constexpr int32_t kPatchSlot = -1;

  std::vector<int32_t> ids;  // length T
  nn::MatD patches;          // [kNumPatches x kPatchDim]
  int64_t emb_pos = -1;

  int64_t length() const { return static_cast<int64_t>(ids.size()); }
};

PromptTokens build_prompt(const data::Item& item, const EncoderConfig& cfg);

// Per-layer hidden states for a batch of B prompts of equal length T, packed
// as (B*T) x D; layer 0 is the input embedding.
template <class S>
struct HiddenStates {
  std::vector<Mat<S>> layers;  // n_layers + 1 entries
  int64_t batch = 0;
  int64_t tokens = 0;
};

template <class S>
class Encoder {
 public:
  explicit Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    init_params();
  }

  const EncoderConfig& config() const { return cfg_; }
  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }

  // ---- forward ----

  // Minimal per-block state for the backward pass. Layer-norm outputs are
  // recomputed from xhat during backward instead of being stored.
  struct BlockCache {
    nn::LayerNormCache<S> ln1, ln2;
    Mat<S> q, k, v;                  // (B*T) x D
    Mat<S> attn;                     // (B*heads*T) x T softmax rows
    Mat<S> ctx;                      // (B*T) x D, pre-output-projection
    Mat<S> mlp_h;                    // relu of the hidden MLP activation
  };

  struct EncodeCache {
    std::vector<BlockCache> blocks;
    std::vector<Mat<S>> h;  // layer outputs, n_layers+1, (B*T) x D
    int64_t batch = 0, tokens = 0;
    std::vector<int64_t> flat_ids;      // embedding row per (b,t); -1 for patch slots
    std::vector<int64_t> patch_slot;    // index into patch rows or -1
    Mat<S> patch_in;                    // (B*kNumPatches) x kPatchDim
  };

  HiddenStates<S> encode(const std::vector<PromptTokens>& prompts,
                         EncodeCache* cache = nullptr) const;

  // Attention pooling over one layer's states. `attn_out` receives the B x T
  // softmax weights when requested.
  Mat<S> pool_g(const Mat<S>& h_layer, int64_t batch, int64_t tokens,
                Mat<S>* attn_out = nullptr) const;

  // 2-layer MLP into the ID space followed by l2 normalization. `item_tag`
  // only decorates the degenerate-norm error message.
  struct PhiCache {
    Mat<S> z_in, h1, pre_norm;
    Vec<S> norms;
  };
  Mat<S> project_phi(const Mat<S>& z, PhiCache* cache = nullptr,
                     const std::string& item_tag = {}) const;

  // ---- backward (gradients accumulate into params().g) ----

  void project_phi_backward(const PhiCache& cache, const Mat<S>& gout, Mat<S>& dz);
  void pool_g_backward(const Mat<S>& h_layer, const Mat<S>& attn, int64_t batch,
                       int64_t tokens, const Mat<S>& gz, Mat<S>& dh);
  // dh_top: gradient w.r.t. the final layer's states. Embedding-table and
  // positional gradients are accumulated internally.
  void encode_backward(const EncodeCache& cache, Mat<S> dh_top);

  // ---- persistence ----

  void save(const std::string& path) const;
  // Restores parameters; fails if the header's config hash differs.
  void load(const std::string& path);

  uint64_t param_hash() const { return params_.value_hash(); }

 private:
  void init_params();

  EncoderConfig cfg_;
  nn::ParamSet<S> params_;
};

using EncoderF = Encoder<float>;
using EncoderD = Encoder<double>;

// ---- implementation ----

template <class S>
void Encoder<S>::init_params() {
  const int64_t D = cfg_.d_hidden, L = cfg_.n_layers;
  Rng rng(cfg_.init_seed);
  auto normal_init = [&](Mat<S>& w, double std) { nn::fill_normal(w, rng, std); };

  normal_init(params_.add("emb.tok", cfg_.n_embeddings(), D), 0.02);
  normal_init(params_.add("emb.pos", cfg_.max_tokens, D), 0.02);
  normal_init(params_.add("patch.w", data::kPatchDim, D), 0.02);
  params_.add("patch.b", 1, D);
  for (int64_t l = 0; l < L; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    params_.add(p + "ln1.g", 1, D).setOnes();
    params_.add(p + "ln1.b", 1, D);
    normal_init(params_.add(p + "attn.wq", D, D), 0.02);
    params_.add(p + "attn.bq", 1, D);
    normal_init(params_.add(p + "attn.wk", D, D), 0.02);
    params_.add(p + "attn.bk", 1, D);
    normal_init(params_.add(p + "attn.wv", D, D), 0.02);
    params_.add(p + "attn.bv", 1, D);
    normal_init(params_.add(p + "attn.wo", D, D), 0.02);
    params_.add(p + "attn.bo", 1, D);
    params_.add(p + "ln2.g", 1, D).setOnes();
    params_.add(p + "ln2.b", 1, D);
    normal_init(params_.add(p + "mlp.w1", D, 2 * D), 0.02);
    params_.add(p + "mlp.b1", 1, 2 * D);
    normal_init(params_.add(p + "mlp.w2", 2 * D, D), 0.02);
    params_.add(p + "mlp.b2", 1, D);
  }
  normal_init(params_.add("pool.q", 1, D), 0.02);
  normal_init(params_.add("phi.w1", D, D), 0.02);
  params_.add("phi.b1", 1, D);
  normal_init(params_.add("phi.w2", D, cfg_.d_id), 0.02);
  params_.add("phi.b2", 1, cfg_.d_id);
}

template <class S>
HiddenStates<S> Encoder<S>::encode(const std::vector<PromptTokens>& prompts,
                                   EncodeCache* cache) const {
  if (prompts.empty()) fail(ErrClass::data, "encode: empty prompt batch");
  const int64_t B = static_cast<int64_t>(prompts.size());
  const int64_t T = prompts[0].length();
  const int64_t D = cfg_.d_hidden, H = cfg_.n_heads, dh = D / H;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

  const Mat<S>& tok_emb = params_.w("emb.tok");
  const Mat<S>& pos_emb = params_.w("emb.pos");
  const Mat<S>& patch_w = params_.w("patch.w");
  const Mat<S>& patch_b = params_.w("patch.b");

  // Embed: token rows, patch projections, positions.
  Mat<S> x(B * T, D);
  std::vector<int64_t> flat_ids(static_cast<size_t>(B * T), -1);
  std::vector<int64_t> patch_slot(static_cast<size_t>(B * T), -1);
  Mat<S> patch_in(B * data::kNumPatches, data::kPatchDim);
  for (int64_t b = 0; b < B; ++b) {
    const auto& p = prompts[static_cast<size_t>(b)];
    if (p.length() != T) fail(ErrClass::shape, "encode: ragged prompt batch");
    if (T > cfg_.max_tokens)
      fail(ErrClass::shape, "encode: prompt longer than max_tokens");
    int64_t patch_idx = 0;
    for (int64_t t = 0; t < T; ++t) {
      const int64_t row = b * T + t;
      const int32_t id = p.ids[static_cast<size_t>(t)];
      if (id == PromptTokens::kPatchSlot) {
        const int64_t pr = b * data::kNumPatches + patch_idx;
        for (int q = 0; q < data::kPatchDim; ++q)
          patch_in(pr, q) = static_cast<S>(p.patches(patch_idx, q));
        x.row(row) = patch_in.row(pr) * patch_w + patch_b.row(0);
        patch_slot[static_cast<size_t>(row)] = pr;
        ++patch_idx;
      } else {
        if (id < 0 || id >= cfg_.n_embeddings())
          fail(ErrClass::data, "encode: token id " + std::to_string(id) +
                                   " outside embedding table");
        x.row(row) = tok_emb.row(id);
        flat_ids[static_cast<size_t>(row)] = id;
      }
      x.row(row) += pos_emb.row(t);
    }
  }

  HiddenStates<S> out;
  out.batch = B;
  out.tokens = T;
  out.layers.reserve(static_cast<size_t>(cfg_.n_layers) + 1);
  out.layers.push_back(x);
  if (cache) {
    cache->blocks.clear();
    cache->blocks.resize(static_cast<size_t>(cfg_.n_layers));
    cache->h.clear();
    cache->h.push_back(x);
    cache->batch = B;
    cache->tokens = T;
    cache->flat_ids = flat_ids;
    cache->patch_slot = patch_slot;
    cache->patch_in = patch_in;
  }

  for (int64_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[static_cast<size_t>(l)] : local;

    const Mat<S> ln1_out =
        nn::layer_norm(x, Vec<S>(params_.w(p + "ln1.g").row(0).transpose()),
                       Vec<S>(params_.w(p + "ln1.b").row(0).transpose()), &bc.ln1);
    bc.q = ln1_out * params_.w(p + "attn.wq");
    bc.q.rowwise() += params_.w(p + "attn.bq").row(0);
    bc.k = ln1_out * params_.w(p + "attn.wk");
    bc.k.rowwise() += params_.w(p + "attn.bk").row(0);
    bc.v = ln1_out * params_.w(p + "attn.wv");
    bc.v.rowwise() += params_.w(p + "attn.bv").row(0);

    bc.attn.resize(B * H * T, T);
    bc.ctx.resize(B * T, D);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t h = 0; h < H; ++h) {
        const auto qb = bc.q.block(b * T, h * dh, T, dh);
        const auto kb = bc.k.block(b * T, h * dh, T, dh);
        const auto vb = bc.v.block(b * T, h * dh, T, dh);
        Mat<S> scores = qb * kb.transpose() * inv_sqrt_dh;
        const Mat<S> a = nn::softmax_rows(scores);
        bc.attn.block((b * H + h) * T, 0, T, T) = a;
        bc.ctx.block(b * T, h * dh, T, dh) = a * vb;
      }
    }
    Mat<S> attn_out = bc.ctx * params_.w(p + "attn.wo");
    attn_out.rowwise() += params_.w(p + "attn.bo").row(0);
    x += attn_out;  // x is now the post-attention residual state

    const Mat<S> ln2_out =
        nn::layer_norm(x, Vec<S>(params_.w(p + "ln2.g").row(0).transpose()),
                       Vec<S>(params_.w(p + "ln2.b").row(0).transpose()), &bc.ln2);
    Mat<S> mlp_pre = ln2_out * params_.w(p + "mlp.w1");
    mlp_pre.rowwise() += params_.w(p + "mlp.b1").row(0);
    bc.mlp_h = nn::relu(mlp_pre);
    Mat<S> mlp_out = bc.mlp_h * params_.w(p + "mlp.w2");
    mlp_out.rowwise() += params_.w(p + "mlp.b2").row(0);
    x += mlp_out;

    out.layers.push_back(x);
    if (cache) cache->h.push_back(x);
  }
  return out;
}

// Rebuild a layer-norm output from its cache and affine parameters.
template <class S>
Mat<S> ln_out_from_cache(const nn::LayerNormCache<S>& c, const Mat<S>& gamma_row,
                         const Mat<S>& beta_row) {
  Mat<S> out = c.xhat.array().rowwise() * gamma_row.row(0).array();
  out.rowwise() += beta_row.row(0);
  return out;
}

template <class S>
Mat<S> Encoder<S>::pool_g(const Mat<S>& h_layer, int64_t batch, int64_t tokens,
                          Mat<S>* attn_out) const {
  if (h_layer.rows() != batch * tokens || h_layer.cols() != cfg_.d_hidden)
    fail(ErrClass::shape, "pool_g: states shape mismatch");
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(cfg_.d_hidden));
  const Mat<S>& q = params_.w("pool.q");
  Mat<S> z(batch, cfg_.d_hidden);
  Mat<S> attn(batch, tokens);
  for (int64_t b = 0; b < batch; ++b) {
    const auto hb = h_layer.middleRows(b * tokens, tokens);
    Mat<S> scores = (hb * q.transpose()).transpose() * inv_sqrt_d;  // 1 x T
    const Mat<S> a = nn::softmax_rows(scores);
    attn.row(b) = a.row(0);
    z.row(b) = a.row(0) * hb;
  }
  if (attn_out) *attn_out = std::move(attn);
  return z;
}

template <class S>
Mat<S> Encoder<S>::project_phi(const Mat<S>& z, PhiCache* cache,
                               const std::string& item_tag) const {
  if (z.cols() != cfg_.d_hidden) fail(ErrClass::shape, "project_phi: input width mismatch");
  Mat<S> pre1 = z * params_.w("phi.w1");
  pre1.rowwise() += params_.w("phi.b1").row(0);
  Mat<S> h1 = nn::relu(pre1);
  Mat<S> pre_norm = h1 * params_.w("phi.w2");
  pre_norm.rowwise() += params_.w("phi.b2").row(0);
  Vec<S> norms;
  Mat<S> out;
  try {
    out = nn::l2_normalize_rows(pre_norm, &norms);
  } catch (const Error& e) {
    if (e.cls() == ErrClass::degenerate && !item_tag.empty())
      fail(ErrClass::degenerate, std::string(e.what()) + " (item " + item_tag + ")");
    throw;
  }
  if (cache) {
    cache->z_in = z;
    cache->h1 = std::move(h1);
    cache->pre_norm = std::move(pre_norm);
    cache->norms = std::move(norms);
  }
  return out;
}

template <class S>
void Encoder<S>::project_phi_backward(const PhiCache& cache, const Mat<S>& gout,
                                      Mat<S>& dz) {
  const Mat<S> y = cache.pre_norm.array().colwise() / cache.norms.array();
  Mat<S> dpre = nn::l2_normalize_rows_backward(y, cache.norms, gout);
  params_.g("phi.w2") += cache.h1.transpose() * dpre;
  params_.g("phi.b2") += dpre.colwise().sum();
  Mat<S> dh1 = dpre * params_.w("phi.w2").transpose();
  // relu mask via the saved activations (h1 > 0 iff pre1 > 0)
  dh1 = (cache.h1.array() > S(0)).template cast<S>().matrix().cwiseProduct(dh1);
  params_.g("phi.w1") += cache.z_in.transpose() * dh1;
  params_.g("phi.b1") += dh1.colwise().sum();
  dz = dh1 * params_.w("phi.w1").transpose();
}

template <class S>
void Encoder<S>::pool_g_backward(const Mat<S>& h_layer, const Mat<S>& attn,
                                 int64_t batch, int64_t tokens, const Mat<S>& gz,
                                 Mat<S>& dh) {
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(cfg_.d_hidden));
  const Mat<S>& q = params_.w("pool.q");
  Mat<S>& dq = params_.g("pool.q");
  dh = Mat<S>::Zero(h_layer.rows(), h_layer.cols());
  for (int64_t b = 0; b < batch; ++b) {
    const auto hb = h_layer.middleRows(b * tokens, tokens);
    const Mat<S> a = attn.row(b);
    // z = a * hb
    dh.middleRows(b * tokens, tokens) += a.transpose() * gz.row(b);
    Mat<S> da = gz.row(b) * hb.transpose();  // 1 x T
    Mat<S> ds = nn::softmax_rows_backward(a, da) * inv_sqrt_d;
    dq += ds * hb;
    dh.middleRows(b * tokens, tokens) += ds.transpose() * q;
  }
}

template <class S>
void Encoder<S>::encode_backward(const EncodeCache& cache, Mat<S> dh_top) {
  const int64_t B = cache.batch, T = cache.tokens;
  const int64_t D = cfg_.d_hidden, H = cfg_.n_heads, dh = D / H;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

  Mat<S> dx = std::move(dh_top);
  for (int64_t l = cfg_.n_layers - 1; l >= 0; --l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    const BlockCache& bc = cache.blocks[static_cast<size_t>(l)];

    // MLP sub-block: x = x_mid + relu(ln2(x_mid) W1 + b1) W2 + b2
    params_.g(p + "mlp.w2") += bc.mlp_h.transpose() * dx;
    params_.g(p + "mlp.b2") += dx.colwise().sum();
    Mat<S> dmlp_h = dx * params_.w(p + "mlp.w2").transpose();
    dmlp_h = (bc.mlp_h.array() > S(0)).template cast<S>().matrix().cwiseProduct(dmlp_h);
    const Mat<S> ln2_out =
        ln_out_from_cache(bc.ln2, params_.w(p + "ln2.g"), params_.w(p + "ln2.b"));
    params_.g(p + "mlp.w1") += ln2_out.transpose() * dmlp_h;
    params_.g(p + "mlp.b1") += dmlp_h.colwise().sum();
    Mat<S> dln2_out = dmlp_h * params_.w(p + "mlp.w1").transpose();
    Mat<S> dx_mid;
    {
      Vec<S> dgamma, dbeta;
      nn::layer_norm_backward(bc.ln2, Vec<S>(params_.w(p + "ln2.g").row(0).transpose()), dln2_out,
                              dx_mid, dgamma, dbeta);
      params_.g(p + "ln2.g") += dgamma.transpose();
      params_.g(p + "ln2.b") += dbeta.transpose();
    }
    dx_mid += dx;  // residual

    // Attention sub-block: x_mid = x_in + (ctx Wo + bo)
    params_.g(p + "attn.wo") += bc.ctx.transpose() * dx_mid;
    params_.g(p + "attn.bo") += dx_mid.colwise().sum();
    Mat<S> dctx = dx_mid * params_.w(p + "attn.wo").transpose();

    Mat<S> dq = Mat<S>::Zero(B * T, D), dk = Mat<S>::Zero(B * T, D),
           dv = Mat<S>::Zero(B * T, D);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t h = 0; h < H; ++h) {
        const auto a = bc.attn.block((b * H + h) * T, 0, T, T);
        const auto qb = bc.q.block(b * T, h * dh, T, dh);
        const auto kb = bc.k.block(b * T, h * dh, T, dh);
        const auto vb = bc.v.block(b * T, h * dh, T, dh);
        const auto dctx_b = dctx.block(b * T, h * dh, T, dh);
        dv.block(b * T, h * dh, T, dh) += a.transpose() * dctx_b;
        Mat<S> da = dctx_b * vb.transpose();
        Mat<S> ds = nn::softmax_rows_backward(Mat<S>(a), da) * inv_sqrt_dh;
        dq.block(b * T, h * dh, T, dh) += ds * kb;
        dk.block(b * T, h * dh, T, dh) += ds.transpose() * qb;
      }
    }
    const Mat<S> ln1_out =
        ln_out_from_cache(bc.ln1, params_.w(p + "ln1.g"), params_.w(p + "ln1.b"));
    params_.g(p + "attn.wq") += ln1_out.transpose() * dq;
    params_.g(p + "attn.bq") += dq.colwise().sum();
    params_.g(p + "attn.wk") += ln1_out.transpose() * dk;
    params_.g(p + "attn.bk") += dk.colwise().sum();
    params_.g(p + "attn.wv") += ln1_out.transpose() * dv;
    params_.g(p + "attn.bv") += dv.colwise().sum();
    Mat<S> dln1_out = dq * params_.w(p + "attn.wq").transpose() +
                      dk * params_.w(p + "attn.wk").transpose() +
                      dv * params_.w(p + "attn.wv").transpose();
    Mat<S> dx_in;
    {
      Vec<S> dgamma, dbeta;
      nn::layer_norm_backward(bc.ln1, Vec<S>(params_.w(p + "ln1.g").row(0).transpose()), dln1_out,
                              dx_in, dgamma, dbeta);
      params_.g(p + "ln1.g") += dgamma.transpose();
      params_.g(p + "ln1.b") += dbeta.transpose();
    }
    dx = dx_in + dx_mid;  // residual into the block input
  }

  // Embedding gradients.
  Mat<S>& dtok = params_.g("emb.tok");
  Mat<S>& dpos = params_.g("emb.pos");
  Mat<S>& dpw = params_.g("patch.w");
  Mat<S>& dpb = params_.g("patch.b");
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t < T; ++t) {
      const int64_t row = b * T + t;
      dpos.row(t) += dx.row(row);
      const int64_t id = cache.flat_ids[static_cast<size_t>(row)];
      if (id >= 0) {
        dtok.row(id) += dx.row(row);
      } else {
        const int64_t pr = cache.patch_slot[static_cast<size_t>(row)];
        dpw += cache.patch_in.row(pr).transpose() * dx.row(row);
        dpb += dx.row(row);
      }
    }
  }
}

template <class S>
void Encoder<S>::save(const std::string& path) const {
  nn::save_checkpoint(params_, cfg_.hash(), path);
}

template <class S>
void Encoder<S>::load(const std::string& path) {
  nn::load_checkpoint(params_, cfg_.hash(), path);
}

}  // namespace idproxy::enc
