#pragma once

#include <map>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "idproxy/corpus.hpp"
#include "idproxy/kernels.hpp"
#include "idproxy/optim.hpp"
#include "idproxy/stage2.hpp"

// CTR ranker with a fixed feature layout shared by every variant: six
// equal-width fields (user id, item id, target attention over history,
// context, content slot, fine-proxy slot), their pairwise dot products, the
// raw context scalars, and a plain fine-proxy concat block feed one MLP.
// Variants differ only in which slots carry data and which weights train;
// unused slots stay exactly zero, so a variant whose proxy weights are zeroed
// reproduces the base model bit for bit.

namespace idproxy::rank {

using nn::Mat;
using nn::MatF;
using nn::VecF;

enum class Variant {
  base,                // IDs + attention + context only
  v1_content,          // + final-layer content feature through a learned map
  v2_mlp_map,          // + frozen pretrained content-to-ID regression output
  v3_coarse,           // + coarse proxy through a learned map
  v4_concat_fine,      // v3 + fine proxy in the plain concat block
  v5_structure_reuse,  // v3 + fine proxy as a field and as attention side info
};

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);
inline bool uses_coarse(Variant v) {
  return v == Variant::v3_coarse || v == Variant::v4_concat_fine ||
         v == Variant::v5_structure_reuse;
}
inline bool uses_fine(Variant v) {
  return v == Variant::v4_concat_fine || v == Variant::v5_structure_reuse;
}

struct RankerConfig {
  int64_t n_users = 0;
  int64_t n_items = 0;
  int64_t d = 32;           // field width = id embedding width = proxy width
  int64_t d_z = 64;         // content feature width (pooled encoder state)
  int64_t h1 = 768;
  int64_t h2 = 96;
  int64_t max_history = 20;
  Variant variant = Variant::base;
  uint64_t init_seed = 5;

  int64_t n_fields() const { return 6; }
  int64_t n_dots() const { return 15; }  // C(6,2)
  int64_t mlp_in() const { return 7 * d + n_dots() + data::kContextDim; }

  void validate() const;
  std::string canonical_json() const;
  uint64_t hash() const;
};

// Per-item constant inputs indexed by dense item row. Matrices a variant does
// not consume may be empty.
template <class S>
struct ItemSideInputs {
  Mat<S> z_final;   // [n_items x d_z]         v1
  Mat<S> m_static;  // [n_items x d]           v2 (pretrained, frozen)
  Mat<S> p_coarse;  // [n_items x d]           v3 / v4 / v5
  Mat<S> z_cat;     // [n_items x 3*d_pooled]  v4 / v5 adaptor input
};

template <class S>
struct FeatureBatch {
  std::vector<int64_t> user_rows;
  std::vector<int64_t> item_rows;
  Mat<S> ctx;                                 // [n x kContextDim]
  std::vector<std::vector<int64_t>> history;  // item rows, newest last
  Mat<S> labels;                              // [n x 1]

  int64_t size() const { return static_cast<int64_t>(user_rows.size()); }
};

// Resolve one slice of interactions into a batch, validating every id.
template <class S>
FeatureBatch<S> make_batch(const data::Corpus& corpus, const std::vector<int64_t>& idx,
                           const RankerConfig& cfg) {
  FeatureBatch<S> b;
  const int64_t n = static_cast<int64_t>(idx.size());
  b.ctx.resize(n, data::kContextDim);
  b.labels.resize(n, 1);
  b.user_rows.reserve(idx.size());
  b.item_rows.reserve(idx.size());
  b.history.reserve(idx.size());
  for (int64_t i = 0; i < n; ++i) {
    const auto& ia = corpus.interactions.at(static_cast<size_t>(idx[static_cast<size_t>(i)]));
    if (ia.user_id < 0 || ia.user_id >= cfg.n_users)
      fail(ErrClass::data, "ranker: user id " + std::to_string(ia.user_id) + " out of range");
    if (ia.item_id < 0 || ia.item_id >= cfg.n_items)
      fail(ErrClass::data, "ranker: item id " + std::to_string(ia.item_id) + " out of range");
    b.user_rows.push_back(ia.user_id);
    b.item_rows.push_back(ia.item_id);
    b.ctx.row(i) = ia.context.scalars().template cast<S>().transpose();
    b.labels(i, 0) = static_cast<S>(ia.label);
    std::vector<int64_t> h = ia.context.history;
    if (static_cast<int64_t>(h.size()) > cfg.max_history)
      h.erase(h.begin(), h.end() - static_cast<ptrdiff_t>(cfg.max_history));
    for (int64_t r : h)
      if (r < 0 || r >= cfg.n_items)
        fail(ErrClass::data, "ranker: history item " + std::to_string(r) + " out of range");
    b.history.push_back(std::move(h));
  }
  return b;
}

// Mean binary cross entropy over predicted click probabilities.
template <class S>
S ctr_loss(const Mat<S>& p, const Mat<S>& y) {
  return nn::cross_entropy_binary(p, y);
}

template <class S>
class Ranker {
 public:
  explicit Ranker(const RankerConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng root(cfg_.init_seed);
    users_ = nn::EmbTable<S>(cfg_.n_users, cfg_.d);
    items_ = nn::EmbTable<S>(cfg_.n_items, cfg_.d);
    {
      Rng r = root.fork("user_table");
      nn::fill_normal(users_.w, r, 0.1);
    }
    {
      Rng r = root.fork("item_table");
      nn::fill_normal(items_.w, r, 0.1);
    }
    auto init = [&](const std::string& name, int64_t rows, int64_t cols, double stddev) {
      Mat<S>& w = params_.add(name, rows, cols);
      if (stddev > 0.0) {
        Rng r = root.fork(name);
        nn::fill_normal(w, r, stddev);
      }
    };
    const double s_attn = std::sqrt(2.0 / static_cast<double>(2 * cfg_.d));
    init("attn.wq", 2 * cfg_.d, cfg_.d, s_attn);
    init("attn.bq", 1, cfg_.d, 0.0);
    init("attn.wk", 2 * cfg_.d, cfg_.d, s_attn);
    init("attn.bk", 1, cfg_.d, 0.0);
    init("attn.wv", 2 * cfg_.d, cfg_.d, s_attn);
    init("attn.bv", 1, cfg_.d, 0.0);
    init("ctx.w", data::kContextDim, cfg_.d, 0.1);
    // Zero so every proxy-bearing variant starts exactly at base behaviour.
    init("content.wz", cfg_.d_z, cfg_.d, 0.0);
    init("proxy.wpc", cfg_.d, cfg_.d, 0.0);
    init("mlp.w1", cfg_.mlp_in(), cfg_.h1, std::sqrt(2.0 / static_cast<double>(cfg_.mlp_in())));
    init("mlp.b1", 1, cfg_.h1, 0.0);
    init("mlp.w2", cfg_.h1, cfg_.h2, std::sqrt(2.0 / static_cast<double>(cfg_.h1)));
    init("mlp.b2", 1, cfg_.h2, 0.0);
    init("mlp.w3", cfg_.h2, 1, std::sqrt(2.0 / static_cast<double>(cfg_.h2)));
    init("mlp.b3", 1, 1, 0.0);
  }

  const RankerConfig& config() const { return cfg_; }
  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }
  nn::EmbTable<S>& user_table() { return users_; }
  nn::EmbTable<S>& item_table() { return items_; }
  const nn::EmbTable<S>& user_table() const { return users_; }
  const nn::EmbTable<S>& item_table() const { return items_; }

  int64_t param_count() const {
    return params_.param_count() + users_.param_count() + items_.param_count();
  }

  // Validates that the side inputs carry what the variant consumes.
  void check_inputs(const ItemSideInputs<S>& side, const align2::Adaptor<S>* adaptor) const {
    const std::string who = variant_name(cfg_.variant);
    auto want = [&](const Mat<S>& m, int64_t cols, const char* what) {
      if (m.rows() != cfg_.n_items || m.cols() != cols)
        fail(ErrClass::config, who + ": expected " + what + " of shape " +
                                   std::to_string(cfg_.n_items) + "x" + std::to_string(cols) +
                                   ", got " + std::to_string(m.rows()) + "x" +
                                   std::to_string(m.cols()));
    };
    if (cfg_.variant == Variant::v1_content) want(side.z_final, cfg_.d_z, "content features");
    if (cfg_.variant == Variant::v2_mlp_map) want(side.m_static, cfg_.d, "mapped content features");
    if (uses_coarse(cfg_.variant)) want(side.p_coarse, cfg_.d, "coarse proxies");
    if (uses_fine(cfg_.variant)) {
      if (!adaptor) fail(ErrClass::config, who + ": fine-proxy adaptor is required");
      const auto& ac = adaptor->config();
      want(side.z_cat, 3 * ac.d_pooled, "pooled layer features");
      if (ac.d_coarse != cfg_.d || ac.d_fine != cfg_.d)
        fail(ErrClass::config, who + ": adaptor proxy widths must match the field width");
    }
  }

  struct Cache {
    Mat<S> e_u, e_i;          // n x d
    Mat<S> q_in, q;           // n x 2d, n x d
    std::vector<int64_t> flat_rows;                  // flattened history item rows
    std::vector<std::pair<int64_t, int64_t>> span;   // per impression [begin, end)
    Mat<S> k_in, k, v;        // f x 2d, f x d, f x d
    Mat<S> alpha;             // f x 1, softmax weight of each history row
    Mat<S> t_att, ctx_f, x_field, fine_field, concat_fine;  // n x d
    Mat<S> dots;              // n x 15
    Mat<S> x, pre1, h1, pre2, h2, p;
    std::vector<int64_t> uniq_items;  // rows needing a fine proxy, first-use order
    std::unordered_map<int64_t, int64_t> uniq_index;
    typename align2::Adaptor<S>::Cache ad_cache;
    Mat<S> p_fine;            // u x d
  };

  // Click probabilities, one row per impression. `adaptor` is consulted only
  // by the fine-proxy variants.
  Mat<S> forward(const FeatureBatch<S>& batch, const ItemSideInputs<S>& side,
                 const align2::Adaptor<S>* adaptor, Cache* cache) const {
    check_inputs(side, adaptor);
    const int64_t n = batch.size();
    if (n < 1) fail(ErrClass::data, "ranker: empty batch");
    const int64_t d = cfg_.d;
    Cache local;
    Cache& c = cache ? *cache : local;

    c.e_u.resize(n, d);
    c.e_i.resize(n, d);
    for (int64_t i = 0; i < n; ++i) {
      c.e_u.row(i) = users_.w.row(batch.user_rows[static_cast<size_t>(i)]);
      c.e_i.row(i) = items_.w.row(batch.item_rows[static_cast<size_t>(i)]);
    }

    // Fine proxies for every distinct item this batch touches.
    const bool fine = uses_fine(cfg_.variant);
    const bool reuse = cfg_.variant == Variant::v5_structure_reuse;
    c.uniq_items.clear();
    c.uniq_index.clear();
    if (fine) {
      auto note = [&](int64_t row) {
        if (c.uniq_index.emplace(row, static_cast<int64_t>(c.uniq_items.size())).second)
          c.uniq_items.push_back(row);
      };
      for (int64_t r : batch.item_rows) note(r);
      if (reuse)
        for (const auto& h : batch.history)
          for (int64_t r : h) note(r);
      const int64_t u = static_cast<int64_t>(c.uniq_items.size());
      Mat<S> z(u, side.z_cat.cols()), pc(u, d);
      for (int64_t j = 0; j < u; ++j) {
        z.row(j) = side.z_cat.row(c.uniq_items[static_cast<size_t>(j)]);
        pc.row(j) = side.p_coarse.row(c.uniq_items[static_cast<size_t>(j)]);
      }
      c.p_fine = adaptor->forward(z, pc, &c.ad_cache);
    }
    auto fine_row = [&](int64_t item_row) { return c.p_fine.row(c.uniq_index.at(item_row)); };

    // Attention over history: query [e_i, side], keys/values [e_j, side_j].
    c.flat_rows.clear();
    c.span.clear();
    c.span.reserve(static_cast<size_t>(n));
    for (const auto& h : batch.history) {
      const int64_t b0 = static_cast<int64_t>(c.flat_rows.size());
      c.flat_rows.insert(c.flat_rows.end(), h.begin(), h.end());
      c.span.push_back({b0, static_cast<int64_t>(c.flat_rows.size())});
    }
    const int64_t f = static_cast<int64_t>(c.flat_rows.size());
    c.q_in.setZero(n, 2 * d);
    c.q_in.leftCols(d) = c.e_i;
    if (reuse)
      for (int64_t i = 0; i < n; ++i)
        c.q_in.row(i).tail(d) = fine_row(batch.item_rows[static_cast<size_t>(i)]);
    c.q = c.q_in * params_.w("attn.wq");
    c.q.rowwise() += params_.w("attn.bq").row(0);

    c.k_in.setZero(f, 2 * d);
    for (int64_t j = 0; j < f; ++j) {
      c.k_in.row(j).head(d) = items_.w.row(c.flat_rows[static_cast<size_t>(j)]);
      if (reuse) c.k_in.row(j).tail(d) = fine_row(c.flat_rows[static_cast<size_t>(j)]);
    }
    c.k = c.k_in * params_.w("attn.wk");
    c.k.rowwise() += params_.w("attn.bk").row(0);
    c.v = c.k_in * params_.w("attn.wv");
    c.v.rowwise() += params_.w("attn.bv").row(0);

    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d));
    c.alpha.resize(f, 1);
    c.t_att.setZero(n, d);
    for (int64_t i = 0; i < n; ++i) {
      const auto [b0, e0] = c.span[static_cast<size_t>(i)];
      const int64_t m = e0 - b0;
      if (m == 0) continue;
      Mat<S> scores = c.k.middleRows(b0, m) * c.q.row(i).transpose() * inv_sqrt;  // m x 1
      const S mx = scores.maxCoeff();
      Mat<S> a = (scores.array() - mx).exp().matrix();
      a /= a.sum();
      c.alpha.middleRows(b0, m) = a;
      c.t_att.row(i) = a.transpose() * c.v.middleRows(b0, m);
    }

    c.ctx_f = batch.ctx * params_.w("ctx.w");

    c.x_field.setZero(n, d);
    switch (cfg_.variant) {
      case Variant::base:
        break;
      case Variant::v1_content: {
        Mat<S> z(n, cfg_.d_z);
        for (int64_t i = 0; i < n; ++i)
          z.row(i) = side.z_final.row(batch.item_rows[static_cast<size_t>(i)]);
        c.x_field = z * params_.w("content.wz");
        break;
      }
      case Variant::v2_mlp_map:
        for (int64_t i = 0; i < n; ++i)
          c.x_field.row(i) = side.m_static.row(batch.item_rows[static_cast<size_t>(i)]);
        break;
      default: {
        Mat<S> pc(n, d);
        for (int64_t i = 0; i < n; ++i)
          pc.row(i) = side.p_coarse.row(batch.item_rows[static_cast<size_t>(i)]);
        c.x_field = pc * params_.w("proxy.wpc");
        break;
      }
    }

    c.fine_field.setZero(n, d);
    c.concat_fine.setZero(n, d);
    if (cfg_.variant == Variant::v4_concat_fine)
      for (int64_t i = 0; i < n; ++i)
        c.concat_fine.row(i) = fine_row(batch.item_rows[static_cast<size_t>(i)]);
    if (reuse)
      for (int64_t i = 0; i < n; ++i)
        c.fine_field.row(i) = fine_row(batch.item_rows[static_cast<size_t>(i)]);

    const Mat<S>* fields[6] = {&c.e_u, &c.e_i, &c.t_att, &c.ctx_f, &c.x_field, &c.fine_field};
    c.dots.resize(n, cfg_.n_dots());
    int64_t col = 0;
    for (int a = 0; a < 6; ++a)
      for (int b = a + 1; b < 6; ++b, ++col)
        c.dots.col(col) = fields[a]->cwiseProduct(*fields[b]).rowwise().sum();

    c.x = nn::concat_cols<S>({&c.e_u, &c.e_i, &c.t_att, &c.ctx_f, &c.x_field, &c.fine_field,
                              &c.dots, &batch.ctx, &c.concat_fine});
    c.pre1 = c.x * params_.w("mlp.w1");
    c.pre1.rowwise() += params_.w("mlp.b1").row(0);
    c.h1 = nn::relu(c.pre1);
    c.pre2 = c.h1 * params_.w("mlp.w2");
    c.pre2.rowwise() += params_.w("mlp.b2").row(0);
    c.h2 = nn::relu(c.pre2);
    Mat<S> logit = c.h2 * params_.w("mlp.w3");
    logit.rowwise() += params_.w("mlp.b3").row(0);
    c.p = nn::sigmoid(logit);
    return c.p;
  }

  // Accumulates gradients for the variant's trainable weights given
  // d(loss)/d(logit). Embedding-table rows go to the tables' pending state;
  // fine-proxy gradients flow into the adaptor.
  void backward(const FeatureBatch<S>& batch, const ItemSideInputs<S>& side,
                align2::Adaptor<S>* adaptor, Cache& c, const Mat<S>& dlogit) {
    const int64_t n = batch.size();
    const int64_t d = cfg_.d;
    const bool fine = uses_fine(cfg_.variant);
    const bool reuse = cfg_.variant == Variant::v5_structure_reuse;
    nn::check_same_shape("ranker backward", dlogit, c.p);

    params_.g("mlp.w3") += c.h2.transpose() * dlogit;
    params_.g("mlp.b3") += dlogit.colwise().sum();
    Mat<S> dh2 = dlogit * params_.w("mlp.w3").transpose();
    dh2 = nn::relu_backward(c.pre2, dh2);
    params_.g("mlp.w2") += c.h1.transpose() * dh2;
    params_.g("mlp.b2") += dh2.colwise().sum();
    Mat<S> dh1 = dh2 * params_.w("mlp.w2").transpose();
    dh1 = nn::relu_backward(c.pre1, dh1);
    params_.g("mlp.w1") += c.x.transpose() * dh1;
    params_.g("mlp.b1") += dh1.colwise().sum();
    const Mat<S> dx = dh1 * params_.w("mlp.w1").transpose();

    Mat<S> df[6];
    for (int a = 0; a < 6; ++a) df[a] = dx.middleCols(a * d, d);
    const Mat<S> ddots = dx.middleCols(6 * d, cfg_.n_dots());
    const Mat<S> dconcat = dx.middleCols(6 * d + cfg_.n_dots() + data::kContextDim, d);

    const Mat<S>* fields[6] = {&c.e_u, &c.e_i, &c.t_att, &c.ctx_f, &c.x_field, &c.fine_field};
    int64_t col = 0;
    for (int a = 0; a < 6; ++a)
      for (int b = a + 1; b < 6; ++b, ++col) {
        df[a] += ddots.col(col).asDiagonal() * (*fields[b]);
        df[b] += ddots.col(col).asDiagonal() * (*fields[a]);
      }

    Mat<S> dpf;  // u x d, gradient into the unique fine proxies
    if (fine) dpf.setZero(c.p_fine.rows(), d);
    auto add_fine = [&](int64_t item_row, const auto& g) {
      dpf.row(c.uniq_index.at(item_row)) += g;
    };

    // Field 4 (content slot) and the concat block.
    switch (cfg_.variant) {
      case Variant::base:
      case Variant::v2_mlp_map:
        break;  // zero slot or frozen input: nothing trains
      case Variant::v1_content: {
        Mat<S> z(n, cfg_.d_z);
        for (int64_t i = 0; i < n; ++i)
          z.row(i) = side.z_final.row(batch.item_rows[static_cast<size_t>(i)]);
        params_.g("content.wz") += z.transpose() * df[4];
        break;
      }
      default: {
        Mat<S> pc(n, d);
        for (int64_t i = 0; i < n; ++i)
          pc.row(i) = side.p_coarse.row(batch.item_rows[static_cast<size_t>(i)]);
        params_.g("proxy.wpc") += pc.transpose() * df[4];
        break;
      }
    }
    if (cfg_.variant == Variant::v4_concat_fine)
      for (int64_t i = 0; i < n; ++i)
        add_fine(batch.item_rows[static_cast<size_t>(i)], dconcat.row(i));
    if (reuse)
      for (int64_t i = 0; i < n; ++i)
        add_fine(batch.item_rows[static_cast<size_t>(i)], df[5].row(i));

    params_.g("ctx.w") += batch.ctx.transpose() * df[3];

    // Attention backward through the per-impression softmax.
    const int64_t f = static_cast<int64_t>(c.flat_rows.size());
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d));
    Mat<S> dq = Mat<S>::Zero(n, d), dk = Mat<S>::Zero(f, d), dv = Mat<S>::Zero(f, d);
    for (int64_t i = 0; i < n; ++i) {
      const auto [b0, e0] = c.span[static_cast<size_t>(i)];
      const int64_t m = e0 - b0;
      if (m == 0) continue;
      const auto a = c.alpha.middleRows(b0, m);
      Mat<S> da = c.v.middleRows(b0, m) * df[2].row(i).transpose();  // m x 1
      dv.middleRows(b0, m) += a * df[2].row(i);
      const S inner = (a.cwiseProduct(da)).sum();
      const Mat<S> ds = a.cwiseProduct((da.array() - inner).matrix());
      dq.row(i) += (ds.transpose() * c.k.middleRows(b0, m)) * inv_sqrt;
      dk.middleRows(b0, m) += ds * c.q.row(i) * inv_sqrt;
    }
    params_.g("attn.wq") += c.q_in.transpose() * dq;
    params_.g("attn.bq") += dq.colwise().sum();
    params_.g("attn.wk") += c.k_in.transpose() * dk;
    params_.g("attn.bk") += dk.colwise().sum();
    params_.g("attn.wv") += c.k_in.transpose() * dv;
    params_.g("attn.bv") += dv.colwise().sum();
    const Mat<S> dq_in = dq * params_.w("attn.wq").transpose();
    Mat<S> dkv_in = dk * params_.w("attn.wk").transpose();
    dkv_in += dv * params_.w("attn.wv").transpose();

    df[1] += dq_in.leftCols(d);
    if (reuse) {
      for (int64_t i = 0; i < n; ++i)
        add_fine(batch.item_rows[static_cast<size_t>(i)], dq_in.row(i).tail(d));
      for (int64_t j = 0; j < f; ++j)
        add_fine(c.flat_rows[static_cast<size_t>(j)], dkv_in.row(j).tail(d));
    }
    for (int64_t j = 0; j < f; ++j)
      items_.accumulate(c.flat_rows[static_cast<size_t>(j)], dkv_in.row(j).head(d));

    for (int64_t i = 0; i < n; ++i) {
      users_.accumulate(batch.user_rows[static_cast<size_t>(i)], df[0].row(i));
      items_.accumulate(batch.item_rows[static_cast<size_t>(i)], df[1].row(i));
    }

    if (fine) adaptor->backward(c.ad_cache, dpf);
  }

  void save(const std::string& path) const {
    nn::ParamSet<S> snap = snapshot();
    nn::save_checkpoint(snap, cfg_.hash(), path);
  }
  void load(const std::string& path) {
    nn::ParamSet<S> snap = snapshot();
    nn::load_checkpoint(snap, cfg_.hash(), path);
    users_.w = snap.w("user_table");
    items_.w = snap.w("item_table");
    for (auto& e : params_.entries()) e.w = snap.w(e.name);
  }
  uint64_t param_hash() const { return snapshot().value_hash(); }

 private:
  nn::ParamSet<S> snapshot() const {
    nn::ParamSet<S> snap;
    snap.add("user_table", users_.w.rows(), users_.w.cols()) = users_.w;
    snap.add("item_table", items_.w.rows(), items_.w.cols()) = items_.w;
    for (const auto& e : params_.entries()) snap.add(e.name, e.w.rows(), e.w.cols()) = e.w;
    return snap;
  }

  RankerConfig cfg_;
  nn::ParamSet<S> params_;
  nn::EmbTable<S> users_, items_;
};

using RankerF = Ranker<float>;
using RankerD = Ranker<double>;

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  int64_t epochs = 4;
  int64_t batch_size = 256;
  uint64_t seed = 11;

  void validate() const {
    if (lr <= 0.0) fail(ErrClass::config, "ranker train: lr must be > 0");
    if (epochs < 1) fail(ErrClass::config, "ranker train: epochs must be >= 1");
    if (batch_size < 1) fail(ErrClass::config, "ranker train: batch_size must be >= 1");
  }
  std::string canonical_json() const;
};

struct TrainResult {
  std::vector<double> epoch_losses;
};

// Minibatch AdamW over the train split. Fine-proxy variants update the
// adaptor jointly; the embedding tables only ever touch rows that appear in
// a batch, so items absent from the split keep their initial bits.
template <class S>
TrainResult train_ranker(Ranker<S>& ranker, std::type_identity_t<align2::Adaptor<S>*> adaptor,
                         const data::Corpus& corpus, const std::vector<int64_t>& train_idx,
                         const ItemSideInputs<S>& side, const TrainConfig& tcfg) {
  tcfg.validate();
  ranker.check_inputs(side, adaptor);
  if (train_idx.empty()) fail(ErrClass::empty_split, "ranker train: no training interactions");
  const bool fine = uses_fine(ranker.config().variant);
  nn::AdamWConfig opt;
  opt.lr = tcfg.lr;
  opt.weight_decay = tcfg.weight_decay;

  Rng root(tcfg.seed);
  std::vector<int64_t> order = train_idx;
  TrainResult out;
  for (int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng rng = root.fork("epoch" + std::to_string(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    double loss_sum = 0.0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(tcfg.batch_size)) {
      const size_t nb = std::min(static_cast<size_t>(tcfg.batch_size), order.size() - at);
      const std::vector<int64_t> idx(order.begin() + static_cast<ptrdiff_t>(at),
                                     order.begin() + static_cast<ptrdiff_t>(at + nb));
      const FeatureBatch<S> batch = make_batch<S>(corpus, idx, ranker.config());
      typename Ranker<S>::Cache cache;
      const Mat<S> p = ranker.forward(batch, side, adaptor, &cache);
      loss_sum += static_cast<double>(ctr_loss(p, batch.labels)) * static_cast<double>(nb);
      const Mat<S> dlogit = nn::bce_sigmoid_backward_logits(p, batch.labels);
      ranker.params().zero_grad();
      if (fine) adaptor->params().zero_grad();
      ranker.backward(batch, side, adaptor, cache, dlogit);
      ranker.params().step(opt);
      ranker.user_table().step(opt);
      ranker.item_table().step(opt);
      if (fine) adaptor->params().step(opt);
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return out;
}

// Click probabilities for a list of interactions, batched, no training state.
template <class S>
std::vector<double> score_interactions(const Ranker<S>& ranker,
                                       std::type_identity_t<const align2::Adaptor<S>*> adaptor,
                                       const data::Corpus& corpus,
                                       const std::vector<int64_t>& idx,
                                       const ItemSideInputs<S>& side,
                                       int64_t batch_size = 512) {
  if (batch_size < 1) fail(ErrClass::config, "score: batch_size must be >= 1");
  std::vector<double> out;
  out.reserve(idx.size());
  for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(batch_size)) {
    const size_t nb = std::min(static_cast<size_t>(batch_size), idx.size() - at);
    const std::vector<int64_t> part(idx.begin() + static_cast<ptrdiff_t>(at),
                                    idx.begin() + static_cast<ptrdiff_t>(at + nb));
    const FeatureBatch<S> batch = make_batch<S>(corpus, part, ranker.config());
    const Mat<S> p = ranker.forward(batch, side, adaptor, nullptr);
    for (Eigen::Index i = 0; i < p.rows(); ++i) out.push_back(static_cast<double>(p(i, 0)));
  }
  return out;
}

// Gather per-item vectors into a dense row matrix; absent ids are an error
// naming both the item and the consumer.
MatF gather_item_rows(const std::map<int64_t, VecF>& rows, int64_t n_items, int64_t d,
                      const std::string& consumer);

struct ContentMapConfig {
  int64_t d_hidden = 64;
  double lr = 1e-2;
  int64_t epochs = 200;
  uint64_t seed = 17;
};

// Pretrains the frozen content-to-ID regression used by the v2 variant:
// a small MLP from the final-layer content feature to the preprocessed ID
// target, fit on warm items, then applied to every item.
MatF pretrain_content_map(const MatF& z_final, const std::map<int64_t, nn::VecD>& targets,
                          int64_t d_out, const ContentMapConfig& cfg);

}  // namespace idproxy::rank
