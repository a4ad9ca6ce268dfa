#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "composite_checks.hpp"
#include "idproxy/ranker.hpp"
#include "testutil.hpp"

using namespace idproxy;
using namespace idproxy::rank;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("idp_rk_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RankerConfig tiny_ranker_config(const data::Corpus& corpus, Variant v) {
  RankerConfig rc;
  rc.n_users = corpus.config.n_users;
  rc.n_items = corpus.config.n_items;
  rc.d = corpus.config.d_latent;  // proxies below are built from the latents
  rc.d_z = 8;
  rc.h1 = 64;
  rc.h2 = 16;
  rc.max_history = corpus.config.history_len;
  rc.variant = v;
  rc.init_seed = 5;
  return rc;
}

// Oracle coarse proxies: the planted item latents, unit-normalized. Stage 1
// approximates exactly this table, so it isolates the ranker's transfer path.
MatF latent_proxies(const data::Corpus& corpus) {
  MatF p(corpus.config.n_items, corpus.config.d_latent);
  for (const auto& item : corpus.items)
    p.row(item.item_id) = (item.latent / item.latent.norm()).cast<float>().transpose();
  return p;
}

uint64_t cold_row_hash(const Ranker<float>& r, const data::Corpus& corpus) {
  Fnv64 h;
  for (const auto& item : corpus.items) {
    if (!item.is_cold) continue;
    const auto row = r.item_table().w.row(item.item_id);
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      const float f = row(j);
      h.update(&f, sizeof(f));
    }
  }
  return h.value();
}

std::vector<int> labels_of(const data::Corpus& corpus, const std::vector<int64_t>& idx) {
  std::vector<int> out;
  for (int64_t i : idx)
    out.push_back(corpus.interactions[static_cast<size_t>(i)].label);
  return out;
}

}  // namespace

TEST_CASE("variant names round trip and reject junk") {
  const Variant all[] = {Variant::base,      Variant::v1_content,     Variant::v2_mlp_map,
                         Variant::v3_coarse, Variant::v4_concat_fine, Variant::v5_structure_reuse};
  for (Variant v : all) CHECK(variant_from_name(variant_name(v)) == v);
  CHECK(variant_from_name("v3") == Variant::v3_coarse);
  CHECK(variant_from_name("v5") == Variant::v5_structure_reuse);
  CHECK_THROWS_WITH_AS(variant_from_name("v6"), doctest::Contains("variant"), Error);

  RankerConfig rc;
  CHECK_THROWS_AS(rc.validate(), Error);  // zero users/items
  rc.n_users = 4;
  rc.n_items = 4;
  rc.h2 = 0;
  CHECK_THROWS_AS(rc.validate(), Error);
}

TEST_CASE("batch assembly resolves ids, context, labels and truncated history") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  rc.max_history = 2;

  std::vector<int64_t> idx;
  int64_t long_hist = -1;
  for (size_t i = 0; i < corpus.interactions.size(); ++i) {
    if (corpus.interactions[i].context.history.size() >= 4) {
      long_hist = static_cast<int64_t>(i);
      break;
    }
  }
  REQUIRE(long_hist >= 0);
  idx = {0, long_hist};
  const auto b = make_batch<float>(corpus, idx, rc);
  CHECK(b.size() == 2);
  const auto& ia = corpus.interactions[static_cast<size_t>(long_hist)];
  CHECK(b.user_rows[1] == ia.user_id);
  CHECK(b.item_rows[1] == ia.item_id);
  CHECK(b.labels(1, 0) == static_cast<float>(ia.label));
  CHECK(b.ctx.row(1).sum() == 2.0f);  // one hour bucket + one device bucket
  CHECK(b.ctx(1, ia.context.hour_bucket) == 1.0f);
  REQUIRE(b.history[1].size() == 2);  // keeps the newest entries
  CHECK(b.history[1][0] == ia.context.history[ia.context.history.size() - 2]);
  CHECK(b.history[1][1] == ia.context.history.back());

  data::Corpus broken = corpus;
  broken.interactions[0].user_id = rc.n_users + 7;
  CHECK_THROWS_WITH_AS(make_batch<float>(broken, {0}, rc), doctest::Contains("user"), Error);
  broken = corpus;
  broken.interactions[0].context.history.assign({rc.n_items + 3});
  CHECK_THROWS_WITH_AS(make_batch<float>(broken, {0}, rc), doctest::Contains("history"), Error);
}

TEST_CASE("forward emits probabilities and is deterministic") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  const RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  RankerF ranker(rc);
  ItemSideInputs<float> side;

  std::vector<int64_t> idx;
  for (int64_t i = 0; i < 32; ++i) idx.push_back(i);
  const auto batch = make_batch<float>(corpus, idx, rc);
  const MatF p1 = ranker.forward(batch, side, nullptr, nullptr);
  REQUIRE(p1.rows() == 32);
  REQUIRE(p1.cols() == 1);
  for (Eigen::Index i = 0; i < p1.rows(); ++i) {
    CHECK(p1(i, 0) > 0.0f);
    CHECK(p1(i, 0) < 1.0f);
  }
  const MatF p2 = ranker.forward(batch, side, nullptr, nullptr);
  CHECK((p1 - p2).cwiseAbs().maxCoeff() == 0.0f);

  FeatureBatch<float> empty;
  empty.ctx.resize(0, data::kContextDim);
  empty.labels.resize(0, 1);
  CHECK_THROWS_WITH_AS(ranker.forward(empty, side, nullptr, nullptr),
                       doctest::Contains("empty"), Error);
}

TEST_CASE("attention matches a direct single-impression evaluation") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  RankerD ranker(rc);
  ItemSideInputs<double> side;

  FeatureBatch<double> b;
  b.user_rows = {3, 4};
  b.item_rows = {10, 11};
  b.history = {{2, 7, 1}, {}};
  b.ctx.setZero(2, data::kContextDim);
  b.ctx(0, 0) = b.ctx(0, 4) = 1.0;
  b.ctx(1, 1) = b.ctx(1, 5) = 1.0;
  b.labels.resize(2, 1);
  b.labels << 1, 0;

  RankerD::Cache cache;
  ranker.forward(b, side, nullptr, &cache);

  // Empty history contributes an exactly-zero attended vector.
  CHECK(cache.t_att.row(1).cwiseAbs().maxCoeff() == 0.0);

  // Hand evaluation of the attended vector for the first impression.
  const auto& P = ranker.params();
  const int64_t d = rc.d;
  nn::MatD q_in(1, 2 * d);
  q_in.setZero();
  q_in.leftCols(d) = ranker.item_table().w.row(10);
  nn::MatD q = q_in * P.w("attn.wq") + P.w("attn.bq");
  nn::MatD k_in(3, 2 * d), scores(3, 1);
  k_in.setZero();
  for (int j = 0; j < 3; ++j) k_in.row(j).head(d) = ranker.item_table().w.row(b.history[0][j]);
  nn::MatD k = k_in * P.w("attn.wk");
  k.rowwise() += P.w("attn.bk").row(0);
  nn::MatD v = k_in * P.w("attn.wv");
  v.rowwise() += P.w("attn.bv").row(0);
  for (int j = 0; j < 3; ++j) scores(j, 0) = q.row(0).dot(k.row(j)) / std::sqrt(double(d));
  nn::MatD a = (scores.array() - scores.maxCoeff()).exp().matrix();
  a /= a.sum();
  nn::MatD t = a.transpose() * v;
  CHECK((cache.t_att.row(0) - t.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  // Softmax weights of a single-entry history would be exactly one; here the
  // three weights sum to one.
  CHECK(std::fabs(cache.alpha.middleRows(0, 3).sum() - 1.0) < 1e-12);
}

TEST_CASE("mlp input layout carries fields, dots and raw context") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  const RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  RankerD ranker(rc);
  ItemSideInputs<double> side;

  std::vector<int64_t> idx = {0, 1, 2, 3, 4};
  const auto batch = make_batch<double>(corpus, idx, rc);
  RankerD::Cache c;
  ranker.forward(batch, side, nullptr, &c);

  const int64_t d = rc.d;
  CHECK(c.x.cols() == rc.mlp_in());
  CHECK((c.x.middleCols(0, d) - c.e_u).cwiseAbs().maxCoeff() == 0.0);
  CHECK((c.x.middleCols(d, d) - c.e_i).cwiseAbs().maxCoeff() == 0.0);
  CHECK((c.x.middleCols(2 * d, d) - c.t_att).cwiseAbs().maxCoeff() == 0.0);
  CHECK((c.x.middleCols(6 * d + 15, data::kContextDim) - batch.ctx).cwiseAbs().maxCoeff() == 0.0);
  // Unused slots of the base variant are exactly zero.
  CHECK(c.x_field.cwiseAbs().maxCoeff() == 0.0);
  CHECK(c.fine_field.cwiseAbs().maxCoeff() == 0.0);
  CHECK(c.x.rightCols(d).cwiseAbs().maxCoeff() == 0.0);

  // First dot column is <e_u, e_i> rowwise.
  for (int i = 0; i < 5; ++i)
    CHECK(std::fabs(c.dots(i, 0) - c.e_u.row(i).dot(c.e_i.row(i))) < 1e-12);
  // Column of the (ctx_f, x_field) pair vanishes because x_field is zero.
  CHECK(c.dots.col(12).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ctr loss closed form at one half and error on empty batch") {
  nn::MatD p = nn::MatD::Constant(7, 1, 0.5);
  nn::MatD y(7, 1);
  y << 1, 0, 1, 1, 0, 0, 1;
  CHECK(std::fabs(ctr_loss(p, y) - 0.6931471805599453) < 1e-12);

  nn::MatD none(0, 1), ynone(0, 1);
  CHECK_THROWS_AS(ctr_loss(none, ynone), Error);
}

TEST_CASE("composite gradient check through the structure-reuse ranker") {
  const auto rep = testing::run_v5_ranker_check(10, 29);
  CHECK(rep.n_checked == 10);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("embedding table rows receive the finite-difference gradient") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  const RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  RankerD ranker(rc);
  ItemSideInputs<double> side;
  std::vector<int64_t> idx = {0, 1, 2, 3};
  const auto batch = make_batch<double>(corpus, idx, rc);

  RankerD::Cache cache;
  const nn::MatD p = ranker.forward(batch, side, nullptr, &cache);
  const nn::MatD dlogit = nn::bce_sigmoid_backward_logits(p, batch.labels);
  ranker.params().zero_grad();
  ranker.backward(batch, side, nullptr, cache, dlogit);

  const int64_t urow = batch.user_rows[0];
  const auto ug = ranker.user_table().pending_grad(urow);
  const double eps = 1e-6;
  for (int j = 0; j < 3; ++j) {
    double& wref = ranker.user_table().w(urow, j);
    const double saved = wref;
    wref = saved + eps;
    const double up = ctr_loss<double>(ranker.forward(batch, side, nullptr, nullptr), batch.labels);
    wref = saved - eps;
    const double dn = ctr_loss<double>(ranker.forward(batch, side, nullptr, nullptr), batch.labels);
    wref = saved;
    CHECK(nn::rel_err(ug(j), (up - dn) / (2.0 * eps)) <= 1e-4);
  }
  // An item row that appears in no impression or history accumulates nothing.
  int64_t absent = -1;
  for (int64_t r = rc.n_items - 1; r >= 0; --r) {
    bool used = false;
    for (int64_t t : batch.item_rows) used |= (t == r);
    for (const auto& h : batch.history)
      for (int64_t t : h) used |= (t == r);
    if (!used) {
      absent = r;
      break;
    }
  }
  REQUIRE(absent >= 0);
  CHECK(ranker.item_table().pending_grad(absent).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zeroed proxy weights reproduce the base model bit for bit") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(5));
  const auto splits = data::split_train_eval(corpus);
  std::vector<int64_t> idx(splits.eval_cold.begin(),
                           splits.eval_cold.begin() +
                               std::min<size_t>(64, splits.eval_cold.size()));

  const RankerConfig base_cfg = tiny_ranker_config(corpus, Variant::base);
  RankerF base(base_cfg);
  ItemSideInputs<float> none;
  const auto base_scores = score_interactions(base, nullptr, corpus, idx, none);

  ItemSideInputs<float> side;
  side.p_coarse = latent_proxies(corpus);
  align2::AdaptorConfig ac;
  ac.d_pooled = 8;
  ac.d_hidden = 8;
  ac.d_coarse = base_cfg.d;
  ac.d_fine = base_cfg.d;
  side.z_cat = MatF(base_cfg.n_items, 3 * ac.d_pooled);
  {
    Rng rng(99);
    nn::fill_normal(side.z_cat, rng, 1.0);
  }

  for (Variant v :
       {Variant::v3_coarse, Variant::v4_concat_fine, Variant::v5_structure_reuse}) {
    RankerConfig cfg = tiny_ranker_config(corpus, v);
    RankerF rk(cfg);
    align2::AdaptorF adaptor(ac);
    // The proxy path is wpc (zero already at init) plus, for the fine
    // variants, the adaptor output: zero its additive weights too.
    adaptor.params().w("w2").setZero();
    adaptor.params().w("b2").setZero();
    adaptor.params().w("wc").setZero();
    const auto scores =
        score_interactions(rk, uses_fine(v) ? &adaptor : nullptr, corpus, idx, side);
    REQUIRE(scores.size() == base_scores.size());
    for (size_t i = 0; i < scores.size(); ++i) {
      INFO(variant_name(v) << " row " << i);
      CHECK(scores[i] == base_scores[i]);
    }
  }
}

TEST_CASE("training leaves cold item rows untouched and decreases the loss") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(5));
  const auto splits = data::split_train_eval(corpus);
  const RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  RankerF ranker(rc);
  ItemSideInputs<float> side;

  const uint64_t before = cold_row_hash(ranker, corpus);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 3;
  tc.batch_size = 128;
  tc.seed = 2;
  const auto res = train_ranker(ranker, nullptr, corpus, splits.train, side, tc);
  REQUIRE(res.epoch_losses.size() == 3);
  CHECK(res.epoch_losses.back() < res.epoch_losses.front());
  for (double l : res.epoch_losses) CHECK(std::isfinite(l));
  CHECK(cold_row_hash(ranker, corpus) == before);

  CHECK_THROWS_AS(train_ranker(ranker, nullptr, corpus, {}, side, tc), Error);
}

TEST_CASE("training is deterministic given the seeds") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(5));
  const auto splits = data::split_train_eval(corpus);
  const RankerConfig rc = tiny_ranker_config(corpus, Variant::v3_coarse);
  ItemSideInputs<float> side;
  side.p_coarse = latent_proxies(corpus);

  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 2;
  tc.batch_size = 128;
  tc.seed = 4;

  RankerF a(rc), b(rc);
  const auto ra = train_ranker(a, nullptr, corpus, splits.train, side, tc);
  const auto rb = train_ranker(b, nullptr, corpus, splits.train, side, tc);
  CHECK(ra.epoch_losses == rb.epoch_losses);
  CHECK(a.param_hash() == b.param_hash());
}

TEST_CASE("coarse proxies transfer planted signal to cold items") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(5));
  const auto splits = data::split_train_eval(corpus);
  ItemSideInputs<float> side;
  side.p_coarse = latent_proxies(corpus);
  ItemSideInputs<float> none;

  // The proxy slot starts at zero weight, so the transfer path needs enough
  // steps to couple before it separates from the context-only baseline.
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 12;
  tc.batch_size = 128;
  tc.seed = 6;

  RankerF base(tiny_ranker_config(corpus, Variant::base));
  train_ranker(base, nullptr, corpus, splits.train, none, tc);
  RankerF v3(tiny_ranker_config(corpus, Variant::v3_coarse));
  train_ranker(v3, nullptr, corpus, splits.train, side, tc);

  const auto labels = labels_of(corpus, splits.eval_cold);
  const double auc_base = testutil::auc_ranked(
      score_interactions(base, nullptr, corpus, splits.eval_cold, none), labels);
  const double auc_v3 = testutil::auc_ranked(
      score_interactions(v3, nullptr, corpus, splits.eval_cold, side), labels);
  INFO("cold auc base " << auc_base << " v3 " << auc_v3);
  CHECK(auc_v3 > auc_base + 0.05);
}

TEST_CASE("variant input requirements are enforced by name") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  ItemSideInputs<float> none;
  {
    RankerF rk(tiny_ranker_config(corpus, Variant::v3_coarse));
    CHECK_THROWS_WITH_AS(rk.check_inputs(none, nullptr), doctest::Contains("v3_coarse"), Error);
  }
  {
    RankerF rk(tiny_ranker_config(corpus, Variant::v5_structure_reuse));
    ItemSideInputs<float> side;
    side.p_coarse = latent_proxies(corpus);
    side.z_cat = MatF::Zero(corpus.config.n_items, 24);
    CHECK_THROWS_WITH_AS(rk.check_inputs(side, nullptr), doctest::Contains("adaptor"), Error);
  }
  std::map<int64_t, VecF> sparse;
  sparse[0] = VecF::Ones(4);
  try {
    gather_item_rows(sparse, 3, 4, "v3_coarse proxies");
    FAIL("expected not_found");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::not_found);
    CHECK(std::string(e.what()).find("item 1") != std::string::npos);
    CHECK(std::string(e.what()).find("v3_coarse") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip restores every table and weight") {
  const auto corpus = data::generate_corpus(testutil::tiny_gen_config(3));
  const auto splits = data::split_train_eval(corpus);
  const RankerConfig rc = tiny_ranker_config(corpus, Variant::base);
  RankerF ranker(rc);
  ItemSideInputs<float> side;
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 1;
  tc.batch_size = 256;
  train_ranker(ranker, nullptr, corpus, splits.train, side, tc);

  TempDir dir("ckpt");
  const std::string path = (dir.path / "ranker.ckpt").string();
  ranker.save(path);
  const uint64_t want = ranker.param_hash();

  RankerF fresh(rc);
  CHECK(fresh.param_hash() != want);  // training moved the weights
  fresh.load(path);
  CHECK(fresh.param_hash() == want);

  RankerConfig other = rc;
  other.variant = Variant::v1_content;
  RankerF wrong(other);
  CHECK_THROWS_AS(wrong.load(path), Error);
}

TEST_CASE("content map regresses onto reachable targets") {
  Rng rng(31);
  MatF z(60, 10);
  nn::fill_normal(z, rng, 1.0);
  nn::MatD map(10, 6);
  nn::fill_normal(map, rng, 0.6);
  std::map<int64_t, nn::VecD> targets;
  for (int64_t i = 0; i < 40; ++i)  // warm prefix only
    targets[i] = map.transpose() * z.row(i).transpose().cast<double>();

  ContentMapConfig cfg;
  cfg.epochs = 400;
  cfg.lr = 5e-3;
  const MatF m = pretrain_content_map(z, targets, 6, cfg);
  REQUIRE(m.rows() == 60);
  REQUIRE(m.cols() == 6);
  double cos_sum = 0.0;
  for (int64_t i = 40; i < 60; ++i) {  // held-out rows
    const nn::VecD want = map.transpose() * z.row(i).transpose().cast<double>();
    const nn::VecD got = m.row(i).transpose().cast<double>();
    cos_sum += want.dot(got) / (want.norm() * got.norm());
  }
  CHECK(cos_sum / 20.0 > 0.8);

  CHECK_THROWS_AS(pretrain_content_map(z, {}, 6, cfg), Error);
  std::map<int64_t, nn::VecD> bad;
  bad[0] = nn::VecD::Ones(5);
  CHECK_THROWS_WITH_AS(pretrain_content_map(z, bad, 6, cfg), doctest::Contains("width"), Error);
}

TEST_CASE("fine adaptor stays within the parameter budget") {
  RankerConfig rc;
  rc.n_users = 2000;
  rc.n_items = 1000;
  rc.d = 32;
  rc.d_z = 64;
  rc.h1 = 768;
  rc.h2 = 96;
  RankerF ranker(rc);
  CHECK(ranker.param_count() == 368353);

  align2::AdaptorConfig ac;  // defaults match the desk pipeline
  align2::AdaptorF adaptor(ac);
  CHECK(adaptor.param_count() == 17504);
  CHECK(static_cast<double>(adaptor.param_count()) <
        0.05 * static_cast<double>(ranker.param_count()));
}
