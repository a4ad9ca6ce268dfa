#pragma once

// Finite-difference checks over composed forward passes (embed -> blocks ->
// pooling -> projection -> loss and, later, the fine-proxy heads). The kernel
// registry covers each op in isolation; these helpers verify the hand-written
// chain rule across whole module boundaries by perturbing sampled parameter
// coordinates of a double-precision model.

#include <functional>
#include <string>
#include <vector>

#include "idproxy/encoder.hpp"
#include "idproxy/gradcheck.hpp"
#include "idproxy/ranker.hpp"
#include "idproxy/stage1.hpp"
#include "idproxy/stage2.hpp"

namespace idproxy::testing {

struct ParamCoord {
  std::string name;
  Eigen::Index r = 0, c = 0;
};

// Sample `n` distinct coordinates uniformly over all scalars of the set.
inline std::vector<ParamCoord> sample_param_coords(const nn::ParamSet<double>& params,
                                                   int n, Rng& rng) {
  int64_t total = params.param_count();
  std::vector<int64_t> picks;
  while (static_cast<int>(picks.size()) < n) {
    const int64_t cand = rng.uniform_int(total);
    if (std::find(picks.begin(), picks.end(), cand) == picks.end()) picks.push_back(cand);
  }
  std::vector<ParamCoord> out;
  for (int64_t flat : picks) {
    for (const auto& e : params.entries()) {
      if (flat < e.w.size()) {
        out.push_back({e.name, flat / e.w.cols(), flat % e.w.cols()});
        break;
      }
      flat -= e.w.size();
    }
  }
  return out;
}

struct CompositeReport {
  double max_rel_err = 0.0;
  int n_checked = 0;
};

// `loss_fn` recomputes the scalar from the current parameter values;
// `backward_fn` must leave d(loss)/d(params) in params.g (after zero_grad).
inline CompositeReport check_param_gradients(nn::ParamSet<double>& params,
                                             const std::function<double()>& loss_fn,
                                             const std::function<void()>& backward_fn,
                                             const std::vector<ParamCoord>& coords,
                                             double eps = 1e-5) {
  backward_fn();
  CompositeReport rep;
  for (const auto& pc : coords) {
    const double analytic = params.entry(pc.name).g(pc.r, pc.c);
    double& wref = params.w(pc.name)(pc.r, pc.c);
    const double saved = wref;
    wref = saved + eps;
    const double up = loss_fn();
    wref = saved - eps;
    const double dn = loss_fn();
    wref = saved;
    const double numeric = (up - dn) / (2.0 * eps);
    rep.max_rel_err = std::max(rep.max_rel_err, nn::rel_err(analytic, numeric));
    ++rep.n_checked;
  }
  return rep;
}

// A deliberately small double-precision encoder: deep enough for the full
// residual/attention chain, cheap enough for finite differences.
inline enc::EncoderConfig tiny_encoder_config() {
  enc::EncoderConfig cfg;
  cfg.n_layers = 3;
  cfg.d_hidden = 8;
  cfg.n_heads = 2;
  cfg.vocab_size = 12;
  cfg.max_tokens = 16;
  cfg.d_id = 6;
  cfg.init_seed = 11;
  return cfg;
}

inline std::vector<enc::PromptTokens> tiny_prompt_batch(const enc::EncoderConfig& cfg,
                                                        int batch, Rng& rng) {
  std::vector<enc::PromptTokens> prompts;
  for (int b = 0; b < batch; ++b) {
    data::Item item;
    item.item_id = 100 + b;
    for (int t = 0; t < 2; ++t)
      item.content_tokens.push_back(
          static_cast<int32_t>(rng.uniform_int(cfg.vocab_size)));
    item.image_patches.resize(data::kNumPatches, data::kPatchDim);
    nn::fill_normal(item.image_patches, rng, 0.7);
    prompts.push_back(enc::build_prompt(item, cfg));
  }
  return prompts;
}

// Unit-norm random target rows for the contrastive loss.
inline nn::MatD unit_rows(Eigen::Index n, Eigen::Index d, Rng& rng) {
  nn::MatD e(n, d);
  nn::fill_normal(e, rng, 1.0);
  return nn::l2_normalize_rows(e);
}

// Scalar loss through the whole stage-1 chain at the encoder's current
// parameters: encode -> pool last layer -> phi -> contrastive loss against
// constant targets.
inline double encoder_chain_loss(const enc::EncoderD& encoder,
                                 const std::vector<enc::PromptTokens>& prompts,
                                 const nn::MatD& targets, double tau_c) {
  const auto hs = encoder.encode(prompts);
  const nn::MatD z = encoder.pool_g(hs.layers.back(), hs.batch, hs.tokens);
  const nn::MatD h = encoder.project_phi(z);
  return align::pal_loss(h, targets, tau_c);
}

inline void encoder_chain_backward(enc::EncoderD& encoder,
                                   const std::vector<enc::PromptTokens>& prompts,
                                   const nn::MatD& targets, double tau_c) {
  typename enc::EncoderD::EncodeCache cache;
  const auto hs = encoder.encode(prompts, &cache);
  nn::MatD attn;
  const nn::MatD z = encoder.pool_g(hs.layers.back(), hs.batch, hs.tokens, &attn);
  typename enc::EncoderD::PhiCache phi_cache;
  const nn::MatD h = encoder.project_phi(z, &phi_cache);
  nn::MatD dh;
  align::pal_loss(h, targets, tau_c, &dh);
  encoder.params().zero_grad();
  nn::MatD dz;
  encoder.project_phi_backward(phi_cache, dh, dz);
  nn::MatD dh_top;
  encoder.pool_g_backward(hs.layers.back(), attn, hs.batch, hs.tokens, dz, dh_top);
  encoder.encode_backward(cache, std::move(dh_top));
}

// Fine adaptor + residual gate, cotangent-reduced to a scalar.
inline CompositeReport run_adaptor_chain_check(int n_coords, uint64_t seed,
                                               double eps = 1e-5) {
  align2::AdaptorConfig cfg;
  cfg.d_pooled = 8;
  cfg.d_hidden = 8;
  cfg.d_coarse = 5;
  cfg.d_fine = 6;
  cfg.init_seed = seed;
  align2::AdaptorD adaptor(cfg);
  Rng rng(seed);
  nn::MatD z(4, 3 * cfg.d_pooled), pc(4, cfg.d_coarse), cot(4, cfg.d_fine);
  nn::fill_normal(z, rng, 1.0);
  nn::fill_normal(pc, rng, 1.0);
  nn::fill_normal(cot, rng, 1.0);

  auto loss = [&]() { return adaptor.forward(z, pc).cwiseProduct(cot).sum(); };
  auto backward = [&]() {
    align2::AdaptorD::Cache cache;
    adaptor.forward(z, pc, &cache);
    adaptor.params().zero_grad();
    adaptor.backward(cache, cot);
  };
  const auto coords = sample_param_coords(adaptor.params(), n_coords, rng);
  return check_param_gradients(adaptor.params(), loss, backward, coords, eps);
}

// Full structure-reuse ranker: fine proxies feed a field, the concat block
// path stays zero, and the attention side slots of both the target and the
// history items. Checks ranker weights and, through the joint path, the
// adaptor weights against the BCE loss.
inline CompositeReport run_v5_ranker_check(int n_coords, uint64_t seed, double eps = 1e-5) {
  rank::RankerConfig rc;
  rc.n_users = 5;
  rc.n_items = 8;
  rc.d = 6;
  rc.d_z = 7;
  rc.h1 = 12;
  rc.h2 = 7;
  rc.max_history = 4;
  rc.variant = rank::Variant::v5_structure_reuse;
  rc.init_seed = seed;
  rank::RankerD ranker(rc);

  align2::AdaptorConfig ac;
  ac.d_pooled = 4;
  ac.d_hidden = 5;
  ac.d_coarse = rc.d;
  ac.d_fine = rc.d;
  ac.init_seed = seed + 1;
  align2::AdaptorD adaptor(ac);

  Rng rng(seed);
  rank::ItemSideInputs<double> side;
  side.p_coarse = unit_rows(rc.n_items, rc.d, rng);
  side.z_cat.resize(rc.n_items, 3 * ac.d_pooled);
  nn::fill_normal(side.z_cat, rng, 1.0);

  rank::FeatureBatch<double> batch;
  batch.user_rows = {0, 1, 2, 3};
  batch.item_rows = {1, 5, 2, 7};
  batch.history = {{0, 2, 3}, {4}, {}, {1, 6, 0, 5}};
  batch.ctx.setZero(4, data::kContextDim);
  for (int i = 0; i < 4; ++i) {
    batch.ctx(i, rng.uniform_int(data::kHourBuckets)) = 1.0;
    batch.ctx(i, data::kHourBuckets + rng.uniform_int(data::kDeviceBuckets)) = 1.0;
  }
  batch.labels.resize(4, 1);
  batch.labels << 1, 0, 1, 0;

  auto loss = [&]() {
    return rank::ctr_loss<double>(ranker.forward(batch, side, &adaptor, nullptr), batch.labels);
  };
  auto backward = [&]() {
    typename rank::RankerD::Cache cache;
    const nn::MatD p = ranker.forward(batch, side, &adaptor, &cache);
    const nn::MatD dlogit = nn::bce_sigmoid_backward_logits(p, batch.labels);
    ranker.params().zero_grad();
    adaptor.params().zero_grad();
    ranker.backward(batch, side, &adaptor, cache, dlogit);
  };

  const int n_ranker = (n_coords + 1) / 2;
  const auto rank_coords = sample_param_coords(ranker.params(), n_ranker, rng);
  const auto ad_coords = sample_param_coords(adaptor.params(), n_coords - n_ranker, rng);
  CompositeReport rep = check_param_gradients(ranker.params(), loss, backward, rank_coords, eps);
  const CompositeReport rep2 =
      check_param_gradients(adaptor.params(), loss, backward, ad_coords, eps);
  rep.max_rel_err = std::max(rep.max_rel_err, rep2.max_rel_err);
  rep.n_checked += rep2.n_checked;
  return rep;
}

// End-to-end check used by both the encoder tests and the acceptance gate.
inline CompositeReport run_encoder_chain_check(int n_coords, uint64_t seed,
                                               double eps = 1e-5) {
  const auto cfg = tiny_encoder_config();
  enc::EncoderD encoder(cfg);
  Rng rng(seed);
  const auto prompts = tiny_prompt_batch(cfg, 3, rng);
  const nn::MatD targets = unit_rows(3, cfg.d_id, rng);
  const double tau_c = 0.2;

  auto loss = [&]() { return encoder_chain_loss(encoder, prompts, targets, tau_c); };
  auto backward = [&]() { encoder_chain_backward(encoder, prompts, targets, tau_c); };
  const auto coords = sample_param_coords(encoder.params(), n_coords, rng);
  return check_param_gradients(encoder.params(), loss, backward, coords, eps);
}

}  // namespace idproxy::testing
