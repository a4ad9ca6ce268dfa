#include "idproxy/stage1.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"

namespace idproxy::align {

std::string Stage1Config::canonical_json() const {
  nlohmann::ordered_json j;
  j["tau"] = tau;
  j["tau_c"] = real_to_string(tau_c);
  j["batch_size"] = batch_size;
  j["lr"] = real_to_string(lr);
  j["epochs"] = epochs;
  j["weight_decay"] = real_to_string(weight_decay);
  j["seed"] = seed;
  return j.dump();
}

IdEmbeddingTable preprocess_id_table(const std::map<int64_t, data::IdTableRow>& raw,
                                     int64_t tau) {
  if (raw.empty()) fail(ErrClass::data, "preprocess_id_table: empty raw table");
  IdEmbeddingTable out;
  out.raw = raw;
  out.tau = tau;
  for (const auto& [id, row] : raw) {
    if (row.update_count < tau) continue;
    const double norm = row.e_raw.norm();
    if (!(norm > nn::kL2NormFloor))
      fail(ErrClass::degenerate,
           "preprocess_id_table: zero-norm raw vector for item " + std::to_string(id));
    out.preprocessed.emplace(id, row.e_raw / norm);
  }
  if (out.preprocessed.empty())
    fail(ErrClass::empty_split,
         "preprocess_id_table: frequency threshold " + std::to_string(tau) +
             " filtered out every item");
  return out;
}

namespace {

// Batched inference path: prompts -> final-layer pool -> phi.
nn::MatF coarse_forward(const enc::Encoder<float>& encoder,
                        const std::vector<enc::PromptTokens>& prompts) {
  const auto hs = encoder.encode(prompts);
  const nn::MatF z = encoder.pool_g(hs.layers.back(), hs.batch, hs.tokens);
  return encoder.project_phi(z);
}

}  // namespace

std::map<int64_t, nn::VecF> emit_coarse_proxies(const std::vector<data::Item>& items,
                                                const enc::Encoder<float>& encoder) {
  std::map<int64_t, nn::VecF> out;
  constexpr size_t kChunk = 256;
  std::vector<enc::PromptTokens> prompts;
  std::vector<int64_t> ids;
  auto flush = [&]() {
    if (prompts.empty()) return;
    const nn::MatF h = coarse_forward(encoder, prompts);
    for (size_t i = 0; i < ids.size(); ++i)
      out.emplace(ids[i], h.row(static_cast<Eigen::Index>(i)).transpose());
    prompts.clear();
    ids.clear();
  };
  for (const auto& item : items) {
    prompts.push_back(enc::build_prompt(item, encoder.config()));
    ids.push_back(item.item_id);
    if (prompts.size() == kChunk) flush();
  }
  flush();
  return out;
}

std::map<int64_t, nn::VecF> emit_coarse_proxies(const data::Corpus& corpus,
                                                const enc::Encoder<float>& encoder) {
  return emit_coarse_proxies(corpus.items, encoder);
}

Stage1Result train_stage1(const data::Corpus& corpus, const IdEmbeddingTable& table,
                          enc::Encoder<float>& encoder, const Stage1Config& cfg) {
  cfg.validate();
  if (table.preprocessed.empty())
    fail(ErrClass::dependency, "train_stage1: preprocessed id table is empty");

  // Participants: warm items that survived the frequency filter.
  std::vector<int64_t> ids;
  for (const auto& [id, e] : table.preprocessed) {
    if (!corpus.item(id).is_cold) ids.push_back(id);
  }
  if (ids.empty()) fail(ErrClass::empty_split, "train_stage1: no warm items with targets");

  Stage1Result result;
  int64_t batch = cfg.batch_size;
  if (batch > static_cast<int64_t>(ids.size())) {
    batch = static_cast<int64_t>(ids.size());
    result.batch_size_adjusted = true;
  }

  // Prompts and targets are fixed; build once.
  std::map<int64_t, enc::PromptTokens> prompts;
  std::map<int64_t, nn::VecF> targets;
  for (int64_t id : ids) {
    prompts.emplace(id, enc::build_prompt(corpus.item(id), encoder.config()));
    targets.emplace(id, table.preprocessed.at(id).cast<float>());
  }

  nn::AdamWConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  Rng rng = Rng(cfg.seed).fork("stage1");
  const int64_t d = encoder.config().d_id;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates shuffle on the participant order.
    for (size_t i = ids.size() - 1; i > 0; --i)
      std::swap(ids[i], ids[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i) + 1))]);

    double epoch_loss = 0.0;
    int64_t n_batches = 0;
    for (size_t at = 0; at < ids.size(); at += static_cast<size_t>(batch)) {
      const size_t n = std::min(static_cast<size_t>(batch), ids.size() - at);
      if (n < 2) continue;  // a single leftover row has no in-batch negatives

      std::vector<enc::PromptTokens> batch_prompts;
      nn::MatF e(static_cast<Eigen::Index>(n), d);
      for (size_t i = 0; i < n; ++i) {
        const int64_t id = ids[at + i];
        batch_prompts.push_back(prompts.at(id));
        e.row(static_cast<Eigen::Index>(i)) = targets.at(id).transpose();
      }

      typename enc::Encoder<float>::EncodeCache cache;
      const auto hs = encoder.encode(batch_prompts, &cache);
      nn::MatF pool_attn;
      const nn::MatF z = encoder.pool_g(hs.layers.back(), hs.batch, hs.tokens, &pool_attn);
      typename enc::Encoder<float>::PhiCache phi_cache;
      const nn::MatF h = encoder.project_phi(z, &phi_cache);

      nn::MatF dh;
      const float loss = pal_loss(h, e, cfg.tau_c, &dh);
      epoch_loss += loss;
      ++n_batches;

      encoder.params().zero_grad();
      nn::MatF dz;
      encoder.project_phi_backward(phi_cache, dh, dz);
      nn::MatF dh_top;
      encoder.pool_g_backward(hs.layers.back(), pool_attn, hs.batch, hs.tokens, dz, dh_top);
      encoder.encode_backward(cache, std::move(dh_top));
      encoder.params().step(opt);
    }
    result.epoch_losses.push_back(n_batches > 0 ? epoch_loss / n_batches : 0.0);
  }

  result.proxies = emit_coarse_proxies(corpus, encoder);
  return result;
}

double retrieval_eval(const std::map<int64_t, nn::VecF>& proxies,
                      const IdEmbeddingTable& table, int64_t k) {
  const int64_t n = static_cast<int64_t>(table.preprocessed.size());
  if (k < 1 || k > n)
    fail(ErrClass::config, "retrieval_eval: k=" + std::to_string(k) +
                               " outside [1, " + std::to_string(n) + "]");
  std::vector<int64_t> ids;
  ids.reserve(static_cast<size_t>(n));
  for (const auto& [id, e] : table.preprocessed) ids.push_back(id);

  int64_t hits = 0, total = 0;
  std::vector<std::pair<double, int64_t>> scored(static_cast<size_t>(n));
  for (int64_t qid : ids) {
    auto it = proxies.find(qid);
    if (it == proxies.end())
      fail(ErrClass::not_found, "retrieval_eval: no proxy for item " + std::to_string(qid));
    const VecD p = it->second.cast<double>();
    for (size_t j = 0; j < ids.size(); ++j)
      scored[j] = {p.dot(table.preprocessed.at(ids[j])), ids[j]};
    // top-k by score desc, id asc on ties
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    for (int64_t t = 0; t < k; ++t)
      if (scored[static_cast<size_t>(t)].second == qid) {
        ++hits;
        break;
      }
    ++total;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

double mean_alignment_cosine(const std::map<int64_t, nn::VecF>& proxies,
                             const IdEmbeddingTable& table) {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& [id, e] : table.preprocessed) {
    auto it = proxies.find(id);
    if (it == proxies.end())
      fail(ErrClass::not_found, "alignment cosine: no proxy for item " + std::to_string(id));
    sum += it->second.cast<double>().dot(e);
    ++n;
  }
  return sum / static_cast<double>(n);
}

}  // namespace idproxy::align
