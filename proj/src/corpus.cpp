#include "idproxy/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

#include "idproxy/kernels.hpp"

namespace idproxy::data {

using json = nlohmann::ordered_json;

namespace {

// Generation constants. Chosen so that (a) a logistic fit on the planted
// latents reaches eval AUC >= 0.8, (b) clustered-mode ID targets separate
// into three k-means clusters while irregular mode does not, and (c) content
// predicts the latent well enough for cold-start transfer but not trivially.
constexpr int kMetaGroups = 3;          // super-clusters in clustered mode
constexpr double kMetaStd = 1.2;        // per-coordinate std of meta centers
constexpr double kTopicStd = 0.30;      // topic center spread around its meta center
constexpr double kItemStd = 0.35;       // item latent spread around its topic center
constexpr double kIrregularStd = 1.0;   // per-coordinate std in irregular mode
constexpr double kItemScaleLogStd = 0.3;  // lognormal magnitude spread of item latents
constexpr double kUserStd = 0.5;        // per-coordinate std of user latents
constexpr double kCtxWeightStd = 0.15;  // click-model weight scale for context one-hots
constexpr double kTokenMixTopic = 0.8;  // tokens: topic distribution vs uniform noise
constexpr double kTokenLogitStd = 1.2;  // spread of per-topic token log-weights
constexpr double kPatchNoiseStd = 0.15; // additive noise on projected image patches
constexpr double kTrainFraction = 0.8;  // leading share of interactions = train window
constexpr double kEvalColdShare = 0.5;  // eval interactions drawn on cold items
constexpr double kPopLogStd = 0.8;      // lognormal popularity skew of warm items
constexpr double kTableNoiseStd = 0.18; // per-coordinate noise on warm ID targets
constexpr double kTablePopGain = 0.35;  // magnitude growth with log update count
constexpr double kColdRowStd = 0.1;     // junk scale of untrained cold ID rows

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

json vec_to_json(const VecD& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(real_to_string(v(i)));
  return arr;
}

VecD vec_from_json(const json& arr) {
  VecD v(arr.size());
  for (size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = string_to_real(arr[i].get<std::string>());
  return v;
}

}  // namespace

void GenConfig::validate() const {
  auto positive = [](int64_t v, const char* field) {
    if (v < 1) fail(ErrClass::config, std::string("gen config: ") + field + " must be >= 1");
  };
  positive(n_users, "n_users");
  positive(n_items, "n_items");
  positive(n_topics, "n_topics");
  positive(d_latent, "d_latent");
  positive(vocab_size, "vocab_size");
  positive(tokens_per_item, "tokens_per_item");
  positive(n_interactions, "n_interactions");
  positive(history_len, "history_len");
  if (!(cold_fraction > 0.0 && cold_fraction < 1.0))
    fail(ErrClass::config, "gen config: cold_fraction must lie in (0,1)");
  if (noise_sigma < 0.0) fail(ErrClass::config, "gen config: noise_sigma must be >= 0");
  const int64_t n_cold = llround(cold_fraction * static_cast<double>(n_items));
  if (n_cold < 1) fail(ErrClass::config, "gen config: cold_fraction yields zero cold items");
  if (n_items - n_cold < 1)
    fail(ErrClass::config, "gen config: cold_fraction leaves zero warm items");
  const auto n_train =
      static_cast<int64_t>(kTrainFraction * static_cast<double>(n_interactions));
  if (n_train < n_items - n_cold)
    fail(ErrClass::config,
         "gen config: n_interactions too small to give every warm item a train event");
}

std::string GenConfig::canonical_json() const {
  json j;
  j["n_users"] = n_users;
  j["n_items"] = n_items;
  j["n_topics"] = n_topics;
  j["d_latent"] = d_latent;
  j["vocab_size"] = vocab_size;
  j["tokens_per_item"] = tokens_per_item;
  j["n_interactions"] = n_interactions;
  j["cold_fraction"] = real_to_string(cold_fraction);
  j["history_len"] = history_len;
  j["id_space_mode"] = id_space_mode == IdSpaceMode::clustered ? "clustered" : "irregular";
  j["noise_sigma"] = real_to_string(noise_sigma);
  j["seed"] = seed;
  return j.dump();
}

uint64_t GenConfig::hash() const { return fnv64(canonical_json()); }

int64_t Corpus::n_cold_items() const {
  return llround(config.cold_fraction * static_cast<double>(config.n_items));
}

Corpus generate_corpus(const GenConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  Rng rng(config.seed);
  Rng rng_users = rng.fork("users");
  Rng rng_items = rng.fork("items");
  Rng rng_tokens = rng.fork("tokens");
  Rng rng_patches = rng.fork("patches");
  Rng rng_inter = rng.fork("interactions");

  const int64_t d = config.d_latent;

  // Users.
  corpus.users.resize(static_cast<size_t>(config.n_users));
  for (int64_t u = 0; u < config.n_users; ++u) {
    auto& user = corpus.users[static_cast<size_t>(u)];
    user.user_id = u;
    user.latent = VecD(d);
    for (Eigen::Index k = 0; k < d; ++k) user.latent(k) = rng_users.normal() * kUserStd;
  }

  // Topic structure. Clustered mode groups topics under three meta centers so
  // the derived ID space shows coarse cluster structure; irregular mode keeps
  // topics for token generation only.
  MatD meta_centers(kMetaGroups, d);
  nn::fill_normal(meta_centers, rng_items, kMetaStd);
  MatD topic_centers(config.n_topics, d);
  for (int64_t t = 0; t < config.n_topics; ++t) {
    const int64_t g = t % kMetaGroups;
    for (Eigen::Index k = 0; k < d; ++k)
      topic_centers(t, k) = meta_centers(g, k) + rng_items.normal() * kTopicStd;
  }

  // Per-topic token distributions (cumulative weights for sampling).
  MatD token_cdf(config.n_topics, config.vocab_size);
  for (int64_t t = 0; t < config.n_topics; ++t) {
    double acc = 0.0;
    for (int64_t v = 0; v < config.vocab_size; ++v) {
      acc += std::exp(kTokenLogitStd * rng_tokens.normal());
      token_cdf(t, v) = acc;
    }
    token_cdf.row(t) /= acc;
  }

  // Shared projection of latents into patch space.
  MatD patch_proj(kNumPatches * kPatchDim, d);
  nn::fill_normal(patch_proj, rng_patches, 1.0 / std::sqrt(static_cast<double>(d)));

  const int64_t n_cold = corpus.n_cold_items();
  const int64_t n_warm = config.n_items - n_cold;

  corpus.items.resize(static_cast<size_t>(config.n_items));
  for (int64_t i = 0; i < config.n_items; ++i) {
    auto& item = corpus.items[static_cast<size_t>(i)];
    item.item_id = i;
    item.is_cold = i >= n_warm;  // last items by creation time are cold
    item.latent = VecD(d);
    const double scale = std::exp(kItemScaleLogStd * rng_items.normal());
    if (config.id_space_mode == IdSpaceMode::clustered) {
      item.topic_id = rng_items.uniform_int(config.n_topics);
      for (Eigen::Index k = 0; k < d; ++k)
        item.latent(k) =
            scale * (topic_centers(item.topic_id, k) + rng_items.normal() * kItemStd);
    } else {
      item.topic_id = rng_items.uniform_int(config.n_topics);
      for (Eigen::Index k = 0; k < d; ++k)
        item.latent(k) = scale * rng_items.normal() * kIrregularStd;
    }

    item.content_tokens.resize(static_cast<size_t>(config.tokens_per_item));
    for (auto& tok : item.content_tokens) {
      if (rng_tokens.uniform() < kTokenMixTopic) {
        const double u = rng_tokens.uniform();
        const double* row = token_cdf.row(item.topic_id).data();
        tok = static_cast<int32_t>(
            std::lower_bound(row, row + config.vocab_size, u) - row);
        if (tok >= config.vocab_size) tok = static_cast<int32_t>(config.vocab_size - 1);
      } else {
        tok = static_cast<int32_t>(rng_tokens.uniform_int(config.vocab_size));
      }
    }

    VecD flat = patch_proj * item.latent;
    item.image_patches = MatD(kNumPatches, kPatchDim);
    for (int p = 0; p < kNumPatches; ++p)
      for (int q = 0; q < kPatchDim; ++q)
        item.image_patches(p, q) =
            flat(p * kPatchDim + q) + rng_patches.normal() * kPatchNoiseStd;
  }

  // Click-model weights for the context one-hots.
  VecD ctx_weights(kContextDim);
  for (int k = 0; k < kContextDim; ++k) ctx_weights(k) = rng_inter.normal() * kCtxWeightStd;

  // Warm-item popularity for the train window.
  std::vector<double> pop_cdf(static_cast<size_t>(n_warm));
  {
    double acc = 0.0;
    for (int64_t i = 0; i < n_warm; ++i) {
      acc += std::exp(kPopLogStd * rng_inter.normal());
      pop_cdf[static_cast<size_t>(i)] = acc;
    }
    for (auto& v : pop_cdf) v /= acc;
  }
  auto sample_warm_item = [&]() {
    const double u = rng_inter.uniform();
    return static_cast<int64_t>(
        std::lower_bound(pop_cdf.begin(), pop_cdf.end(), u) - pop_cdf.begin());
  };

  const auto n_train =
      static_cast<int64_t>(kTrainFraction * static_cast<double>(config.n_interactions));
  corpus.train_cutoff_ts = n_train;

  std::vector<std::vector<int64_t>> clicked(static_cast<size_t>(config.n_users));
  corpus.interactions.reserve(static_cast<size_t>(config.n_interactions));

  for (int64_t t = 1; t <= config.n_interactions; ++t) {
    Interaction ia;
    ia.timestamp = t;
    ia.user_id = rng_inter.uniform_int(config.n_users);
    if (t <= n_train) {
      // Every warm item gets at least one train event, then popularity sampling.
      ia.item_id = t <= n_warm ? t - 1 : sample_warm_item();
    } else {
      ia.item_id = rng_inter.uniform() < kEvalColdShare
                       ? n_warm + rng_inter.uniform_int(n_cold)
                       : sample_warm_item();
    }
    ia.context.hour_bucket = static_cast<int32_t>(rng_inter.uniform_int(kHourBuckets));
    ia.context.device_bucket = static_cast<int32_t>(rng_inter.uniform_int(kDeviceBuckets));
    const auto& hist = clicked[static_cast<size_t>(ia.user_id)];
    const size_t keep = std::min<size_t>(hist.size(), static_cast<size_t>(config.history_len));
    ia.context.history.assign(hist.end() - static_cast<ptrdiff_t>(keep), hist.end());

    const double z =
        corpus.users[static_cast<size_t>(ia.user_id)].latent.dot(
            corpus.items[static_cast<size_t>(ia.item_id)].latent) +
        ctx_weights.dot(ia.context.scalars()) + config.noise_sigma * rng_inter.normal();
    ia.planted_p = sigmoid(z);
    ia.label = rng_inter.uniform() < ia.planted_p ? 1 : 0;
    if (ia.label == 1) clicked[static_cast<size_t>(ia.user_id)].push_back(ia.item_id);
    corpus.interactions.push_back(std::move(ia));
  }

  return corpus;
}

Splits split_train_eval(const Corpus& corpus) {
  Splits s;
  for (size_t idx = 0; idx < corpus.interactions.size(); ++idx) {
    const auto& ia = corpus.interactions[idx];
    if (ia.timestamp <= corpus.train_cutoff_ts) {
      if (corpus.item(ia.item_id).is_cold)
        fail(ErrClass::data, "cold item " + std::to_string(ia.item_id) + " in train window");
      s.train.push_back(static_cast<int64_t>(idx));
    } else if (corpus.item(ia.item_id).is_cold) {
      s.eval_cold.push_back(static_cast<int64_t>(idx));
    } else {
      s.eval_warm.push_back(static_cast<int64_t>(idx));
    }
  }
  if (s.eval_cold.empty())
    fail(ErrClass::empty_split, "corpus has no cold-item interactions in the eval window");
  return s;
}

std::map<int64_t, IdTableRow> make_id_table(const Corpus& corpus, int64_t d) {
  if (d < 1) fail(ErrClass::config, "id table: dimension must be >= 1");
  Rng rng = Rng(corpus.config.seed).fork("id_table");
  const int64_t dl = corpus.config.d_latent;
  MatD proj(d, dl);
  nn::fill_normal(proj, rng, 1.0 / std::sqrt(static_cast<double>(dl)));

  std::vector<int64_t> counts(corpus.items.size(), 0);
  for (const auto& ia : corpus.interactions)
    if (ia.timestamp <= corpus.train_cutoff_ts) ++counts[static_cast<size_t>(ia.item_id)];

  std::map<int64_t, IdTableRow> table;
  for (const auto& item : corpus.items) {
    IdTableRow row;
    row.update_count = counts[static_cast<size_t>(item.item_id)];
    row.e_raw = VecD(d);
    if (item.is_cold) {
      // Untrained embedding: small noise, no collaborative signal.
      for (Eigen::Index k = 0; k < d; ++k) row.e_raw(k) = rng.normal() * kColdRowStd;
    } else {
      const VecD dir = proj * item.latent;
      const double mag =
          1.0 + kTablePopGain * std::log1p(static_cast<double>(row.update_count));
      for (Eigen::Index k = 0; k < d; ++k)
        row.e_raw(k) = mag * dir(k) + rng.normal() * kTableNoiseStd;
    }
    table.emplace(item.item_id, std::move(row));
  }
  return table;
}

// ---- serialization ----

namespace {

std::string dump_items(const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& item : corpus.items) {
    json j;
    j["item_id"] = item.item_id;
    j["topic_id"] = item.topic_id;
    j["is_cold"] = item.is_cold;
    j["latent"] = vec_to_json(item.latent);
    j["content_tokens"] = item.content_tokens;
    json patches = json::array();
    for (int p = 0; p < kNumPatches; ++p)
      patches.push_back(vec_to_json(item.image_patches.row(p).transpose()));
    j["image_patches"] = patches;
    out << j.dump() << "\n";
  }
  return out.str();
}

std::string dump_users(const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& user : corpus.users) {
    json j;
    j["user_id"] = user.user_id;
    j["latent"] = vec_to_json(user.latent);
    out << j.dump() << "\n";
  }
  return out.str();
}

std::string dump_interactions(const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& ia : corpus.interactions) {
    json j;
    j["user_id"] = ia.user_id;
    j["item_id"] = ia.item_id;
    j["timestamp"] = ia.timestamp;
    j["label"] = ia.label;
    j["hour_bucket"] = ia.context.hour_bucket;
    j["device_bucket"] = ia.context.device_bucket;
    j["history"] = ia.context.history;
    j["planted_p"] = real_to_string(ia.planted_p);
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::map<int64_t, IdTableRow>& id_table,
                 const std::string& dir) {
  ensure_dir(dir);
  const std::string items = dump_items(corpus);
  const std::string users = dump_users(corpus);
  const std::string inter = dump_interactions(corpus);
  std::ostringstream table;
  for (const auto& [id, row] : id_table) {
    json j;
    j["item_id"] = id;
    j["update_count"] = row.update_count;
    j["e_raw"] = vec_to_json(row.e_raw);
    table << j.dump() << "\n";
  }
  Fnv64 h;
  h.update(items);
  h.update(users);
  h.update(inter);
  h.update(table.str());

  json meta;
  meta["config"] = json::parse(corpus.config.canonical_json());
  meta["train_cutoff_ts"] = corpus.train_cutoff_ts;
  meta["content_hash"] = h.hex();

  write_text_file_atomic(dir + "/items.jsonl", items);
  write_text_file_atomic(dir + "/users.jsonl", users);
  write_text_file_atomic(dir + "/interactions.jsonl", inter);
  write_text_file_atomic(dir + "/id_table.jsonl", table.str());
  write_text_file_atomic(dir + "/meta.json", meta.dump(2) + "\n");
}

namespace {

GenConfig config_from_json(const json& j) {
  GenConfig c;
  c.n_users = j.at("n_users").get<int64_t>();
  c.n_items = j.at("n_items").get<int64_t>();
  c.n_topics = j.at("n_topics").get<int64_t>();
  c.d_latent = j.at("d_latent").get<int64_t>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.tokens_per_item = j.at("tokens_per_item").get<int64_t>();
  c.n_interactions = j.at("n_interactions").get<int64_t>();
  c.cold_fraction = string_to_real(j.at("cold_fraction").get<std::string>());
  c.history_len = j.at("history_len").get<int64_t>();
  c.id_space_mode = j.at("id_space_mode").get<std::string>() == "clustered"
                        ? IdSpaceMode::clustered
                        : IdSpaceMode::irregular;
  c.noise_sigma = string_to_real(j.at("noise_sigma").get<std::string>());
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

void for_each_jsonl(const std::string& path, const std::function<void(const json&)>& fn) {
  std::ifstream in(path);
  if (!in) fail(ErrClass::io, "cannot open: " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    fn(json::parse(line));
  }
}

}  // namespace

Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  const json meta = json::parse(read_text_file(dir + "/meta.json"));
  corpus.config = config_from_json(meta.at("config"));
  corpus.train_cutoff_ts = meta.at("train_cutoff_ts").get<int64_t>();

  for_each_jsonl(dir + "/users.jsonl", [&](const json& j) {
    User u;
    u.user_id = j.at("user_id").get<int64_t>();
    u.latent = vec_from_json(j.at("latent"));
    corpus.users.push_back(std::move(u));
  });
  for_each_jsonl(dir + "/items.jsonl", [&](const json& j) {
    Item it;
    it.item_id = j.at("item_id").get<int64_t>();
    it.topic_id = j.at("topic_id").get<int64_t>();
    it.is_cold = j.at("is_cold").get<bool>();
    it.latent = vec_from_json(j.at("latent"));
    it.content_tokens = j.at("content_tokens").get<std::vector<int32_t>>();
    const auto& patches = j.at("image_patches");
    it.image_patches = MatD(kNumPatches, kPatchDim);
    for (int p = 0; p < kNumPatches; ++p) {
      const VecD row = vec_from_json(patches[p]);
      it.image_patches.row(p) = row.transpose();
    }
    corpus.items.push_back(std::move(it));
  });
  for_each_jsonl(dir + "/interactions.jsonl", [&](const json& j) {
    Interaction ia;
    ia.user_id = j.at("user_id").get<int64_t>();
    ia.item_id = j.at("item_id").get<int64_t>();
    ia.timestamp = j.at("timestamp").get<int64_t>();
    ia.label = j.at("label").get<int32_t>();
    ia.context.hour_bucket = j.at("hour_bucket").get<int32_t>();
    ia.context.device_bucket = j.at("device_bucket").get<int32_t>();
    ia.context.history = j.at("history").get<std::vector<int64_t>>();
    ia.planted_p = string_to_real(j.at("planted_p").get<std::string>());
    corpus.interactions.push_back(std::move(ia));
  });
  return corpus;
}

std::map<int64_t, IdTableRow> load_id_table(const std::string& path) {
  std::map<int64_t, IdTableRow> table;
  for_each_jsonl(path, [&](const json& j) {
    IdTableRow row;
    row.update_count = j.at("update_count").get<int64_t>();
    row.e_raw = vec_from_json(j.at("e_raw"));
    table.emplace(j.at("item_id").get<int64_t>(), std::move(row));
  });
  if (table.empty()) fail(ErrClass::data, "id table is empty: " + path);
  return table;
}

}  // namespace idproxy::data
