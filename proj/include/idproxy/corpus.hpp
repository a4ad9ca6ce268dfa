#pragma once

#include <map>
#include <string>
#include <vector>

#include "idproxy/tensor.hpp"

// Synthetic multimodal recommendation corpus with planted latent structure:
// clicks follow a logistic factor model, item content (tokens + image-patch
// stand-ins) carries the item's latent factor, and an ID-embedding target
// table is derived from the same latents so content-to-ID alignment transfers
// real signal to cold items.

namespace idproxy::data {

using nn::MatD;
using nn::VecD;

enum class IdSpaceMode { clustered, irregular };

struct GenConfig {
  int64_t n_users = 2000;
  int64_t n_items = 1000;
  int64_t n_topics = 10;
  int64_t d_latent = 16;
  int64_t vocab_size = 500;
  int64_t tokens_per_item = 16;
  int64_t n_interactions = 200000;
  double cold_fraction = 0.2;
  int64_t history_len = 20;
  IdSpaceMode id_space_mode = IdSpaceMode::clustered;
  double noise_sigma = 0.25;
  uint64_t seed = 1;

  void validate() const;
  std::string canonical_json() const;
  uint64_t hash() const;
};

// Fixed shape of the synthetic "image": 4 patches of 8 dims each.
inline constexpr int kNumPatches = 4;
inline constexpr int kPatchDim = 8;
// Context scalars: hour-of-day bucket (4) + device bucket (2), one-hot.
inline constexpr int kHourBuckets = 4;
inline constexpr int kDeviceBuckets = 2;
inline constexpr int kContextDim = kHourBuckets + kDeviceBuckets;

struct Item {
  int64_t item_id = 0;
  int64_t topic_id = 0;
  VecD latent;                       // [d_latent]
  std::vector<int32_t> content_tokens;  // [tokens_per_item], values < vocab_size
  MatD image_patches;                // [kNumPatches x kPatchDim]
  bool is_cold = false;
};

struct User {
  int64_t user_id = 0;
  VecD latent;  // [d_latent]
};

struct ContextFeatures {
  std::vector<int64_t> history;  // earlier clicked item ids, newest last
  int32_t hour_bucket = 0;
  int32_t device_bucket = 0;

  VecD scalars() const {
    VecD s = VecD::Zero(kContextDim);
    s(hour_bucket) = 1.0;
    s(kHourBuckets + device_bucket) = 1.0;
    return s;
  }
};

struct Interaction {
  int64_t user_id = 0;
  int64_t item_id = 0;
  int64_t timestamp = 0;
  ContextFeatures context;
  int32_t label = 0;
  double planted_p = 0.0;  // ground-truth click probability (oracle only)
};

struct IdTableRow {
  VecD e_raw;
  int64_t update_count = 0;
};

struct Corpus {
  GenConfig config;
  std::vector<User> users;
  std::vector<Item> items;
  std::vector<Interaction> interactions;
  int64_t train_cutoff_ts = 0;  // interactions with timestamp <= cutoff are train

  int64_t n_cold_items() const;
  const Item& item(int64_t item_id) const { return items.at(static_cast<size_t>(item_id)); }
};

struct Splits {
  std::vector<int64_t> train;      // indices into corpus.interactions
  std::vector<int64_t> eval_warm;
  std::vector<int64_t> eval_cold;
};

Corpus generate_corpus(const GenConfig& config);
Splits split_train_eval(const Corpus& corpus);

// ID-embedding target table for Stage 1. Dimension d comes from the encoder
// config; rows exist for every item, cold rows carry update_count = 0 and a
// junk vector standing in for an untrained embedding. Deterministic given
// the corpus.
std::map<int64_t, IdTableRow> make_id_table(const Corpus& corpus, int64_t d);

// Directory serialization: items.jsonl, users.jsonl, interactions.jsonl,
// meta.json, id_table.jsonl. Reals are written as decimal strings.
void save_corpus(const Corpus& corpus, const std::map<int64_t, IdTableRow>& id_table,
                 const std::string& dir);
Corpus load_corpus(const std::string& dir);
std::map<int64_t, IdTableRow> load_id_table(const std::string& path);

}  // namespace idproxy::data
