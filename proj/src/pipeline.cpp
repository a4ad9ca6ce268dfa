#include "idproxy/pipeline.hpp"

#include <cstdio>
#include <initializer_list>

#include "json.hpp"

namespace idproxy::pipe {

using json = nlohmann::ordered_json;
using nn::MatD;
using nn::MatF;

PipelineConfig default_pipeline_config() {
  PipelineConfig cfg;
  cfg.ab.encoder.n_layers = 6;
  cfg.ab.stage1.batch_size = 64;
  cfg.ab.stage1.lr = 2e-3;
  cfg.ab.stage1.epochs = 150;
  return cfg;
}

// ---- config file ----

namespace {

void check_keys(const json& j, const char* section,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    fail(ErrClass::config, std::string("config: ") + section + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      fail(ErrClass::config,
           std::string("config: unknown key \"") + it.key() + "\" in " + section);
  }
}

int64_t geti(const json& j, const char* key, int64_t dflt) {
  if (!j.contains(key)) return dflt;
  if (!j.at(key).is_number_integer())
    fail(ErrClass::config, std::string("config: ") + key + " must be an integer");
  return j.at(key).get<int64_t>();
}

uint64_t getu(const json& j, const char* key, uint64_t dflt) {
  const int64_t v = geti(j, key, static_cast<int64_t>(dflt));
  if (v < 0) fail(ErrClass::config, std::string("config: ") + key + " must be >= 0");
  return static_cast<uint64_t>(v);
}

double getd(const json& j, const char* key, double dflt) {
  if (!j.contains(key)) return dflt;
  if (!j.at(key).is_number())
    fail(ErrClass::config, std::string("config: ") + key + " must be a number");
  return j.at(key).get<double>();
}

std::string gets(const json& j, const char* key, const std::string& dflt) {
  if (!j.contains(key)) return dflt;
  if (!j.at(key).is_string())
    fail(ErrClass::config, std::string("config: ") + key + " must be a string");
  return j.at(key).get<std::string>();
}

void parse_generation(const json& j, data::GenConfig& g) {
  check_keys(j, "generation",
             {"n_users", "n_items", "n_topics", "d_latent", "vocab_size", "tokens_per_item",
              "n_interactions", "cold_fraction", "history_len", "id_space_mode",
              "noise_sigma"});
  g.n_users = geti(j, "n_users", g.n_users);
  g.n_items = geti(j, "n_items", g.n_items);
  g.n_topics = geti(j, "n_topics", g.n_topics);
  g.d_latent = geti(j, "d_latent", g.d_latent);
  g.vocab_size = geti(j, "vocab_size", g.vocab_size);
  g.tokens_per_item = geti(j, "tokens_per_item", g.tokens_per_item);
  g.n_interactions = geti(j, "n_interactions", g.n_interactions);
  g.cold_fraction = getd(j, "cold_fraction", g.cold_fraction);
  g.history_len = geti(j, "history_len", g.history_len);
  g.noise_sigma = getd(j, "noise_sigma", g.noise_sigma);
  const std::string mode =
      gets(j, "id_space_mode",
           g.id_space_mode == data::IdSpaceMode::clustered ? "clustered" : "irregular");
  if (mode == "clustered")
    g.id_space_mode = data::IdSpaceMode::clustered;
  else if (mode == "irregular")
    g.id_space_mode = data::IdSpaceMode::irregular;
  else
    fail(ErrClass::config, "config: id_space_mode must be clustered or irregular");
}

void parse_stage1(const json& j, enc::EncoderConfig& e, align::Stage1Config& s) {
  check_keys(j, "stage1",
             {"encoder", "tau", "tau_c", "batch_size", "lr", "epochs", "weight_decay"});
  if (j.contains("encoder")) {
    const json& je = j.at("encoder");
    check_keys(je, "stage1.encoder",
               {"n_layers", "d_hidden", "n_heads", "vocab_size", "max_tokens", "d_id",
                "init_seed"});
    e.n_layers = geti(je, "n_layers", e.n_layers);
    e.d_hidden = geti(je, "d_hidden", e.d_hidden);
    e.n_heads = geti(je, "n_heads", e.n_heads);
    e.vocab_size = geti(je, "vocab_size", e.vocab_size);
    e.max_tokens = geti(je, "max_tokens", e.max_tokens);
    e.d_id = geti(je, "d_id", e.d_id);
    e.init_seed = getu(je, "init_seed", e.init_seed);
  }
  s.tau = geti(j, "tau", s.tau);
  s.tau_c = getd(j, "tau_c", s.tau_c);
  s.batch_size = geti(j, "batch_size", s.batch_size);
  s.lr = getd(j, "lr", s.lr);
  s.epochs = geti(j, "epochs", s.epochs);
  s.weight_decay = getd(j, "weight_decay", s.weight_decay);
}

void parse_stage2(const json& j, align2::AdaptorConfig& a, int64_t& probe) {
  check_keys(j, "stage2", {"adaptor", "partition_probe"});
  if (j.contains("adaptor")) {
    const json& ja = j.at("adaptor");
    check_keys(ja, "stage2.adaptor",
               {"d_pooled", "d_hidden", "d_coarse", "d_fine", "init_seed"});
    a.d_pooled = geti(ja, "d_pooled", a.d_pooled);
    a.d_hidden = geti(ja, "d_hidden", a.d_hidden);
    a.d_coarse = geti(ja, "d_coarse", a.d_coarse);
    a.d_fine = geti(ja, "d_fine", a.d_fine);
    a.init_seed = getu(ja, "init_seed", a.init_seed);
  }
  probe = geti(j, "partition_probe", probe);
}

void parse_ranker(const json& j, rank::RankerConfig& r, rank::TrainConfig& t,
                  rank::ContentMapConfig& m) {
  check_keys(j, "ranker",
             {"d", "d_z", "h1", "h2", "max_history", "init_seed", "train", "content_map"});
  r.d = geti(j, "d", r.d);
  r.d_z = geti(j, "d_z", r.d_z);
  r.h1 = geti(j, "h1", r.h1);
  r.h2 = geti(j, "h2", r.h2);
  r.max_history = geti(j, "max_history", r.max_history);
  r.init_seed = getu(j, "init_seed", r.init_seed);
  if (j.contains("train")) {
    const json& jt = j.at("train");
    check_keys(jt, "ranker.train", {"lr", "weight_decay", "epochs", "batch_size"});
    t.lr = getd(jt, "lr", t.lr);
    t.weight_decay = getd(jt, "weight_decay", t.weight_decay);
    t.epochs = geti(jt, "epochs", t.epochs);
    t.batch_size = geti(jt, "batch_size", t.batch_size);
  }
  if (j.contains("content_map")) {
    const json& jm = j.at("content_map");
    check_keys(jm, "ranker.content_map", {"d_hidden", "lr", "epochs", "seed"});
    m.d_hidden = geti(jm, "d_hidden", m.d_hidden);
    m.lr = getd(jm, "lr", m.lr);
    m.epochs = geti(jm, "epochs", m.epochs);
    m.seed = getu(jm, "seed", m.seed);
  }
}

void parse_eval(const json& j, std::vector<uint64_t>& seeds,
                std::vector<rank::Variant>& variants) {
  check_keys(j, "eval", {"seeds", "variants"});
  if (j.contains("seeds")) {
    if (!j.at("seeds").is_array())
      fail(ErrClass::config, "config: eval.seeds must be an array");
    seeds.clear();
    for (const auto& s : j.at("seeds")) {
      if (!s.is_number_integer() || s.get<int64_t>() < 0)
        fail(ErrClass::config, "config: eval.seeds entries must be integers >= 0");
      seeds.push_back(s.get<uint64_t>());
    }
  }
  if (j.contains("variants")) {
    if (!j.at("variants").is_array())
      fail(ErrClass::config, "config: eval.variants must be an array");
    variants.clear();
    for (const auto& v : j.at("variants")) {
      if (!v.is_string())
        fail(ErrClass::config, "config: eval.variants entries must be strings");
      variants.push_back(rank::variant_from_name(v.get<std::string>()));
    }
  }
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& json_text) {
  PipelineConfig cfg = default_pipeline_config();
  if (json_text.empty()) return cfg;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrClass::config, std::string("config: parse failed: ") + e.what());
  }
  check_keys(j, "the top level", {"seed", "generation", "stage1", "stage2", "ranker", "eval"});
  cfg.seed = getu(j, "seed", cfg.seed);
  if (j.contains("generation")) parse_generation(j.at("generation"), cfg.ab.gen);
  if (j.contains("stage1")) parse_stage1(j.at("stage1"), cfg.ab.encoder, cfg.ab.stage1);
  if (j.contains("stage2")) parse_stage2(j.at("stage2"), cfg.ab.adaptor, cfg.ab.partition_probe);
  if (j.contains("ranker"))
    parse_ranker(j.at("ranker"), cfg.ab.ranker, cfg.ab.ranker_train, cfg.ab.content_map);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg.ab.seeds, cfg.ab.variants);
  return cfg;
}

std::string pipeline_config_json(const PipelineConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  {
    const auto& g = cfg.ab.gen;
    json s;
    s["n_users"] = g.n_users;
    s["n_items"] = g.n_items;
    s["n_topics"] = g.n_topics;
    s["d_latent"] = g.d_latent;
    s["vocab_size"] = g.vocab_size;
    s["tokens_per_item"] = g.tokens_per_item;
    s["n_interactions"] = g.n_interactions;
    s["cold_fraction"] = g.cold_fraction;
    s["history_len"] = g.history_len;
    s["id_space_mode"] =
        g.id_space_mode == data::IdSpaceMode::clustered ? "clustered" : "irregular";
    s["noise_sigma"] = g.noise_sigma;
    j["generation"] = s;
  }
  {
    const auto& e = cfg.ab.encoder;
    json enc;
    enc["n_layers"] = e.n_layers;
    enc["d_hidden"] = e.d_hidden;
    enc["n_heads"] = e.n_heads;
    enc["vocab_size"] = e.vocab_size;
    enc["max_tokens"] = e.max_tokens;
    enc["d_id"] = e.d_id;
    enc["init_seed"] = e.init_seed;
    const auto& t = cfg.ab.stage1;
    json s;
    s["encoder"] = enc;
    s["tau"] = t.tau;
    s["tau_c"] = t.tau_c;
    s["batch_size"] = t.batch_size;
    s["lr"] = t.lr;
    s["epochs"] = t.epochs;
    s["weight_decay"] = t.weight_decay;
    j["stage1"] = s;
  }
  {
    const auto& a = cfg.ab.adaptor;
    json ad;
    ad["d_pooled"] = a.d_pooled;
    ad["d_hidden"] = a.d_hidden;
    ad["d_coarse"] = a.d_coarse;
    ad["d_fine"] = a.d_fine;
    ad["init_seed"] = a.init_seed;
    json s;
    s["adaptor"] = ad;
    s["partition_probe"] = cfg.ab.partition_probe;
    j["stage2"] = s;
  }
  {
    const auto& r = cfg.ab.ranker;
    json s;
    s["d"] = r.d;
    s["d_z"] = r.d_z;
    s["h1"] = r.h1;
    s["h2"] = r.h2;
    s["max_history"] = r.max_history;
    s["init_seed"] = r.init_seed;
    const auto& t = cfg.ab.ranker_train;
    json tr;
    tr["lr"] = t.lr;
    tr["weight_decay"] = t.weight_decay;
    tr["epochs"] = t.epochs;
    tr["batch_size"] = t.batch_size;
    s["train"] = tr;
    const auto& m = cfg.ab.content_map;
    json cm;
    cm["d_hidden"] = m.d_hidden;
    cm["lr"] = m.lr;
    cm["epochs"] = m.epochs;
    cm["seed"] = m.seed;
    s["content_map"] = cm;
    j["ranker"] = s;
  }
  {
    json s;
    s["seeds"] = cfg.ab.seeds;
    json vs = json::array();
    for (rank::Variant v : cfg.ab.variants) vs.push_back(rank::variant_name(v));
    s["variants"] = vs;
    j["eval"] = s;
  }
  return j.dump(2) + "\n";
}

// ---- run-directory plumbing ----

namespace {

std::string hash_hex(uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void require_artifact(const std::string& path, const std::string& producer) {
  if (!file_exists(path))
    fail(ErrClass::dependency, "missing " + path + " - run `" + producer + "` first");
}

// Resolved config snapshot at the run root plus a timestamped per-step
// manifest listing the step's files and their checksums.
void write_step_manifest(const PipelineConfig& cfg, const std::string& run_dir,
                         const std::string& step_dir, const std::vector<std::string>& files,
                         const json& extra = json::object()) {
  const std::string cfg_text = pipeline_config_json(cfg);
  write_text_file_atomic(run_dir + "/config.json", cfg_text);
  json m;
  m["created_utc"] = utc_timestamp();
  m["config_hash"] = hash_hex(fnv64(cfg_text));
  json fs = json::object();
  for (const auto& name : files)
    fs[name] = hash_hex(fnv64(read_text_file(step_dir + "/" + name)));
  m["files"] = fs;
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
  write_text_file_atomic(step_dir + "/manifest.json", m.dump(2) + "\n");
}

data::Corpus load_run_corpus(const std::string& run_dir) {
  require_artifact(run_dir + "/data/meta.json", "gen-data");
  return data::load_corpus(run_dir + "/data");
}

enc::EncoderF load_run_encoder(const PipelineConfig& cfg, const std::string& run_dir) {
  require_artifact(run_dir + "/stage1/encoder.ckpt", "train-stage1");
  enc::EncoderF encoder(cfg.ab.encoder);
  encoder.load(run_dir + "/stage1/encoder.ckpt");
  return encoder;
}

align2::LayerPartition load_run_partition(const std::string& run_dir) {
  require_artifact(run_dir + "/stage2/partition.json", "partition-layers");
  return align2::load_partition(run_dir + "/stage2/partition.json");
}

std::map<int64_t, nn::VecF> store_to_map(const store::ProxyStore& st, bool fine) {
  std::map<int64_t, nn::VecF> out;
  for (int64_t id : st.ids()) {
    const auto r = st.lookup(id);
    out.emplace(id, fine ? r.p_fine : r.p_coarse);
  }
  return out;
}

MatF coarse_matrix(const PipelineConfig& cfg, const std::string& run_dir, int64_t n_items) {
  require_artifact(run_dir + "/stage1/coarse_proxies.bin", "train-stage1");
  store::ProxyStore st(run_dir + "/stage1/coarse_proxies.bin");
  return rank::gather_item_rows(store_to_map(st, false), n_items, cfg.ab.encoder.d_id,
                                "coarse proxy store");
}

align::IdEmbeddingTable load_run_id_table(const PipelineConfig& cfg,
                                          const std::string& run_dir) {
  require_artifact(run_dir + "/data/id_table.jsonl", "gen-data");
  const auto raw = data::load_id_table(run_dir + "/data/id_table.jsonl");
  return align::preprocess_id_table(raw, cfg.ab.stage1.tau);
}

// Side inputs for one variant, rebuilt identically at train and eval time
// from the frozen artifacts.
rank::ItemSideInputs<float> build_side(const PipelineConfig& cfg, const std::string& run_dir,
                                       const data::Corpus& corpus, rank::Variant v) {
  rank::ItemSideInputs<float> side;
  const int64_t n_items = corpus.config.n_items;
  if (rank::uses_coarse(v)) side.p_coarse = coarse_matrix(cfg, run_dir, n_items);
  if (v == rank::Variant::v1_content || v == rank::Variant::v2_mlp_map) {
    const auto encoder = load_run_encoder(cfg, run_dir);
    const auto zfin = align2::pool_layer_features(corpus.items, encoder,
                                                  {cfg.ab.encoder.n_layers});
    side.z_final =
        rank::gather_item_rows(zfin, n_items, cfg.ab.encoder.d_hidden, "content features");
    if (v == rank::Variant::v2_mlp_map) {
      const auto table = load_run_id_table(cfg, run_dir);
      side.m_static = rank::pretrain_content_map(side.z_final, table.preprocessed,
                                                 cfg.ab.ranker.d, cfg.ab.content_map);
    }
  }
  if (rank::uses_fine(v)) {
    const auto encoder = load_run_encoder(cfg, run_dir);
    const auto partition = load_run_partition(run_dir);
    const auto zcat = align2::pool_layer_features(corpus.items, encoder, partition.layers);
    side.z_cat = rank::gather_item_rows(zcat, n_items, 3 * cfg.ab.encoder.d_hidden,
                                        "pooled layer features");
  }
  return side;
}

rank::RankerConfig ranker_config_for(const PipelineConfig& cfg, const data::Corpus& corpus,
                                     rank::Variant v) {
  rank::RankerConfig rc = cfg.ab.ranker;
  rc.n_users = corpus.config.n_users;
  rc.n_items = corpus.config.n_items;
  rc.variant = v;
  rc.validate();
  return rc;
}

json losses_json(const std::vector<double>& losses) {
  json a = json::array();
  for (double l : losses) a.push_back(real_to_string(l));
  return a;
}

std::string scores_jsonl(const data::Corpus& corpus, const std::vector<int64_t>& idx,
                         const std::vector<double>& scores, const std::string& split) {
  std::string out;
  out.reserve(scores.size() * 96);
  for (size_t i = 0; i < idx.size(); ++i) {
    const auto& ia = corpus.interactions[static_cast<size_t>(idx[i])];
    json j;
    j["user_id"] = ia.user_id;
    j["item_id"] = ia.item_id;
    j["split"] = split;
    j["score"] = real_to_string(scores[i]);
    j["label"] = ia.label;
    out += j.dump();
    out += "\n";
  }
  return out;
}

}  // namespace

std::string step_gen_data(const PipelineConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  data::GenConfig gen = cfg.ab.gen;
  gen.seed = cfg.seed;
  const data::Corpus corpus = data::generate_corpus(gen);
  const data::Splits splits = data::split_train_eval(corpus);
  const auto id_table = data::make_id_table(corpus, cfg.ab.encoder.d_id);

  ensure_dir(run_dir + "/data");
  data::save_corpus(corpus, id_table, run_dir + "/data");
  write_step_manifest(cfg, run_dir, run_dir + "/data",
                      {"items.jsonl", "users.jsonl", "interactions.jsonl", "id_table.jsonl",
                       "meta.json"});

  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "generated %lld users, %lld items (%lld cold), %lld interactions "
                "(train %zu / eval_warm %zu / eval_cold %zu)",
                static_cast<long long>(corpus.config.n_users),
                static_cast<long long>(corpus.config.n_items),
                static_cast<long long>(corpus.n_cold_items()),
                static_cast<long long>(corpus.interactions.size()), splits.train.size(),
                splits.eval_warm.size(), splits.eval_cold.size());
  return buf;
}

std::string step_train_stage1(const PipelineConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  const data::Corpus corpus = load_run_corpus(run_dir);
  const auto table = load_run_id_table(cfg, run_dir);

  enc::EncoderF encoder(cfg.ab.encoder);
  align::Stage1Config s1 = cfg.ab.stage1;
  s1.seed = cfg.seed;
  const auto res = align::train_stage1(corpus, table, encoder, s1);
  const double top1 = align::retrieval_eval(res.proxies, table, 1);
  const double cosine = align::mean_alignment_cosine(res.proxies, table);

  ensure_dir(run_dir + "/stage1");
  encoder.save(run_dir + "/stage1/encoder.ckpt");

  std::vector<store::ProxyRecord> records;
  for (const auto& [id, p] : res.proxies) {
    store::ProxyRecord r;
    r.item_id = id;
    r.version = 1;
    r.p_coarse = p;
    records.push_back(std::move(r));
  }
  store::StoreMeta meta{cfg.ab.encoder.d_id, 0, encoder.param_hash(), 0};
  const store::Manifest sm =
      store::write_proxies(records, meta, run_dir + "/stage1/coarse_proxies.bin");

  json metrics;
  metrics["epoch_losses"] = losses_json(res.epoch_losses);
  metrics["top1_retrieval"] = real_to_string(top1);
  metrics["mean_cosine"] = real_to_string(cosine);
  metrics["batch_size_adjusted"] = res.batch_size_adjusted;
  write_text_file_atomic(run_dir + "/stage1/metrics.json", metrics.dump(2) + "\n");

  json extra;
  extra["encoder_param_hash"] = hash_hex(encoder.param_hash());
  extra["store_checksum"] = hash_hex(sm.checksum);
  write_step_manifest(cfg, run_dir, run_dir + "/stage1",
                      {"encoder.ckpt", "coarse_proxies.bin", "metrics.json"}, extra);

  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "stage-1 aligned %zu proxies: final loss %.4f, top-1 retrieval %.3f, "
                "mean cosine %.3f",
                records.size(), res.epoch_losses.back(), top1, cosine);
  return buf;
}

std::string step_partition_layers(const PipelineConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  const data::Corpus corpus = load_run_corpus(run_dir);
  const auto encoder = load_run_encoder(cfg, run_dir);

  std::vector<data::Item> probe;
  for (const auto& item : corpus.items) {
    if (item.is_cold) continue;
    probe.push_back(item);
    if (static_cast<int64_t>(probe.size()) >= cfg.ab.partition_probe) break;
  }
  const auto partition = align2::partition_layers(encoder, probe, cfg.seed);

  ensure_dir(run_dir + "/stage2");
  align2::save_partition(partition, run_dir + "/stage2/partition.json");
  write_step_manifest(cfg, run_dir, run_dir + "/stage2", {"partition.json"});

  std::string out = "partitioned " + std::to_string(cfg.ab.encoder.n_layers) +
                    " layers; medoids:";
  for (int64_t l : partition.layers) out += " " + std::to_string(l);
  return out;
}

std::string step_train_stage2(const PipelineConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  const data::Corpus corpus = load_run_corpus(run_dir);
  const data::Splits splits = data::split_train_eval(corpus);
  const auto encoder = load_run_encoder(cfg, run_dir);
  const auto partition = load_run_partition(run_dir);
  const auto side =
      build_side(cfg, run_dir, corpus, rank::Variant::v5_structure_reuse);

  rank::RankerConfig rc =
      ranker_config_for(cfg, corpus, rank::Variant::v5_structure_reuse);
  rank::RankerF ranker(rc);
  align2::AdaptorF adaptor(cfg.ab.adaptor);
  rank::TrainConfig tc = cfg.ab.ranker_train;
  tc.seed = cfg.seed;
  const auto res = rank::train_ranker(ranker, &adaptor, corpus, splits.train, side, tc);

  adaptor.save(run_dir + "/stage2/adaptor.ckpt");

  require_artifact(run_dir + "/stage1/coarse_proxies.bin", "train-stage1");
  store::ProxyStore coarse_store(run_dir + "/stage1/coarse_proxies.bin");
  const auto coarse = store_to_map(coarse_store, false);
  const auto fine =
      align2::emit_fine_proxies(corpus.items, encoder, partition, adaptor, coarse);
  std::vector<store::ProxyRecord> records;
  for (const auto& [id, p] : coarse) {
    store::ProxyRecord r;
    r.item_id = id;
    r.version = 1;
    r.p_coarse = p;
    r.p_fine = fine.at(id);
    records.push_back(std::move(r));
  }
  store::StoreMeta meta{cfg.ab.encoder.d_id, cfg.ab.adaptor.d_fine, encoder.param_hash(),
                        adaptor.param_hash()};
  const store::Manifest sm =
      store::write_proxies(records, meta, run_dir + "/stage2/fine_proxies.bin");

  json metrics;
  metrics["epoch_losses"] = losses_json(res.epoch_losses);
  metrics["adaptor_params"] = adaptor.param_count();
  write_text_file_atomic(run_dir + "/stage2/metrics.json", metrics.dump(2) + "\n");

  json extra;
  extra["adaptor_param_hash"] = hash_hex(adaptor.param_hash());
  extra["store_checksum"] = hash_hex(sm.checksum);
  write_step_manifest(
      cfg, run_dir, run_dir + "/stage2",
      {"partition.json", "adaptor.ckpt", "fine_proxies.bin", "metrics.json"}, extra);

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "stage-2 adaptor trained (%lld params): final joint loss %.4f, "
                "%zu fine proxies emitted",
                static_cast<long long>(adaptor.param_count()), res.epoch_losses.back(),
                records.size());
  return buf;
}

std::string step_train_ranker(const PipelineConfig& cfg, const std::string& run_dir,
                              rank::Variant variant) {
  cfg.validate();
  const data::Corpus corpus = load_run_corpus(run_dir);
  const data::Splits splits = data::split_train_eval(corpus);
  const auto side = build_side(cfg, run_dir, corpus, variant);

  rank::RankerConfig rc = ranker_config_for(cfg, corpus, variant);
  rank::RankerF ranker(rc);
  align2::AdaptorF adaptor(cfg.ab.adaptor);
  align2::AdaptorF* ad = rank::uses_fine(variant) ? &adaptor : nullptr;
  rank::TrainConfig tc = cfg.ab.ranker_train;
  tc.seed = cfg.seed;
  const auto res = rank::train_ranker(ranker, ad, corpus, splits.train, side, tc);

  const std::string dir = run_dir + "/ranker_" + rank::variant_name(variant);
  ensure_dir(dir);
  ranker.save(dir + "/ranker.ckpt");
  std::vector<std::string> files = {"ranker.ckpt", "metrics.json"};
  if (ad) {
    adaptor.save(dir + "/adaptor.ckpt");
    files.push_back("adaptor.ckpt");
  }

  json metrics;
  metrics["variant"] = rank::variant_name(variant);
  metrics["epoch_losses"] = losses_json(res.epoch_losses);
  metrics["ranker_params"] = ranker.param_count();
  write_text_file_atomic(dir + "/metrics.json", metrics.dump(2) + "\n");

  json extra;
  extra["ranker_param_hash"] = hash_hex(ranker.param_hash());
  write_step_manifest(cfg, run_dir, dir, files, extra);

  char buf[160];
  std::snprintf(buf, sizeof(buf), "trained %s for %lld epochs: loss %.4f -> %.4f",
                rank::variant_name(variant), static_cast<long long>(tc.epochs),
                res.epoch_losses.front(), res.epoch_losses.back());
  return buf;
}

std::string step_eval(const PipelineConfig& cfg, const std::string& run_dir,
                      rank::Variant variant, const std::string& split) {
  cfg.validate();
  if (split != "cold" && split != "warm" && split != "both")
    fail(ErrClass::config, "eval: split must be cold, warm or both");
  const data::Corpus corpus = load_run_corpus(run_dir);
  const data::Splits splits = data::split_train_eval(corpus);
  const auto side = build_side(cfg, run_dir, corpus, variant);

  const std::string dir = run_dir + "/ranker_" + rank::variant_name(variant);
  require_artifact(dir + "/ranker.ckpt", std::string("train-ranker --variant ") +
                                             rank::variant_name(variant));
  rank::RankerConfig rc = ranker_config_for(cfg, corpus, variant);
  rank::RankerF ranker(rc);
  ranker.load(dir + "/ranker.ckpt");
  align2::AdaptorF adaptor(cfg.ab.adaptor);
  align2::AdaptorF* ad = nullptr;
  if (rank::uses_fine(variant)) {
    require_artifact(dir + "/adaptor.ckpt", std::string("train-ranker --variant ") +
                                                rank::variant_name(variant));
    adaptor.load(dir + "/adaptor.ckpt");
    ad = &adaptor;
  }

  ensure_dir(run_dir + "/eval");
  json result;
  result["variant"] = rank::variant_name(variant);
  std::string summary;
  std::vector<std::string> files;
  auto run_split = [&](const std::string& name, const std::vector<int64_t>& idx) {
    const auto scores = rank::score_interactions(ranker, ad, corpus, idx, side);
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (int64_t i : idx)
      labels.push_back(corpus.interactions[static_cast<size_t>(i)].label);
    const double a = eval::auc(scores, labels);
    result["auc_" + name] = real_to_string(a);
    const std::string fname = "scores_" + std::string(rank::variant_name(variant)) + "_" +
                              name + ".jsonl";
    write_text_file_atomic(run_dir + "/eval/" + fname,
                           scores_jsonl(corpus, idx, scores, name));
    files.push_back(fname);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "auc_%s=%.6f\n", name.c_str(), a);
    summary += buf;
  };
  if (split == "cold" || split == "both") run_split("cold", splits.eval_cold);
  if (split == "warm" || split == "both") run_split("warm", splits.eval_warm);

  const std::string rname = "eval_" + std::string(rank::variant_name(variant)) + ".json";
  write_text_file_atomic(run_dir + "/eval/" + rname, result.dump(2) + "\n");
  files.push_back(rname);
  write_step_manifest(cfg, run_dir, run_dir + "/eval", files);
  summary.pop_back();  // trailing newline
  return summary;
}

std::string step_ablation(const PipelineConfig& cfg, const std::string& run_dir,
                          int64_t n_seeds) {
  eval::AblationConfig ab = cfg.ab;
  if (n_seeds > 0) {
    ab.seeds.clear();
    for (int64_t s = 1; s <= n_seeds; ++s) ab.seeds.push_back(static_cast<uint64_t>(s));
  }
  const auto report = eval::run_ablation(ab);

  ensure_dir(run_dir + "/report");
  write_text_file_atomic(run_dir + "/report/report.json", report.to_json());
  write_text_file_atomic(run_dir + "/report/report.md", report.to_markdown());
  write_step_manifest(cfg, run_dir, run_dir + "/report", {"report.json", "report.md"});
  return report.to_markdown();
}

std::string step_gen_proxies(const PipelineConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  const data::Corpus corpus = load_run_corpus(run_dir);
  const auto encoder = load_run_encoder(cfg, run_dir);
  const auto partition = load_run_partition(run_dir);
  require_artifact(run_dir + "/stage2/adaptor.ckpt", "train-stage2");
  require_artifact(run_dir + "/stage2/fine_proxies.bin", "train-stage2");
  align2::AdaptorF adaptor(cfg.ab.adaptor);
  adaptor.load(run_dir + "/stage2/adaptor.ckpt");

  // The training-time store header records which artifacts the fine proxies
  // came from; generation refuses to run against anything else.
  store::ProxyStore trained(run_dir + "/stage2/fine_proxies.bin");
  std::vector<data::Item> fresh;
  for (const auto& item : corpus.items)
    if (item.is_cold) fresh.push_back(item);
  if (fresh.empty()) fail(ErrClass::data, "gen-proxies: corpus has no cold items");

  const auto gen = store::batch_generate(fresh, encoder, partition, adaptor,
                                         trained.meta().stage1_hash,
                                         trained.meta().stage2_hash, 1);

  ensure_dir(run_dir + "/proxies");
  store::StoreMeta meta{cfg.ab.encoder.d_id, cfg.ab.adaptor.d_fine,
                        trained.meta().stage1_hash, trained.meta().stage2_hash};
  const store::Manifest sm =
      store::write_proxies(gen.records, meta, run_dir + "/proxies/proxies.bin");
  store::save_manifest(sm, run_dir + "/proxies/store_manifest.json");

  json extra;
  extra["items_per_sec"] = real_to_string(gen.items_per_sec);
  write_step_manifest(cfg, run_dir, run_dir + "/proxies", {"proxies.bin"}, extra);

  char buf[128];
  std::snprintf(buf, sizeof(buf), "generated %zu proxy records at %.0f items/s",
                gen.records.size(), gen.items_per_sec);
  return buf;
}

std::string step_viz(const PipelineConfig& cfg, const std::string& run_dir,
                     const std::string& what) {
  cfg.validate();
  const data::Corpus corpus = load_run_corpus(run_dir);

  std::vector<int64_t> ids, topics;
  MatD x;
  if (what == "proxies") {
    require_artifact(run_dir + "/stage1/coarse_proxies.bin", "train-stage1");
    store::ProxyStore st(run_dir + "/stage1/coarse_proxies.bin");
    const auto all = st.ids();
    x.resize(static_cast<Eigen::Index>(all.size()), st.meta().d);
    for (size_t i = 0; i < all.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) =
          st.lookup(all[i]).p_coarse.transpose().cast<double>();
      ids.push_back(all[i]);
      topics.push_back(corpus.item(all[i]).topic_id);
    }
  } else if (what == "id-table") {
    const auto table = load_run_id_table(cfg, run_dir);
    x.resize(static_cast<Eigen::Index>(table.preprocessed.size()), cfg.ab.encoder.d_id);
    Eigen::Index r = 0;
    for (const auto& [id, e] : table.preprocessed) {
      x.row(r++) = e.transpose();
      ids.push_back(id);
      topics.push_back(corpus.item(id).topic_id);
    }
  } else {
    fail(ErrClass::config, "viz: unknown projection target \"" + what +
                               "\" (expected proxies or id-table)");
  }

  const auto p = eval::project_2d(x, ids, topics);
  ensure_dir(run_dir + "/report");
  eval::save_projection_csv(p, run_dir + "/report/projection.csv");
  write_step_manifest(cfg, run_dir, run_dir + "/report", {"projection.csv"});
  return "projected " + std::to_string(ids.size()) + " " + what + " to " + run_dir +
         "/report/projection.csv";
}

}  // namespace idproxy::pipe
