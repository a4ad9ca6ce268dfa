#include "idproxy/evalkit.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"

namespace idproxy::eval {

using json = nlohmann::ordered_json;

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    fail(ErrClass::shape, "auc: " + std::to_string(scores.size()) + " scores vs " +
                              std::to_string(labels.size()) + " labels");
  if (scores.empty()) fail(ErrClass::metric, "auc: empty input");
  int64_t n_pos = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) fail(ErrClass::numeric, "auc: non-finite score");
    if (labels[i] != 0 && labels[i] != 1) fail(ErrClass::data, "auc: labels must be 0/1");
    n_pos += labels[i];
  }
  const int64_t n = static_cast<int64_t>(scores.size());
  const int64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    fail(ErrClass::metric, "auc: undefined with a single class");

  std::vector<int64_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)];
  });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[static_cast<size_t>(order[j + 1])] ==
                                       scores[static_cast<size_t>(order[i])])
      ++j;
    // Tied block [i, j] shares the average of its 1-based ranks.
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t t = i; t <= j; ++t)
      if (labels[static_cast<size_t>(order[t])] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double median(std::vector<double> xs) {
  if (xs.empty()) fail(ErrClass::metric, "median: empty input");
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

Projection2D project_2d(const MatD& x, const std::vector<int64_t>& item_ids,
                        const std::vector<int64_t>& topic_ids) {
  if (x.rows() != static_cast<Eigen::Index>(item_ids.size()) ||
      x.rows() != static_cast<Eigen::Index>(topic_ids.size()))
    fail(ErrClass::shape, "project_2d: id/topic count must match the rows");
  if (x.rows() < 3 || x.cols() < 2)
    fail(ErrClass::degenerate, "project_2d: need at least 3 points of width >= 2");

  const MatD centered = x.rowwise() - x.colwise().mean();
  const MatD cov = centered.transpose() * centered /
                   static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success)
    fail(ErrClass::internal, "project_2d: eigendecomposition failed");
  const auto& evals = es.eigenvalues();  // ascending
  const Eigen::Index last = evals.size() - 1;
  if (evals(last - 1) <= 1e-12 * std::max(1.0, evals(last)))
    fail(ErrClass::degenerate, "project_2d: input has rank < 2");

  Eigen::MatrixXd basis(x.cols(), 2);
  basis.col(0) = es.eigenvectors().col(last);
  basis.col(1) = es.eigenvectors().col(last - 1);
  for (int c = 0; c < 2; ++c) {
    Eigen::Index at = 0;
    basis.col(c).cwiseAbs().maxCoeff(&at);
    if (basis(at, c) < 0.0) basis.col(c) = -basis.col(c);
  }

  Projection2D p;
  p.item_ids = item_ids;
  p.topic_ids = topic_ids;
  p.coords = centered * basis;
  return p;
}

void save_projection_csv(const Projection2D& p, const std::string& path) {
  std::string out = "item_id,x,y,topic_id\n";
  for (Eigen::Index i = 0; i < p.coords.rows(); ++i) {
    out += std::to_string(p.item_ids[static_cast<size_t>(i)]) + "," +
           real_to_string(p.coords(i, 0)) + "," + real_to_string(p.coords(i, 1)) + "," +
           std::to_string(p.topic_ids[static_cast<size_t>(i)]) + "\n";
  }
  write_text_file_atomic(path, out);
}

void AblationConfig::validate() const {
  gen.validate();
  encoder.validate();
  stage1.validate();
  adaptor.validate();
  ranker_train.validate();
  if (seeds.empty()) fail(ErrClass::config, "ablation: need at least one seed");
  if (variants.empty()) fail(ErrClass::config, "ablation: need at least one variant");
  if (partition_probe < 32)
    fail(ErrClass::config, "ablation: partition_probe must be >= 32");
  if (encoder.d_id != ranker.d)
    fail(ErrClass::config, "ablation: encoder d_id must equal the ranker field width");
  if (adaptor.d_coarse != ranker.d || adaptor.d_fine != ranker.d)
    fail(ErrClass::config, "ablation: adaptor proxy widths must equal the ranker field width");
  if (adaptor.d_pooled != encoder.d_hidden)
    fail(ErrClass::config, "ablation: adaptor pooled width must equal the encoder width");
  if (ranker.d_z != encoder.d_hidden)
    fail(ErrClass::config, "ablation: ranker content width must equal the encoder width");
}

const VariantSummary& AblationReport::summary(rank::Variant v) const {
  for (const auto& s : variants)
    if (s.variant == v) return s;
  fail(ErrClass::not_found, std::string("ablation report: no summary for ") +
                                rank::variant_name(v));
}

namespace {

json cell_json(const AblationCell& c) {
  json j;
  j["seed"] = c.seed;
  j["ok"] = c.ok;
  if (c.ok) {
    j["auc_cold"] = real_to_string(c.auc_cold);
    j["auc_warm"] = real_to_string(c.auc_warm);
  } else {
    j["error"] = c.error;
  }
  return j;
}

}  // namespace

std::string AblationReport::to_json() const {
  json j;
  j["seeds"] = seeds;
  char hash_buf[17];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(config_hash));
  j["config_hash"] = hash_buf;
  json vs = json::object();
  for (const auto& s : variants) {
    json v;
    v["n_ok"] = s.n_ok;
    if (s.n_ok > 0) {
      v["median_auc_cold"] = real_to_string(s.median_cold);
      v["median_auc_warm"] = real_to_string(s.median_warm);
      v["delta_auc_cold"] = real_to_string(s.delta_cold);
      v["delta_auc_warm"] = real_to_string(s.delta_warm);
    }
    json cells = json::array();
    for (const auto& c : s.cells) cells.push_back(cell_json(c));
    v["cells"] = cells;
    vs[rank::variant_name(s.variant)] = v;
  }
  j["variants"] = vs;
  return j.dump(2) + "\n";
}

std::string AblationReport::to_markdown() const {
  std::string out = "| variant | cold AUC (median) | dcold | warm AUC (median) | dwarm | seeds ok |\n";
  out += "|---|---|---|---|---|---|\n";
  char buf[64];
  for (const auto& s : variants) {
    out += std::string("| ") + rank::variant_name(s.variant) + " | ";
    if (s.n_ok > 0) {
      std::snprintf(buf, sizeof(buf), "%.4f | %+.4f | %.4f | %+.4f", s.median_cold,
                    s.delta_cold, s.median_warm, s.delta_warm);
      out += buf;
    } else {
      out += "failed | - | failed | -";
    }
    std::snprintf(buf, sizeof(buf), " | %lld/%lld |\n", static_cast<long long>(s.n_ok),
                  static_cast<long long>(s.cells.size()));
    out += buf;
  }
  return out;
}

namespace {

struct SeedArtifacts {
  data::Corpus corpus;
  data::Splits splits;
  align::IdEmbeddingTable table;
  rank::ItemSideInputs<float> side;
  std::vector<int> labels_cold, labels_warm;
};

SeedArtifacts prepare_seed(const AblationConfig& cfg, uint64_t seed) {
  SeedArtifacts art;
  data::GenConfig gen = cfg.gen;
  gen.seed = seed;
  art.corpus = data::generate_corpus(gen);
  art.splits = data::split_train_eval(art.corpus);
  const auto raw = data::make_id_table(art.corpus, cfg.encoder.d_id);
  art.table = align::preprocess_id_table(raw, cfg.stage1.tau);

  enc::EncoderF encoder(cfg.encoder);
  align::Stage1Config s1 = cfg.stage1;
  s1.seed = seed;
  const auto s1_res = align::train_stage1(art.corpus, art.table, encoder, s1);

  std::vector<data::Item> probe;
  for (const auto& item : art.corpus.items) {
    if (item.is_cold) continue;
    probe.push_back(item);
    if (static_cast<int64_t>(probe.size()) >= cfg.partition_probe) break;
  }
  const auto partition = align2::partition_layers(encoder, probe, seed);

  const int64_t n_items = art.corpus.config.n_items;
  art.side.p_coarse =
      rank::gather_item_rows(s1_res.proxies, n_items, cfg.encoder.d_id, "ablation proxies");
  const auto zcat_map =
      align2::pool_layer_features(art.corpus.items, encoder, partition.layers);
  art.side.z_cat = rank::gather_item_rows(zcat_map, n_items, 3 * cfg.encoder.d_hidden,
                                          "ablation pooled features");
  const auto zfin_map = align2::pool_layer_features(art.corpus.items, encoder,
                                                    {cfg.encoder.n_layers});
  art.side.z_final =
      rank::gather_item_rows(zfin_map, n_items, cfg.encoder.d_hidden, "ablation content");
  art.side.m_static =
      rank::pretrain_content_map(art.side.z_final, art.table.preprocessed,
                                 cfg.ranker.d, cfg.content_map);

  for (int64_t i : art.splits.eval_cold)
    art.labels_cold.push_back(art.corpus.interactions[static_cast<size_t>(i)].label);
  for (int64_t i : art.splits.eval_warm)
    art.labels_warm.push_back(art.corpus.interactions[static_cast<size_t>(i)].label);
  return art;
}

}  // namespace

AblationReport run_ablation(const AblationConfig& cfg) {
  cfg.validate();
  AblationReport report;
  report.seeds = cfg.seeds;
  {
    Fnv64 h;
    h.update(cfg.gen.canonical_json());
    h.update(cfg.encoder.canonical_json());
    h.update(cfg.stage1.canonical_json());
    h.update(cfg.adaptor.canonical_json());
    h.update(cfg.ranker.canonical_json());
    h.update(cfg.ranker_train.canonical_json());
    const int64_t probe = cfg.partition_probe;
    h.update(&probe, sizeof(probe));
    report.config_hash = h.value();
  }
  for (rank::Variant v : cfg.variants) {
    VariantSummary s;
    s.variant = v;
    report.variants.push_back(s);
  }

  for (uint64_t seed : cfg.seeds) {
    SeedArtifacts art = prepare_seed(cfg, seed);
    for (auto& summary : report.variants) {
      AblationCell cell;
      cell.seed = seed;
      try {
        rank::RankerConfig rc = cfg.ranker;
        rc.n_users = art.corpus.config.n_users;
        rc.n_items = art.corpus.config.n_items;
        rc.variant = summary.variant;
        rc.validate();
        rank::RankerF ranker(rc);
        align2::AdaptorF adaptor(cfg.adaptor);
        align2::AdaptorF* ad = rank::uses_fine(summary.variant) ? &adaptor : nullptr;
        rank::TrainConfig tc = cfg.ranker_train;
        tc.seed = seed;
        train_ranker(ranker, ad, art.corpus, art.splits.train, art.side, tc);
        cell.auc_cold =
            auc(score_interactions(ranker, ad, art.corpus, art.splits.eval_cold, art.side),
                art.labels_cold);
        cell.auc_warm =
            auc(score_interactions(ranker, ad, art.corpus, art.splits.eval_warm, art.side),
                art.labels_warm);
        cell.ok = true;
      } catch (const Error& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      summary.cells.push_back(cell);
    }
  }

  double base_cold = 0.0, base_warm = 0.0;
  bool have_base = false;
  for (auto& s : report.variants) {
    std::vector<double> colds, warms;
    for (const auto& c : s.cells) {
      if (!c.ok) continue;
      colds.push_back(c.auc_cold);
      warms.push_back(c.auc_warm);
    }
    s.n_ok = static_cast<int64_t>(colds.size());
    if (s.n_ok > 0) {
      s.median_cold = median(colds);
      s.median_warm = median(warms);
    }
    if (s.variant == rank::Variant::base && s.n_ok > 0) {
      base_cold = s.median_cold;
      base_warm = s.median_warm;
      have_base = true;
    }
  }
  for (auto& s : report.variants) {
    if (!have_base || s.n_ok == 0) continue;
    s.delta_cold = s.median_cold - base_cold;
    s.delta_warm = s.median_warm - base_warm;
  }
  return report;
}

}  // namespace idproxy::eval
