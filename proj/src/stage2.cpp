#include "idproxy/stage2.hpp"

#include <algorithm>
#include <limits>

#include "json.hpp"

namespace idproxy::align2 {

using json = nlohmann::ordered_json;

KmeansResult kmeans(const MatD& points, int64_t k, uint64_t seed, int64_t max_iters) {
  const int64_t n = points.rows();
  if (k < 1) fail(ErrClass::config, "kmeans: k must be >= 1");
  if (max_iters < 1) fail(ErrClass::config, "kmeans: max_iters must be >= 1");
  if (n < k)
    fail(ErrClass::data, "kmeans: " + std::to_string(n) + " points for k=" + std::to_string(k));

  Rng rng(seed);
  KmeansResult res;
  res.centroids.resize(k, points.cols());

  // k-means++ seeding: first uniform, then D^2-weighted.
  std::vector<double> d2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  res.centroids.row(0) = points.row(rng.uniform_int(n));
  for (int64_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = (points.row(i) - res.centroids.row(c - 1)).squaredNorm();
      d2[static_cast<size_t>(i)] = std::min(d2[static_cast<size_t>(i)], d);
      total += d2[static_cast<size_t>(i)];
    }
    int64_t pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total, acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        acc += d2[static_cast<size_t>(i)];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(n);  // all points coincide with chosen centroids
    }
    res.centroids.row(c) = points.row(pick);
  }

  res.assignments.assign(static_cast<size_t>(n), -1);
  std::vector<int64_t> counts(static_cast<size_t>(k), 0);
  for (int64_t iter = 0; iter < max_iters; ++iter) {
    // Assignment step; inertia is recorded against the assigning centroids.
    bool changed = false;
    double inertia = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      int32_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < k; ++c) {
        const double d = (points.row(i) - res.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int32_t>(c);
        }
      }
      if (res.assignments[static_cast<size_t>(i)] != best) changed = true;
      res.assignments[static_cast<size_t>(i)] = best;
      inertia += best_d;
    }
    res.inertia_trace.push_back(inertia);
    if (!changed && iter > 0) break;

    // Update step.
    MatD sums = MatD::Zero(k, points.cols());
    std::fill(counts.begin(), counts.end(), 0);
    for (int64_t i = 0; i < n; ++i) {
      sums.row(res.assignments[static_cast<size_t>(i)]) += points.row(i);
      ++counts[static_cast<size_t>(res.assignments[static_cast<size_t>(i)])];
    }
    for (int64_t c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<size_t>(c)]);
      } else {
        // Re-seed an emptied cluster at the point farthest from its centroid.
        int64_t far = 0;
        double far_d = -1.0;
        for (int64_t i = 0; i < n; ++i) {
          const double d =
              (points.row(i) - res.centroids.row(res.assignments[static_cast<size_t>(i)]))
                  .squaredNorm();
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        res.centroids.row(c) = points.row(far);
      }
    }
  }
  return res;
}

LayerPartition partition_layers(const enc::Encoder<float>& encoder,
                                const std::vector<data::Item>& probe_items,
                                uint64_t seed) {
  if (probe_items.size() < 32)
    fail(ErrClass::data, "partition_layers: probe set has " +
                             std::to_string(probe_items.size()) + " items, need >= 32");
  const int64_t L = encoder.config().n_layers;
  if (L < 3) fail(ErrClass::config, "partition_layers: encoder must have >= 3 layers");

  // Canonical probe order: the caller's ordering must not change batching, and
  // with it the float accumulation order, and with it the chosen layers.
  std::vector<const data::Item*> probe(probe_items.size());
  for (size_t i = 0; i < probe_items.size(); ++i) probe[i] = &probe_items[i];
  std::stable_sort(probe.begin(), probe.end(),
                   [](const data::Item* a, const data::Item* b) { return a->item_id < b->item_id; });

  // Per-layer feature: probe-set mean of the pooled states.
  MatD features = MatD::Zero(L, encoder.config().d_hidden);
  int64_t n_done = 0;
  constexpr size_t kChunk = 128;
  for (size_t at = 0; at < probe.size(); at += kChunk) {
    const size_t n = std::min(kChunk, probe.size() - at);
    std::vector<enc::PromptTokens> prompts;
    for (size_t i = 0; i < n; ++i)
      prompts.push_back(enc::build_prompt(*probe[at + i], encoder.config()));
    const auto hs = encoder.encode(prompts);
    for (int64_t l = 1; l <= L; ++l) {
      const MatF z = encoder.pool_g(hs.layers[static_cast<size_t>(l)], hs.batch, hs.tokens);
      features.row(l - 1) += z.colwise().sum().cast<double>();
    }
    n_done += static_cast<int64_t>(n);
  }
  features /= static_cast<double>(n_done);

  const KmeansResult km = kmeans(features, 3, seed);

  LayerPartition part;
  part.assignments = km.assignments;
  part.seed = seed;
  for (int32_t c = 0; c < 3; ++c) {
    int64_t medoid = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int64_t l = 0; l < L; ++l) {
      if (km.assignments[static_cast<size_t>(l)] != c) continue;
      const double d = (features.row(l) - km.centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        medoid = l + 1;  // layer indices are 1-based
      }
    }
    if (medoid < 0) fail(ErrClass::internal, "partition_layers: empty cluster survived");
    part.layers.push_back(medoid);
  }
  std::sort(part.layers.begin(), part.layers.end());
  if (part.layers[0] == part.layers[1] || part.layers[1] == part.layers[2])
    fail(ErrClass::internal, "partition_layers: duplicate medoid layers");

  Fnv64 h;
  std::vector<int64_t> ids;
  for (const auto& it : probe_items) ids.push_back(it.item_id);
  std::sort(ids.begin(), ids.end());
  for (int64_t id : ids) h.update(&id, sizeof(id));
  part.probe_hash = h.value();
  return part;
}

void save_partition(const LayerPartition& p, const std::string& path) {
  json j;
  j["layers"] = p.layers;
  j["assignments"] = p.assignments;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(p.probe_hash));
  j["probe_hash"] = buf;
  j["seed"] = p.seed;
  write_text_file_atomic(path, j.dump(2) + "\n");
}

LayerPartition load_partition(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    fail(ErrClass::io, "bad partition file " + path + ": " + e.what());
  }
  LayerPartition p;
  try {
    p.layers = j.at("layers").get<std::vector<int64_t>>();
    p.assignments = j.at("assignments").get<std::vector<int32_t>>();
    p.probe_hash = std::stoull(j.at("probe_hash").get<std::string>(), nullptr, 16);
    p.seed = j.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrClass::io, "bad partition file " + path + ": " + e.what());
  }
  if (p.layers.size() != 3) fail(ErrClass::data, "partition file must select 3 layers");
  return p;
}

std::map<int64_t, VecF> pool_layer_features(const std::vector<data::Item>& items,
                                            const enc::Encoder<float>& encoder,
                                            const std::vector<int64_t>& layers) {
  const int64_t L = encoder.config().n_layers;
  for (int64_t l : layers)
    if (l < 1 || l > L)
      fail(ErrClass::config, "pool_layer_features: layer " + std::to_string(l) +
                                 " outside [1, " + std::to_string(L) + "]");
  const int64_t D = encoder.config().d_hidden;
  std::map<int64_t, VecF> out;
  constexpr size_t kChunk = 256;
  for (size_t at = 0; at < items.size(); at += kChunk) {
    const size_t n = std::min(kChunk, items.size() - at);
    std::vector<enc::PromptTokens> prompts;
    for (size_t i = 0; i < n; ++i)
      prompts.push_back(enc::build_prompt(items[at + i], encoder.config()));
    const auto hs = encoder.encode(prompts);
    std::vector<MatF> pooled;
    for (int64_t l : layers)
      pooled.push_back(encoder.pool_g(hs.layers[static_cast<size_t>(l)], hs.batch, hs.tokens));
    for (size_t i = 0; i < n; ++i) {
      VecF v(static_cast<Eigen::Index>(layers.size()) * D);
      for (size_t j = 0; j < layers.size(); ++j)
        v.segment(static_cast<Eigen::Index>(j) * D, D) =
            pooled[j].row(static_cast<Eigen::Index>(i)).transpose();
      out.emplace(items[at + i].item_id, std::move(v));
    }
  }
  return out;
}

std::map<int64_t, VecF> emit_fine_proxies(const std::vector<data::Item>& items,
                                          const enc::Encoder<float>& encoder,
                                          const LayerPartition& partition,
                                          const AdaptorF& adaptor,
                                          const std::map<int64_t, VecF>& coarse) {
  const auto pooled = pool_layer_features(items, encoder, partition.layers);
  const int64_t dc = adaptor.config().d_coarse;
  MatF z_cat(static_cast<Eigen::Index>(items.size()), 3 * adaptor.config().d_pooled);
  MatF p_c(static_cast<Eigen::Index>(items.size()), dc);
  Eigen::Index row = 0;
  for (const auto& item : items) {
    const auto pit = coarse.find(item.item_id);
    if (pit == coarse.end())
      fail(ErrClass::not_found,
           "emit_fine_proxies: no coarse proxy for item " + std::to_string(item.item_id));
    if (pit->second.size() != dc)
      fail(ErrClass::shape, "emit_fine_proxies: coarse proxy width mismatch for item " +
                                std::to_string(item.item_id));
    z_cat.row(row) = pooled.at(item.item_id).transpose();
    p_c.row(row) = pit->second.transpose();
    ++row;
  }
  const MatF fine = adaptor.forward(z_cat, p_c);
  std::map<int64_t, VecF> out;
  row = 0;
  for (const auto& item : items) out.emplace(item.item_id, fine.row(row++).transpose());
  return out;
}

std::string AdaptorConfig::canonical_json() const {
  json j;
  j["d_pooled"] = d_pooled;
  j["d_hidden"] = d_hidden;
  j["d_coarse"] = d_coarse;
  j["d_fine"] = d_fine;
  j["init_seed"] = init_seed;
  return j.dump();
}

uint64_t AdaptorConfig::hash() const { return fnv64(canonical_json()); }

}  // namespace idproxy::align2
