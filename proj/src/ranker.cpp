#include "idproxy/ranker.hpp"

#include "json.hpp"

namespace idproxy::rank {

using json = nlohmann::ordered_json;

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::base: return "base";
    case Variant::v1_content: return "v1_content";
    case Variant::v2_mlp_map: return "v2_mlp_map";
    case Variant::v3_coarse: return "v3_coarse";
    case Variant::v4_concat_fine: return "v4_concat_fine";
    case Variant::v5_structure_reuse: return "v5_structure_reuse";
  }
  fail(ErrClass::internal, "unknown variant value");
}

Variant variant_from_name(const std::string& name) {
  static const std::pair<const char*, Variant> table[] = {
      {"base", Variant::base},
      {"v1_content", Variant::v1_content},
      {"v1", Variant::v1_content},
      {"v2_mlp_map", Variant::v2_mlp_map},
      {"v2", Variant::v2_mlp_map},
      {"v3_coarse", Variant::v3_coarse},
      {"v3", Variant::v3_coarse},
      {"v4_concat_fine", Variant::v4_concat_fine},
      {"v4", Variant::v4_concat_fine},
      {"v5_structure_reuse", Variant::v5_structure_reuse},
      {"v5", Variant::v5_structure_reuse},
  };
  for (const auto& [n, v] : table)
    if (name == n) return v;
  fail(ErrClass::config, "unknown ranker variant: " + name);
}

void RankerConfig::validate() const {
  if (n_users < 1 || n_items < 1)
    fail(ErrClass::config, "ranker config: n_users and n_items must be >= 1");
  if (d < 1 || d_z < 1) fail(ErrClass::config, "ranker config: widths must be >= 1");
  if (h1 < 1 || h2 < 1) fail(ErrClass::config, "ranker config: hidden sizes must be >= 1");
  if (max_history < 0) fail(ErrClass::config, "ranker config: max_history must be >= 0");
}

std::string RankerConfig::canonical_json() const {
  json j;
  j["n_users"] = n_users;
  j["n_items"] = n_items;
  j["d"] = d;
  j["d_z"] = d_z;
  j["h1"] = h1;
  j["h2"] = h2;
  j["max_history"] = max_history;
  j["variant"] = variant_name(variant);
  j["init_seed"] = init_seed;
  return j.dump();
}

uint64_t RankerConfig::hash() const { return fnv64(canonical_json()); }

std::string TrainConfig::canonical_json() const {
  json j;
  j["lr"] = real_to_string(lr);
  j["weight_decay"] = real_to_string(weight_decay);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  return j.dump();
}

MatF gather_item_rows(const std::map<int64_t, VecF>& rows, int64_t n_items, int64_t d,
                      const std::string& consumer) {
  MatF out(n_items, d);
  for (int64_t i = 0; i < n_items; ++i) {
    auto it = rows.find(i);
    if (it == rows.end())
      fail(ErrClass::not_found, consumer + ": item " + std::to_string(i) + " has no vector");
    if (it->second.size() != d)
      fail(ErrClass::shape, consumer + ": item " + std::to_string(i) + " has width " +
                                std::to_string(it->second.size()) + ", expected " +
                                std::to_string(d));
    out.row(i) = it->second.transpose();
  }
  return out;
}

MatF pretrain_content_map(const MatF& z_final, const std::map<int64_t, nn::VecD>& targets,
                          int64_t d_out, const ContentMapConfig& cfg) {
  if (targets.empty()) fail(ErrClass::empty_split, "content map: no warm targets");
  if (cfg.lr <= 0.0 || cfg.epochs < 1 || cfg.d_hidden < 1)
    fail(ErrClass::config, "content map: bad training config");
  const int64_t d_z = z_final.cols();

  MatF z(static_cast<int64_t>(targets.size()), d_z);
  MatF y(static_cast<int64_t>(targets.size()), d_out);
  int64_t r = 0;
  for (const auto& [id, t] : targets) {
    if (id < 0 || id >= z_final.rows())
      fail(ErrClass::not_found, "content map: target item " + std::to_string(id) +
                                    " outside the content feature table");
    if (t.size() != d_out)
      fail(ErrClass::shape, "content map: target width mismatch for item " + std::to_string(id));
    z.row(r) = z_final.row(id);
    y.row(r) = t.cast<float>().transpose();
    ++r;
  }

  nn::ParamSet<float> ps;
  Rng rng(cfg.seed);
  nn::fill_normal(ps.add("w1", d_z, cfg.d_hidden), rng, 0.05);
  ps.add("b1", 1, cfg.d_hidden);
  nn::fill_normal(ps.add("w2", cfg.d_hidden, d_out), rng, 0.05);
  ps.add("b2", 1, d_out);

  nn::AdamWConfig opt;
  opt.lr = cfg.lr;
  const float inv_n = 1.0f / static_cast<float>(z.rows() * d_out);
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    MatF pre = z * ps.w("w1");
    pre.rowwise() += ps.w("b1").row(0);
    const MatF h = nn::relu(pre);
    MatF out = h * ps.w("w2");
    out.rowwise() += ps.w("b2").row(0);
    const MatF dout = 2.0f * inv_n * (out - y);  // mean squared error
    ps.zero_grad();
    ps.g("w2") += h.transpose() * dout;
    ps.g("b2") += dout.colwise().sum();
    MatF dh = dout * ps.w("w2").transpose();
    dh = nn::relu_backward(pre, dh);
    ps.g("w1") += z.transpose() * dh;
    ps.g("b1") += dh.colwise().sum();
    ps.step(opt);
  }

  MatF pre = z_final * ps.w("w1");
  pre.rowwise() += ps.w("b1").row(0);
  MatF out = nn::relu(pre) * ps.w("w2");
  out.rowwise() += ps.w("b2").row(0);
  return out;
}

}  // namespace idproxy::rank
