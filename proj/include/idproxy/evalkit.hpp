#pragma once

#include <map>
#include <string>
#include <vector>

#include "idproxy/corpus.hpp"
#include "idproxy/encoder.hpp"
#include "idproxy/ranker.hpp"
#include "idproxy/stage1.hpp"
#include "idproxy/stage2.hpp"

// Evaluation kit: exact tie-aware AUC, the end-to-end variant ablation, and
// a 2-d principal-component projection for eyeballing the proxy geometry.

namespace idproxy::eval {

using nn::MatD;
using nn::MatF;

// Mann-Whitney AUC with average ranks over ties, O(n log n). Equals the
// all-pairs count with half credit for tied scores.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

double median(std::vector<double> xs);

// Centered projection onto the top-2 principal components. Each component is
// oriented so its largest-magnitude loading is positive, which pins the
// otherwise arbitrary eigenvector sign.
struct Projection2D {
  std::vector<int64_t> item_ids;
  std::vector<int64_t> topic_ids;
  MatD coords;  // n x 2
};
Projection2D project_2d(const MatD& x, const std::vector<int64_t>& item_ids,
                        const std::vector<int64_t>& topic_ids);
void save_projection_csv(const Projection2D& p, const std::string& path);

struct AblationConfig {
  data::GenConfig gen;
  enc::EncoderConfig encoder;
  align::Stage1Config stage1;
  align2::AdaptorConfig adaptor;
  rank::RankerConfig ranker;  // variant and id capacities are set per run
  rank::TrainConfig ranker_train;
  rank::ContentMapConfig content_map;
  int64_t partition_probe = 128;  // warm items fed to the layer partition
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<rank::Variant> variants = {
      rank::Variant::base,
      rank::Variant::v1_content,
      rank::Variant::v2_mlp_map,
      rank::Variant::v3_coarse,
      rank::Variant::v4_concat_fine,
      rank::Variant::v5_structure_reuse,
  };

  void validate() const;
};

struct AblationCell {
  uint64_t seed = 0;
  bool ok = false;
  double auc_cold = 0.0;
  double auc_warm = 0.0;
  std::string error;  // set when !ok
};

struct VariantSummary {
  rank::Variant variant = rank::Variant::base;
  std::vector<AblationCell> cells;     // one per seed
  int64_t n_ok = 0;
  double median_cold = 0.0, median_warm = 0.0;  // over successful seeds
  double delta_cold = 0.0, delta_warm = 0.0;    // vs the base medians
};

struct AblationReport {
  std::vector<uint64_t> seeds;
  std::vector<VariantSummary> variants;
  uint64_t config_hash = 0;

  const VariantSummary& summary(rank::Variant v) const;
  // Deterministic given the config: reals are serialized as decimal strings
  // and no clocks are consulted, so identical runs yield identical bytes.
  std::string to_json() const;
  std::string to_markdown() const;
};

// Runs the whole coarse-to-fine pipeline per seed (corpus, alignment
// training, layer partition, adaptor) and trains every requested variant on
// identical splits with identical ranker initialization. A variant that
// throws marks its cell failed instead of aborting the sweep.
AblationReport run_ablation(const AblationConfig& cfg);

}  // namespace idproxy::eval
