#pragma once

#include <string>

#include "idproxy/evalkit.hpp"
#include "idproxy/store.hpp"

// Run-directory orchestration: each step consumes the artifacts of earlier
// steps, validates they exist (naming the subcommand that produces them),
// and writes its own outputs plus a timestamped manifest. Everything except
// the manifests is byte-identical across reruns with the same config, so a
// run directory always carries enough metadata to reproduce itself.
//
// Layout under the run directory:
//   data/     items.jsonl users.jsonl interactions.jsonl id_table.jsonl meta.json
//   stage1/   encoder.ckpt coarse_proxies.bin metrics.json
//   stage2/   partition.json adaptor.ckpt fine_proxies.bin metrics.json
//   ranker_<variant>/  ranker.ckpt [adaptor.ckpt] metrics.json
//   eval/     scores_<variant>_<split>.jsonl eval_<variant>.json
//   proxies/  proxies.bin
//   report/   report.json report.md projection.csv
// plus manifest.json in every step directory (the only files with clocks).

namespace idproxy::pipe {

struct PipelineConfig {
  eval::AblationConfig ab;  // every model / training hyperparameter
  uint64_t seed = 1;        // single-run seed; the ablation uses ab.seeds

  void validate() const { ab.validate(); }
};

// Desk-scale defaults: the full synthetic corpus and the training settings
// the acceptance gates are pinned against.
PipelineConfig default_pipeline_config();

// Parses the declarative JSON config (sections: seed, generation, stage1,
// stage2, ranker, eval). Absent keys keep their defaults; unknown keys are
// config errors. An empty string yields the defaults.
PipelineConfig parse_pipeline_config(const std::string& json_text);
std::string pipeline_config_json(const PipelineConfig& cfg);

// Steps. Each returns a short human-readable summary for the caller to
// print; artifacts land in the run directory.
std::string step_gen_data(const PipelineConfig& cfg, const std::string& run_dir);
std::string step_train_stage1(const PipelineConfig& cfg, const std::string& run_dir);
std::string step_partition_layers(const PipelineConfig& cfg, const std::string& run_dir);
std::string step_train_stage2(const PipelineConfig& cfg, const std::string& run_dir);
std::string step_train_ranker(const PipelineConfig& cfg, const std::string& run_dir,
                              rank::Variant variant);
// split: "cold", "warm" or "both"; emits one "auc_<split>=..." line each.
std::string step_eval(const PipelineConfig& cfg, const std::string& run_dir,
                      rank::Variant variant, const std::string& split);
// n_seeds > 0 replaces the configured seed list with 1..n_seeds.
std::string step_ablation(const PipelineConfig& cfg, const std::string& run_dir,
                          int64_t n_seeds);
std::string step_gen_proxies(const PipelineConfig& cfg, const std::string& run_dir);
// what: "proxies" (coarse proxy space) or "id-table" (preprocessed targets).
std::string step_viz(const PipelineConfig& cfg, const std::string& run_dir,
                     const std::string& what);

}  // namespace idproxy::pipe
