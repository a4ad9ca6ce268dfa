// Command-line front end for the proxy pipeline. Talks to the core strictly
// through the C interface; prints each step's summary on success and a
// single machine-parsable `error[<class>]: message` line on failure, with
// the error class as the exit code.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "idproxy.h"

namespace {

int finish(int rc, char* summary) {
  if (rc == IDPROXY_OK) {
    if (summary && *summary) std::printf("%s\n", summary);
  } else {
    std::fprintf(stderr, "error[%s]: %s\n", idproxy_error_class_name(rc),
                 idproxy_last_error());
  }
  idproxy_free(summary);
  return rc;
}

int config_failure(const std::string& msg) {
  std::fprintf(stderr, "error[config]: %s\n", msg.c_str());
  return IDPROXY_ERR_CONFIG;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("coarse-to-fine proxy pipeline (") + idproxy_version() + ")"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string run_dir = "run";
  long long seed = -1;
  app.add_option("--config", config_path, "declarative JSON config file");
  app.add_option("--run", run_dir, "run directory for artifacts");
  app.add_option("--seed", seed,
                 "seed override (IDPROXY_SEED beats this, which beats the config)");

  std::string variant;
  std::string split = "both";
  std::string what = "proxies";
  int n_seeds = 0;

  auto* c_gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  auto* c_s1 = app.add_subcommand("train-stage1",
                                  "align content proxies with the ID embedding space");
  auto* c_pl = app.add_subcommand("partition-layers",
                                  "cluster encoder layers and pick the medoids");
  auto* c_s2 = app.add_subcommand(
      "train-stage2", "train the fine adaptor jointly with a structure-reuse ranker");
  auto* c_tr = app.add_subcommand("train-ranker", "train one ranker variant");
  c_tr->add_option("--variant", variant, "base|v1|v2|v3|v4|v5 or full names")->required();
  auto* c_ev = app.add_subcommand("eval", "report AUC on an eval split");
  c_ev->add_option("--variant", variant, "trained variant to score")->required();
  c_ev->add_option("--split", split, "cold|warm|both");
  auto* c_ab = app.add_subcommand("ablation", "run the full variant sweep");
  c_ab->add_option("--seeds", n_seeds, "sweep seeds 1..N (default: config list)");
  auto* c_gp = app.add_subcommand("gen-proxies",
                                  "batch-compute proxies for unseen items");
  auto* c_vz = app.add_subcommand("viz", "write a 2-d projection csv");
  c_vz->add_option("--what", what, "proxies|id-table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return config_failure(e.what());
  }

  std::string cfg_text;
  if (!config_path.empty()) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) return config_failure("cannot read config file: " + config_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    cfg_text = ss.str();
  }

  if (const char* env = std::getenv("IDPROXY_SEED")) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (!end || *end != '\0' || v < 0)
      return config_failure("IDPROXY_SEED must be a non-negative integer");
    seed = v;
  }

  const char* cfg = cfg_text.c_str();
  const char* run = run_dir.c_str();
  char* summary = nullptr;
  int rc = IDPROXY_ERR_INTERNAL;
  if (app.got_subcommand(c_gen)) {
    rc = idproxy_gen_data(cfg, run, seed, &summary);
  } else if (app.got_subcommand(c_s1)) {
    rc = idproxy_train_stage1(cfg, run, seed, &summary);
  } else if (app.got_subcommand(c_pl)) {
    rc = idproxy_partition_layers(cfg, run, seed, &summary);
  } else if (app.got_subcommand(c_s2)) {
    rc = idproxy_train_stage2(cfg, run, seed, &summary);
  } else if (app.got_subcommand(c_tr)) {
    rc = idproxy_train_ranker(cfg, run, variant.c_str(), seed, &summary);
  } else if (app.got_subcommand(c_ev)) {
    rc = idproxy_eval(cfg, run, variant.c_str(), split.c_str(), seed, &summary);
  } else if (app.got_subcommand(c_ab)) {
    rc = idproxy_ablation(cfg, run, n_seeds, &summary);
  } else if (app.got_subcommand(c_gp)) {
    rc = idproxy_gen_proxies(cfg, run, seed, &summary);
  } else if (app.got_subcommand(c_vz)) {
    rc = idproxy_viz(cfg, run, what.c_str(), seed, &summary);
  }
  return finish(rc, summary);
}
