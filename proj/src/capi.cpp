#include "idproxy.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "idproxy/pipeline.hpp"

namespace {

thread_local std::string g_error;
thread_local int g_error_class = IDPROXY_OK;

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) return nullptr;
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

int set_error(int cls, const std::string& msg) {
  g_error = msg;
  g_error_class = cls;
  return cls;
}

// Runs fn (returning the summary string), converting exceptions to error
// classes and the summary to a malloc'd out-parameter.
template <class Fn>
int guarded(char** out_summary, Fn&& fn) {
  g_error.clear();
  g_error_class = IDPROXY_OK;
  try {
    const std::string summary = fn();
    if (out_summary) *out_summary = dup_string(summary);
    return IDPROXY_OK;
  } catch (const idproxy::Error& e) {
    return set_error(static_cast<int>(e.cls()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(IDPROXY_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(IDPROXY_ERR_INTERNAL, e.what());
  }
}

idproxy::pipe::PipelineConfig resolve_config(const char* cfg_json, long long seed) {
  auto cfg = idproxy::pipe::parse_pipeline_config(cfg_json ? cfg_json : "");
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  return cfg;
}

std::string need_run_dir(const char* run_dir) {
  if (!run_dir || !*run_dir)
    idproxy::fail(idproxy::ErrClass::config, "run_dir is required");
  return run_dir;
}

}  // namespace

extern "C" {

const char* idproxy_version(void) { return "0.1.0"; }

const char* idproxy_last_error(void) { return g_error.c_str(); }

int idproxy_last_error_class(void) { return g_error_class; }

const char* idproxy_error_class_name(int error_class) {
  return idproxy::err_class_name(static_cast<idproxy::ErrClass>(error_class));
}

void idproxy_free(char* p) { std::free(p); }

int idproxy_gen_data(const char* cfg_json, const char* run_dir, long long seed,
                     char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_gen_data(resolve_config(cfg_json, seed),
                                        need_run_dir(run_dir));
  });
}

int idproxy_train_stage1(const char* cfg_json, const char* run_dir, long long seed,
                         char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_train_stage1(resolve_config(cfg_json, seed),
                                            need_run_dir(run_dir));
  });
}

int idproxy_partition_layers(const char* cfg_json, const char* run_dir, long long seed,
                             char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_partition_layers(resolve_config(cfg_json, seed),
                                                need_run_dir(run_dir));
  });
}

int idproxy_train_stage2(const char* cfg_json, const char* run_dir, long long seed,
                         char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_train_stage2(resolve_config(cfg_json, seed),
                                            need_run_dir(run_dir));
  });
}

int idproxy_train_ranker(const char* cfg_json, const char* run_dir, const char* variant,
                         long long seed, char** out_summary) {
  return guarded(out_summary, [&] {
    if (!variant || !*variant)
      idproxy::fail(idproxy::ErrClass::config, "train-ranker: variant is required");
    return idproxy::pipe::step_train_ranker(resolve_config(cfg_json, seed),
                                            need_run_dir(run_dir),
                                            idproxy::rank::variant_from_name(variant));
  });
}

int idproxy_eval(const char* cfg_json, const char* run_dir, const char* variant,
                 const char* split, long long seed, char** out_summary) {
  return guarded(out_summary, [&] {
    if (!variant || !*variant)
      idproxy::fail(idproxy::ErrClass::config, "eval: variant is required");
    return idproxy::pipe::step_eval(resolve_config(cfg_json, seed), need_run_dir(run_dir),
                                    idproxy::rank::variant_from_name(variant),
                                    split && *split ? split : "both");
  });
}

int idproxy_ablation(const char* cfg_json, const char* run_dir, int n_seeds,
                     char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_ablation(resolve_config(cfg_json, -1),
                                        need_run_dir(run_dir), n_seeds);
  });
}

int idproxy_gen_proxies(const char* cfg_json, const char* run_dir, long long seed,
                        char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_gen_proxies(resolve_config(cfg_json, seed),
                                           need_run_dir(run_dir));
  });
}

int idproxy_viz(const char* cfg_json, const char* run_dir, const char* what,
                long long seed, char** out_summary) {
  return guarded(out_summary, [&] {
    return idproxy::pipe::step_viz(resolve_config(cfg_json, seed), need_run_dir(run_dir),
                                   what && *what ? what : "proxies");
  });
}

struct idproxy_store_t {
  idproxy::store::ProxyStore impl;
};

int idproxy_store_open(const char* path, idproxy_store_t** out_store) {
  if (!out_store) return set_error(IDPROXY_ERR_CONFIG, "out_store is required");
  *out_store = nullptr;
  char* ignored = nullptr;
  const int rc = guarded(&ignored, [&]() -> std::string {
    if (!path || !*path) idproxy::fail(idproxy::ErrClass::config, "path is required");
    *out_store = new idproxy_store_t{idproxy::store::ProxyStore(path)};
    return "";
  });
  idproxy_free(ignored);
  return rc;
}

void idproxy_store_close(idproxy_store_t* store) { delete store; }

int idproxy_store_meta(const idproxy_store_t* store, int64_t* d, int64_t* d_fine,
                       int64_t* distinct_ids, int64_t* record_count) {
  if (!store) return set_error(IDPROXY_ERR_CONFIG, "store is required");
  if (d) *d = store->impl.meta().d;
  if (d_fine) *d_fine = store->impl.meta().d_fine;
  if (distinct_ids) *distinct_ids = store->impl.size();
  if (record_count) *record_count = store->impl.record_count();
  return IDPROXY_OK;
}

int idproxy_store_contains(const idproxy_store_t* store, int64_t item_id) {
  return store && store->impl.contains(item_id) ? 1 : 0;
}

int idproxy_store_lookup(const idproxy_store_t* store, int64_t item_id, float* coarse,
                         int64_t coarse_cap, float* fine, int64_t fine_cap,
                         int64_t* version) {
  if (!store) return set_error(IDPROXY_ERR_CONFIG, "store is required");
  char* ignored = nullptr;
  const int rc = guarded(&ignored, [&]() -> std::string {
    const auto rec = store->impl.lookup(item_id);
    if (coarse) {
      if (coarse_cap < rec.p_coarse.size())
        idproxy::fail(idproxy::ErrClass::shape,
                      "coarse buffer needs " + std::to_string(rec.p_coarse.size()) +
                          " floats");
      std::memcpy(coarse, rec.p_coarse.data(),
                  static_cast<size_t>(rec.p_coarse.size()) * sizeof(float));
    }
    if (fine) {
      if (fine_cap < rec.p_fine.size())
        idproxy::fail(idproxy::ErrClass::shape,
                      "fine buffer needs " + std::to_string(rec.p_fine.size()) + " floats");
      std::memcpy(fine, rec.p_fine.data(),
                  static_cast<size_t>(rec.p_fine.size()) * sizeof(float));
    }
    if (version) *version = rec.version;
    return "";
  });
  idproxy_free(ignored);
  return rc;
}

}  // extern "C"
