#ifndef IDPROXY_H
#define IDPROXY_H

/* C interface to the coarse-to-fine proxy pipeline. Every call returns 0 on
 * success or a nonzero error class; the message for the most recent failure
 * on the calling thread is available via idproxy_last_error(). Strings
 * returned through out-parameters are heap-allocated and must be released
 * with idproxy_free(). */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define IDPROXY_API __declspec(dllexport)
#else
#define IDPROXY_API __attribute__((visibility("default")))
#endif

enum {
  IDPROXY_OK = 0,
  IDPROXY_ERR_CONFIG = 1,
  IDPROXY_ERR_SHAPE = 2,
  IDPROXY_ERR_DATA = 3,
  IDPROXY_ERR_DEGENERATE = 4,
  IDPROXY_ERR_DEPENDENCY = 5,
  IDPROXY_ERR_NOT_FOUND = 6,
  IDPROXY_ERR_NUMERIC = 7,
  IDPROXY_ERR_IO = 8,
  IDPROXY_ERR_EMPTY_SPLIT = 9,
  IDPROXY_ERR_METRIC = 10,
  IDPROXY_ERR_INTERNAL = 11
};

IDPROXY_API const char* idproxy_version(void);

/* Last failure on this thread: message text and error class. */
IDPROXY_API const char* idproxy_last_error(void);
IDPROXY_API int idproxy_last_error_class(void);
IDPROXY_API const char* idproxy_error_class_name(int error_class);

IDPROXY_API void idproxy_free(char* p);

/* Pipeline steps. cfg_json is the declarative config text (NULL or empty for
 * the defaults); run_dir is where artifacts live; seed >= 0 overrides the
 * config seed; out_summary (optional) receives a printable summary. */
IDPROXY_API int idproxy_gen_data(const char* cfg_json, const char* run_dir,
                                 long long seed, char** out_summary);
IDPROXY_API int idproxy_train_stage1(const char* cfg_json, const char* run_dir,
                                     long long seed, char** out_summary);
IDPROXY_API int idproxy_partition_layers(const char* cfg_json, const char* run_dir,
                                         long long seed, char** out_summary);
IDPROXY_API int idproxy_train_stage2(const char* cfg_json, const char* run_dir,
                                     long long seed, char** out_summary);
/* variant: base | v1_content | v2_mlp_map | v3_coarse | v4_concat_fine |
 * v5_structure_reuse (short aliases v1..v5 accepted). */
IDPROXY_API int idproxy_train_ranker(const char* cfg_json, const char* run_dir,
                                     const char* variant, long long seed,
                                     char** out_summary);
/* split: "cold", "warm" or "both" (NULL means both). */
IDPROXY_API int idproxy_eval(const char* cfg_json, const char* run_dir,
                             const char* variant, const char* split, long long seed,
                             char** out_summary);
/* n_seeds > 0 sweeps seeds 1..n_seeds; otherwise the config list is used. */
IDPROXY_API int idproxy_ablation(const char* cfg_json, const char* run_dir,
                                 int n_seeds, char** out_summary);
IDPROXY_API int idproxy_gen_proxies(const char* cfg_json, const char* run_dir,
                                    long long seed, char** out_summary);
/* what: "proxies" or "id-table" (NULL means proxies). */
IDPROXY_API int idproxy_viz(const char* cfg_json, const char* run_dir,
                            const char* what, long long seed, char** out_summary);

/* Read access to a proxy store file. */
typedef struct idproxy_store_t idproxy_store_t;

IDPROXY_API int idproxy_store_open(const char* path, idproxy_store_t** out_store);
IDPROXY_API void idproxy_store_close(idproxy_store_t* store);
IDPROXY_API int idproxy_store_meta(const idproxy_store_t* store, int64_t* d,
                                   int64_t* d_fine, int64_t* distinct_ids,
                                   int64_t* record_count);
IDPROXY_API int idproxy_store_contains(const idproxy_store_t* store, int64_t item_id);
/* Copies the newest record for item_id. coarse needs room for d floats and
 * fine for d_fine floats; pass NULL to skip either. */
IDPROXY_API int idproxy_store_lookup(const idproxy_store_t* store, int64_t item_id,
                                     float* coarse, int64_t coarse_cap, float* fine,
                                     int64_t fine_cap, int64_t* version);

#ifdef __cplusplus
}
#endif

#endif /* IDPROXY_H */
