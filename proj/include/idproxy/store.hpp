#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "idproxy/stage1.hpp"
#include "idproxy/stage2.hpp"

// File-backed proxy embedding store mirroring the deployment loop:
// batch-compute proxies for items the ranker never trained on, write them
// out, and serve them by item id through an in-memory index built at open.
//
// File layout (all integers and floats little-endian):
//   line 1: magic "IDPXPROX1\n"
//   line 2: one JSON object + "\n" with d, d_fine, count, stage1_hash,
//           stage2_hash (hashes as 16-digit hex strings)
//   then `count` fixed-width records: int64 item_id, int64 version,
//   d float32 coarse entries, d_fine float32 fine entries.
//
// Writes always go through a temp file + rename, so readers only ever see a
// complete store. Single writer, many readers.

namespace idproxy::store {

inline constexpr const char* kStoreMagic = "IDPXPROX1";

struct ProxyRecord {
  int64_t item_id = 0;
  int64_t version = 1;
  nn::VecF p_coarse;  // unit norm, width d
  nn::VecF p_fine;    // width d_fine; empty in a coarse-only store
};

struct StoreMeta {
  int64_t d = 0;             // coarse proxy width
  int64_t d_fine = 0;        // fine proxy width, 0 = coarse-only
  uint64_t stage1_hash = 0;  // digest of the encoder that produced p_coarse
  uint64_t stage2_hash = 0;  // digest of the adaptor behind p_fine, 0 if none
};

struct Manifest {
  int64_t count = 0;      // records in the file, shadowed ids included
  uint64_t checksum = 0;  // FNV-1a over every file byte
};

// Bytes per record under a given meta.
int64_t record_width(const StoreMeta& meta);

// Creates a fresh store. Every record must match the meta widths, carry a
// unit-norm coarse proxy and a version >= 1, and no item id may repeat
// within the call.
Manifest write_proxies(const std::vector<ProxyRecord>& records, const StoreMeta& meta,
                       const std::string& path);

// Appends to an existing store, rewriting the file atomically. Re-used item
// ids must carry a strictly higher version than the one already stored.
Manifest append_proxies(const std::vector<ProxyRecord>& records, const std::string& path);

uint64_t file_checksum(const std::string& path);

// manifest.json beside the store; the timestamp is its only impure field.
void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

class ProxyStore {
 public:
  explicit ProxyStore(const std::string& path);

  const StoreMeta& meta() const { return meta_; }
  int64_t record_count() const { return count_; }
  int64_t size() const { return static_cast<int64_t>(index_.size()); }
  bool contains(int64_t item_id) const { return index_.count(item_id) > 0; }
  // Newest version of the item; absent ids raise not_found so the ranker can
  // fall back to its proxy-free path.
  ProxyRecord lookup(int64_t item_id) const;
  std::vector<int64_t> ids() const;  // ascending

 private:
  StoreMeta meta_;
  std::string payload_;                         // raw record bytes
  std::unordered_map<int64_t, size_t> index_;   // id -> offset of newest version
  int64_t count_ = 0;
};

// Proxy computation for unseen items: coarse from the aligned encoder head,
// fine through the layer partition and adaptor. Refuses to run when the live
// artifacts do not hash to what the caller recorded at training time.
struct GenerateResult {
  std::vector<ProxyRecord> records;  // item id ascending
  double items_per_sec = 0.0;        // logged by callers, never gated
};

GenerateResult batch_generate(const std::vector<data::Item>& items,
                              const enc::Encoder<float>& encoder,
                              const align2::LayerPartition& partition,
                              const align2::AdaptorF& adaptor,
                              uint64_t expected_stage1_hash, uint64_t expected_stage2_hash,
                              int64_t version = 1);

}  // namespace idproxy::store
