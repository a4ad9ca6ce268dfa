#include "idproxy/store.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <unordered_set>

#include "json.hpp"

namespace idproxy::store {

using json = nlohmann::ordered_json;

namespace {

void append_i64(std::string& out, int64_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void append_vec(std::string& out, const nn::VecF& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const float f = v(i);
    out.append(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

std::string hash_hex(uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

uint64_t hash_from_hex(const std::string& s, const std::string& path) {
  try {
    return std::stoull(s, nullptr, 16);
  } catch (const std::exception&) {
    fail(ErrClass::io, "store header has a malformed hash: " + path);
  }
}

void check_record(const ProxyRecord& r, const StoreMeta& meta) {
  if (r.p_coarse.size() != meta.d)
    fail(ErrClass::shape, "store: item " + std::to_string(r.item_id) + " coarse width " +
                              std::to_string(r.p_coarse.size()) + " != header " +
                              std::to_string(meta.d));
  if (r.p_fine.size() != meta.d_fine)
    fail(ErrClass::shape, "store: item " + std::to_string(r.item_id) + " fine width " +
                              std::to_string(r.p_fine.size()) + " != header " +
                              std::to_string(meta.d_fine));
  if (r.version < 1)
    fail(ErrClass::data, "store: item " + std::to_string(r.item_id) + " version must be >= 1");
  const float norm = r.p_coarse.norm();
  if (std::fabs(norm - 1.0f) > 1e-3f)
    fail(ErrClass::data, "store: item " + std::to_string(r.item_id) +
                             " coarse proxy is not unit norm (|p| = " + std::to_string(norm) + ")");
}

std::string render_store(const std::vector<ProxyRecord>& records, const StoreMeta& meta,
                         const std::string& existing_payload, int64_t existing_count) {
  json header;
  header["d"] = meta.d;
  header["d_fine"] = meta.d_fine;
  header["count"] = existing_count + static_cast<int64_t>(records.size());
  header["stage1_hash"] = hash_hex(meta.stage1_hash);
  header["stage2_hash"] = hash_hex(meta.stage2_hash);

  std::string out(kStoreMagic);
  out += "\n";
  out += header.dump();
  out += "\n";
  out.reserve(out.size() + existing_payload.size() +
              records.size() * static_cast<size_t>(record_width(meta)));
  out += existing_payload;
  for (const auto& r : records) {
    append_i64(out, r.item_id);
    append_i64(out, r.version);
    append_vec(out, r.p_coarse);
    append_vec(out, r.p_fine);
  }
  return out;
}

Manifest finish_write(const std::string& blob, const std::string& path, int64_t count) {
  write_text_file_atomic(path, blob);
  Manifest m;
  m.count = count;
  m.checksum = fnv64(blob);
  return m;
}

}  // namespace

int64_t record_width(const StoreMeta& meta) {
  return 2 * static_cast<int64_t>(sizeof(int64_t)) +
         (meta.d + meta.d_fine) * static_cast<int64_t>(sizeof(float));
}

Manifest write_proxies(const std::vector<ProxyRecord>& records, const StoreMeta& meta,
                       const std::string& path) {
  if (meta.d < 1) fail(ErrClass::config, "store: coarse width must be >= 1");
  if (meta.d_fine < 0) fail(ErrClass::config, "store: fine width must be >= 0");
  std::unordered_set<int64_t> seen;
  for (const auto& r : records) {
    check_record(r, meta);
    if (!seen.insert(r.item_id).second)
      fail(ErrClass::data, "store: duplicate item id " + std::to_string(r.item_id) +
                               " within one write");
  }
  const std::string blob = render_store(records, meta, "", 0);
  return finish_write(blob, path, static_cast<int64_t>(records.size()));
}

Manifest append_proxies(const std::vector<ProxyRecord>& records, const std::string& path) {
  ProxyStore existing(path);
  std::unordered_set<int64_t> seen;
  for (const auto& r : records) {
    check_record(r, existing.meta());
    if (!seen.insert(r.item_id).second)
      fail(ErrClass::data, "store: duplicate item id " + std::to_string(r.item_id) +
                               " within one write");
    if (existing.contains(r.item_id)) {
      const int64_t have = existing.lookup(r.item_id).version;
      if (r.version <= have)
        fail(ErrClass::data, "store: item " + std::to_string(r.item_id) + " version " +
                                 std::to_string(r.version) + " is not above the stored " +
                                 std::to_string(have));
    }
  }
  const std::string old_blob = read_text_file(path);
  const std::string payload = old_blob.substr(
      old_blob.size() -
      static_cast<size_t>(existing.record_count() * record_width(existing.meta())));
  const std::string blob = render_store(records, existing.meta(), payload,
                                        existing.record_count());
  return finish_write(blob, path,
                      existing.record_count() + static_cast<int64_t>(records.size()));
}

uint64_t file_checksum(const std::string& path) { return fnv64(read_text_file(path)); }

void save_manifest(const Manifest& m, const std::string& path) {
  json j;
  j["count"] = m.count;
  j["checksum"] = hash_hex(m.checksum);
  j["created_utc"] = utc_timestamp();
  write_text_file_atomic(path, j.dump(2) + "\n");
}

Manifest load_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    fail(ErrClass::io, "manifest parse failed: " + path + ": " + e.what());
  }
  Manifest m;
  m.count = j.at("count").get<int64_t>();
  m.checksum = hash_from_hex(j.at("checksum").get<std::string>(), path);
  return m;
}

ProxyStore::ProxyStore(const std::string& path) {
  const std::string blob = read_text_file(path);
  const size_t magic_end = blob.find('\n');
  if (magic_end == std::string::npos || blob.substr(0, magic_end) != kStoreMagic)
    fail(ErrClass::io, "not a proxy store: " + path);
  const size_t header_end = blob.find('\n', magic_end + 1);
  if (header_end == std::string::npos) fail(ErrClass::io, "store header missing: " + path);

  json header;
  try {
    header = json::parse(blob.substr(magic_end + 1, header_end - magic_end - 1));
  } catch (const json::exception& e) {
    fail(ErrClass::io, "store header parse failed: " + path + ": " + e.what());
  }
  meta_.d = header.at("d").get<int64_t>();
  meta_.d_fine = header.at("d_fine").get<int64_t>();
  count_ = header.at("count").get<int64_t>();
  meta_.stage1_hash = hash_from_hex(header.at("stage1_hash").get<std::string>(), path);
  meta_.stage2_hash = hash_from_hex(header.at("stage2_hash").get<std::string>(), path);
  if (meta_.d < 1 || meta_.d_fine < 0 || count_ < 0)
    fail(ErrClass::io, "store header out of range: " + path);

  payload_ = blob.substr(header_end + 1);
  const int64_t width = record_width(meta_);
  if (static_cast<int64_t>(payload_.size()) != count_ * width)
    fail(ErrClass::io, "store payload is " + std::to_string(payload_.size()) +
                           " bytes, header promises " + std::to_string(count_ * width) + ": " +
                           path);

  std::unordered_map<int64_t, int64_t> newest;
  for (int64_t i = 0; i < count_; ++i) {
    const size_t at = static_cast<size_t>(i * width);
    int64_t id = 0, version = 0;
    std::memcpy(&id, payload_.data() + at, sizeof(id));
    std::memcpy(&version, payload_.data() + at + sizeof(id), sizeof(version));
    auto it = newest.find(id);
    if (it == newest.end() || version >= it->second) {
      newest[id] = version;
      index_[id] = at;
    }
  }
}

ProxyRecord ProxyStore::lookup(int64_t item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end())
    fail(ErrClass::not_found, "store: item " + std::to_string(item_id) + " not present");
  ProxyRecord r;
  const char* at = payload_.data() + it->second;
  std::memcpy(&r.item_id, at, sizeof(r.item_id));
  at += sizeof(r.item_id);
  std::memcpy(&r.version, at, sizeof(r.version));
  at += sizeof(r.version);
  r.p_coarse.resize(meta_.d);
  std::memcpy(r.p_coarse.data(), at, static_cast<size_t>(meta_.d) * sizeof(float));
  at += static_cast<size_t>(meta_.d) * sizeof(float);
  r.p_fine.resize(meta_.d_fine);
  if (meta_.d_fine > 0)
    std::memcpy(r.p_fine.data(), at, static_cast<size_t>(meta_.d_fine) * sizeof(float));
  return r;
}

std::vector<int64_t> ProxyStore::ids() const {
  std::vector<int64_t> out;
  out.reserve(index_.size());
  for (const auto& [id, _] : index_) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

GenerateResult batch_generate(const std::vector<data::Item>& items,
                              const enc::Encoder<float>& encoder,
                              const align2::LayerPartition& partition,
                              const align2::AdaptorF& adaptor,
                              uint64_t expected_stage1_hash, uint64_t expected_stage2_hash,
                              int64_t version) {
  if (items.empty()) fail(ErrClass::data, "batch_generate: no items");
  if (version < 1) fail(ErrClass::config, "batch_generate: version must be >= 1");
  if (encoder.param_hash() != expected_stage1_hash)
    fail(ErrClass::dependency,
         "batch_generate: encoder hash " + hash_hex(encoder.param_hash()) +
             " does not match the recorded stage-1 artifact " + hash_hex(expected_stage1_hash));
  if (adaptor.param_hash() != expected_stage2_hash)
    fail(ErrClass::dependency,
         "batch_generate: adaptor hash " + hash_hex(adaptor.param_hash()) +
             " does not match the recorded stage-2 artifact " + hash_hex(expected_stage2_hash));

  const auto t0 = std::chrono::steady_clock::now();
  const auto coarse = align::emit_coarse_proxies(items, encoder);
  const auto fine = align2::emit_fine_proxies(items, encoder, partition, adaptor, coarse);
  GenerateResult out;
  out.records.reserve(items.size());
  for (const auto& [id, pc] : coarse) {
    ProxyRecord r;
    r.item_id = id;
    r.version = version;
    r.p_coarse = pc;
    r.p_fine = fine.at(id);
    out.records.push_back(std::move(r));
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  out.items_per_sec = secs > 0.0 ? static_cast<double>(items.size()) / secs : 0.0;
  return out;
}

}  // namespace idproxy::store
