#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "idproxy/store.hpp"
#include "testutil.hpp"

using namespace idproxy;
using namespace idproxy::store;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("idp_st_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

nn::VecF unit_vec(Rng& rng, int64_t d) {
  nn::VecF v(d);
  for (int64_t i = 0; i < d; ++i) v(i) = static_cast<float>(rng.normal());
  v.normalize();
  return v;
}

nn::VecF raw_vec(Rng& rng, int64_t d) {
  nn::VecF v(d);
  for (int64_t i = 0; i < d; ++i) v(i) = static_cast<float>(rng.normal());
  return v;
}

std::vector<ProxyRecord> random_records(Rng& rng, int64_t n, const StoreMeta& meta) {
  std::vector<int64_t> ids(static_cast<size_t>(2 * n));
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int64_t>(i);
  for (size_t i = ids.size() - 1; i > 0; --i)
    std::swap(ids[i], ids[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i) + 1))]);
  std::vector<ProxyRecord> out;
  for (int64_t i = 0; i < n; ++i) {
    ProxyRecord r;
    r.item_id = ids[static_cast<size_t>(i)];
    r.version = 1 + static_cast<int64_t>(rng.uniform_int(5));
    r.p_coarse = unit_vec(rng, meta.d);
    r.p_fine = raw_vec(rng, meta.d_fine);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST_CASE("ten thousand records round trip bitwise") {
  TempDir dir("roundtrip");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{8, 8, 0x1111222233334444ULL, 0x5555666677778888ULL};
  Rng rng(3);
  const auto records = random_records(rng, 10000, meta);
  const Manifest m = write_proxies(records, meta, path);
  CHECK(m.count == 10000);

  ProxyStore st(path);
  CHECK(st.size() == 10000);
  CHECK(st.record_count() == 10000);
  CHECK(st.meta().d == 8);
  CHECK(st.meta().d_fine == 8);
  CHECK(st.meta().stage1_hash == meta.stage1_hash);
  CHECK(st.meta().stage2_hash == meta.stage2_hash);

  size_t mismatches = 0;
  for (const auto& r : records) {
    const ProxyRecord got = st.lookup(r.item_id);
    if (got.version != r.version) ++mismatches;
    for (int64_t i = 0; i < meta.d; ++i)
      if (got.p_coarse(i) != r.p_coarse(i)) ++mismatches;
    for (int64_t i = 0; i < meta.d_fine; ++i)
      if (got.p_fine(i) != r.p_fine(i)) ++mismatches;
  }
  CHECK(mismatches == 0);

  const auto ids = st.ids();
  REQUIRE(ids.size() == 10000);
  CHECK(std::is_sorted(ids.begin(), ids.end()));
}

TEST_CASE("file size is header plus count times record width") {
  TempDir dir("width");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{4, 3, 7, 9};
  CHECK(record_width(meta) == 8 + 8 + 4 * 4 + 3 * 4);
  Rng rng(5);
  write_proxies(random_records(rng, 1000, meta), meta, path);

  const std::string blob = read_text_file(path);
  const size_t header_end = blob.find('\n', blob.find('\n') + 1);
  REQUIRE(header_end != std::string::npos);
  CHECK(blob.size() == header_end + 1 + 1000 * static_cast<size_t>(record_width(meta)));
}

TEST_CASE("checksum tracks the bytes exactly") {
  TempDir dir("checksum");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{6, 0, 1, 0};
  Rng rng(9);
  const auto records = random_records(rng, 50, meta);
  const Manifest m1 = write_proxies(records, meta, path);
  CHECK(m1.checksum == file_checksum(path));

  // Same bytes, same checksum.
  write_proxies(records, meta, path);
  CHECK(file_checksum(path) == m1.checksum);

  // Any single flipped byte moves it; flipping back restores it.
  const size_t at = read_text_file(path).size() - 3;
  auto flip = [&]() {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(at));
    char c = 0;
    f.get(c);
    c = static_cast<char>(c ^ 0x40);
    f.seekp(static_cast<std::streamoff>(at));
    f.put(c);
  };
  flip();
  CHECK(file_checksum(path) != m1.checksum);
  flip();
  CHECK(file_checksum(path) == m1.checksum);

  const std::string mpath = (dir.path / "manifest.json").string();
  save_manifest(m1, mpath);
  const Manifest m2 = load_manifest(mpath);
  CHECK(m2.count == m1.count);
  CHECK(m2.checksum == m1.checksum);
}

TEST_CASE("append keeps old records and the newest version wins") {
  TempDir dir("versions");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{4, 2, 0, 0};
  Rng rng(11);

  ProxyRecord first;
  first.item_id = 7;
  first.version = 1;
  first.p_coarse = unit_vec(rng, 4);
  first.p_fine = raw_vec(rng, 2);
  write_proxies({first}, meta, path);

  ProxyRecord second = first;
  second.version = 2;
  second.p_fine = raw_vec(rng, 2);
  append_proxies({second}, path);

  ProxyStore st(path);
  CHECK(st.record_count() == 2);
  CHECK(st.size() == 1);
  const ProxyRecord got = st.lookup(7);
  CHECK(got.version == 2);
  CHECK(got.p_fine(0) == second.p_fine(0));
  CHECK(got.p_fine(1) == second.p_fine(1));

  // Versions must move forward.
  ProxyRecord stale = first;
  stale.version = 2;
  try {
    append_proxies({stale}, path);
    FAIL("expected data error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::data);
  }

  // New ids append at the stored widths.
  ProxyRecord other;
  other.item_id = 9;
  other.version = 1;
  other.p_coarse = unit_vec(rng, 4);
  other.p_fine = raw_vec(rng, 2);
  append_proxies({other}, path);
  ProxyStore st2(path);
  CHECK(st2.size() == 2);
  CHECK(st2.contains(9));

  try {
    st2.lookup(12345);
    FAIL("expected not_found");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::not_found);
  }
}

TEST_CASE("writes reject malformed records and broken files fail to open") {
  TempDir dir("reject");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{4, 2, 0, 0};
  Rng rng(13);

  auto rec = [&](int64_t id) {
    ProxyRecord r;
    r.item_id = id;
    r.version = 1;
    r.p_coarse = unit_vec(rng, 4);
    r.p_fine = raw_vec(rng, 2);
    return r;
  };

  auto expect = [&](ErrClass cls, auto&& fn) {
    try {
      fn();
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.cls() == cls);
    }
  };

  expect(ErrClass::data, [&] { write_proxies({rec(1), rec(1)}, meta, path); });

  ProxyRecord wide = rec(2);
  wide.p_coarse = unit_vec(rng, 5);
  expect(ErrClass::shape, [&] { write_proxies({wide}, meta, path); });

  ProxyRecord thin = rec(3);
  thin.p_fine = raw_vec(rng, 1);
  expect(ErrClass::shape, [&] { write_proxies({thin}, meta, path); });

  ProxyRecord unnormed = rec(4);
  unnormed.p_coarse *= 2.0f;
  expect(ErrClass::data, [&] { write_proxies({unnormed}, meta, path); });

  ProxyRecord unversioned = rec(5);
  unversioned.version = 0;
  expect(ErrClass::data, [&] { write_proxies({unversioned}, meta, path); });

  expect(ErrClass::io, [&] { ProxyStore missing((dir.path / "nope.bin").string()); });
  expect(ErrClass::io, [&] { append_proxies({rec(6)}, (dir.path / "nope.bin").string()); });

  write_text_file_atomic(path, "NOTASTORE\n{}\n");
  expect(ErrClass::io, [&] { ProxyStore bad(path); });

  write_proxies({rec(7)}, meta, path);
  const std::string blob = read_text_file(path);
  write_text_file_atomic(path, blob.substr(0, blob.size() - 1));
  expect(ErrClass::io, [&] { ProxyStore truncated(path); });
}

TEST_CASE("coarse-only stores carry empty fine vectors") {
  TempDir dir("coarse");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{8, 0, 0xab, 0};
  Rng rng(17);
  ProxyRecord r;
  r.item_id = 42;
  r.version = 1;
  r.p_coarse = unit_vec(rng, 8);
  write_proxies({r}, meta, path);
  ProxyStore st(path);
  const ProxyRecord got = st.lookup(42);
  CHECK(got.p_fine.size() == 0);
  CHECK(got.p_coarse.isApprox(r.p_coarse));
}

TEST_CASE("batch generation covers unseen items and verifies artifact hashes") {
  auto gen = testutil::tiny_gen_config(23);
  const auto corpus = data::generate_corpus(gen);

  enc::EncoderConfig ec;
  ec.n_layers = 3;
  ec.d_hidden = 16;
  ec.n_heads = 2;
  ec.vocab_size = gen.vocab_size;
  ec.max_tokens = 16;
  ec.d_id = 8;
  ec.init_seed = 7;
  enc::Encoder<float> encoder(ec);

  std::vector<data::Item> probe(corpus.items.begin(), corpus.items.begin() + 32);
  const auto partition = align2::partition_layers(encoder, probe, 1);

  align2::AdaptorConfig ac;
  ac.d_pooled = 16;
  ac.d_hidden = 16;
  ac.d_coarse = 8;
  ac.d_fine = 8;
  align2::AdaptorF adaptor(ac);

  std::vector<data::Item> cold;
  for (const auto& item : corpus.items)
    if (item.is_cold) cold.push_back(item);
  REQUIRE(cold.size() > 4);
  cold.resize(4);

  const uint64_t h1 = encoder.param_hash();
  const uint64_t h2 = adaptor.param_hash();
  const auto out = batch_generate(cold, encoder, partition, adaptor, h1, h2, 3);
  REQUIRE(out.records.size() == cold.size());
  CHECK(out.items_per_sec > 0.0);

  // The records match the stage outputs bitwise and re-running changes nothing.
  const auto coarse = align::emit_coarse_proxies(cold, encoder);
  const auto fine = align2::emit_fine_proxies(cold, encoder, partition, adaptor, coarse);
  for (const auto& r : out.records) {
    CHECK(r.version == 3);
    CHECK(std::fabs(r.p_coarse.norm() - 1.0f) < 1e-4f);
    CHECK((r.p_coarse - coarse.at(r.item_id)).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((r.p_fine - fine.at(r.item_id)).cwiseAbs().maxCoeff() == 0.0f);
  }
  const auto again = batch_generate(cold, encoder, partition, adaptor, h1, h2, 3);
  for (size_t i = 0; i < out.records.size(); ++i) {
    CHECK(out.records[i].item_id == again.records[i].item_id);
    CHECK((out.records[i].p_fine - again.records[i].p_fine).cwiseAbs().maxCoeff() == 0.0f);
  }

  // Stale artifact digests are refused before any compute happens.
  try {
    batch_generate(cold, encoder, partition, adaptor, h1 + 1, h2, 3);
    FAIL("expected dependency error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::dependency);
    CHECK(std::string(e.what()).find("stage-1") != std::string::npos);
  }
  try {
    batch_generate(cold, encoder, partition, adaptor, h1, h2 ^ 0xff, 3);
    FAIL("expected dependency error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::dependency);
    CHECK(std::string(e.what()).find("stage-2") != std::string::npos);
  }
  CHECK_THROWS_AS(batch_generate({}, encoder, partition, adaptor, h1, h2, 3), Error);

  // End to end: generated records land in a store and come back by id.
  TempDir dir("gen");
  const std::string path = (dir.path / "proxies.bin").string();
  StoreMeta meta{8, 8, h1, h2};
  const Manifest m = write_proxies(out.records, meta, path);
  save_manifest(m, (dir.path / "manifest.json").string());
  ProxyStore st(path);
  CHECK(st.meta().stage1_hash == h1);
  for (const auto& item : cold) CHECK(st.contains(item.item_id));
}
