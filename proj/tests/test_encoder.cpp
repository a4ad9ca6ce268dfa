#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <filesystem>
#include <unistd.h>

#include "composite_checks.hpp"
#include "idproxy/encoder.hpp"

using namespace idproxy;
using namespace idproxy::enc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("idp_enc_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

data::Item make_item(int64_t id, int n_tokens, uint64_t seed = 3) {
  data::Item item;
  item.item_id = id;
  Rng rng(seed);
  for (int t = 0; t < n_tokens; ++t)
    item.content_tokens.push_back(static_cast<int32_t>(rng.uniform_int(500)));
  item.image_patches.resize(data::kNumPatches, data::kPatchDim);
  nn::fill_normal(item.image_patches, rng, 0.5);
  return item;
}

}  // namespace

TEST_CASE("prompt layout: scaffold plus text, one summary slot") {
  EncoderConfig cfg;  // defaults: vocab 500, max_tokens 32
  const auto item = make_item(7, 16);
  const PromptTokens p = build_prompt(item, cfg);

  // [BOS] 4 patches, 16 text, 5 suffix words, "[QUOTE] [EMB] [QUOTE]", [EOS]
  CHECK(p.length() == 30);
  CHECK(p.ids.front() == cfg.tok_bos());
  CHECK(p.ids.back() == cfg.tok_eos());
  for (int i = 1; i <= 4; ++i) CHECK(p.ids[static_cast<size_t>(i)] == PromptTokens::kPatchSlot);
  for (int t = 0; t < 16; ++t)
    CHECK(p.ids[static_cast<size_t>(5 + t)] == item.content_tokens[static_cast<size_t>(t)]);
  for (int i = 0; i < EncoderConfig::kSuffixLen; ++i)
    CHECK(p.ids[static_cast<size_t>(21 + i)] == cfg.tok_suffix(i));
  CHECK(p.emb_pos == 27);
  CHECK(p.ids[26] == cfg.tok_quote());
  CHECK(p.ids[27] == cfg.tok_emb());
  CHECK(p.ids[28] == cfg.tok_quote());

  int n_emb = 0;
  for (int32_t id : p.ids) n_emb += (id == cfg.tok_emb());
  CHECK(n_emb == 1);
  CHECK(p.patches == item.image_patches);
}

TEST_CASE("prompt truncation caps text at the length budget") {
  EncoderConfig cfg;
  const PromptTokens p = build_prompt(make_item(1, 40), cfg);
  CHECK(p.length() == cfg.max_tokens);  // 14 scaffold + 18 text
  const PromptTokens q = build_prompt(make_item(2, 1), cfg);
  CHECK(q.length() == 15);
}

TEST_CASE("identical content gives identical prompts regardless of item id") {
  EncoderConfig cfg;
  data::Item a = make_item(10, 12), b = make_item(99, 12);
  b.content_tokens = a.content_tokens;
  b.image_patches = a.image_patches;
  const PromptTokens pa = build_prompt(a, cfg), pb = build_prompt(b, cfg);
  CHECK(pa.ids == pb.ids);
  CHECK(pa.patches == pb.patches);
  CHECK(pa.emb_pos == pb.emb_pos);
}

TEST_CASE("prompt errors carry class and item id") {
  EncoderConfig cfg;
  data::Item empty = make_item(41, 0);
  CHECK_THROWS_WITH_AS(build_prompt(empty, cfg), doctest::Contains("item 41"), Error);
  try {
    build_prompt(empty, cfg);
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::data);
  }

  data::Item bad_grid = make_item(42, 8);
  bad_grid.image_patches.resize(2, data::kPatchDim);
  try {
    build_prompt(bad_grid, cfg);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::shape);
  }

  data::Item oob = make_item(43, 8);
  oob.content_tokens[3] = static_cast<int32_t>(cfg.vocab_size);
  CHECK_THROWS_WITH_AS(build_prompt(oob, cfg), doctest::Contains("item 43"), Error);

  EncoderConfig cramped;
  cramped.max_tokens = 14;  // scaffold alone is 14 tokens
  try {
    build_prompt(make_item(44, 4), cramped);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::config);
  }
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("n_layers"), Error);
  cfg = EncoderConfig{};
  cfg.d_hidden = 30;  // not divisible by 4 heads
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("divisible"), Error);
  cfg = EncoderConfig{};
  CHECK(cfg.n_embeddings() == 509);
  CHECK(cfg.tok_suffix(4) < cfg.n_embeddings());
}

TEST_CASE("zeroed residual branches pass the embeddings through every layer") {
  auto cfg = testing::tiny_encoder_config();
  EncoderD encoder(cfg);
  for (auto& e : encoder.params().entries()) {
    const bool residual_out = e.name.find("attn.wo") != std::string::npos ||
                              e.name.find("attn.bo") != std::string::npos ||
                              e.name.find("mlp.w2") != std::string::npos ||
                              e.name.find("mlp.b2") != std::string::npos;
    if (residual_out) e.w.setZero();
  }
  Rng rng(5);
  const auto prompts = testing::tiny_prompt_batch(cfg, 2, rng);
  const auto hs = encoder.encode(prompts);
  REQUIRE(hs.layers.size() == static_cast<size_t>(cfg.n_layers) + 1);
  for (size_t l = 1; l < hs.layers.size(); ++l)
    CHECK((hs.layers[l] - hs.layers[0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("token order reaches the final layer") {
  auto cfg = testing::tiny_encoder_config();
  EncoderD encoder(cfg);
  data::Item item = make_item(1, 2);
  item.content_tokens = {3, 9};
  data::Item swapped = item;
  swapped.content_tokens = {9, 3};
  const auto ha = encoder.encode({build_prompt(item, cfg)});
  const auto hb = encoder.encode({build_prompt(swapped, cfg)});
  CHECK((ha.layers.back() - hb.layers.back()).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("encode is deterministic and validates batch shape") {
  auto cfg = testing::tiny_encoder_config();
  EncoderD encoder(cfg);
  Rng rng(8);
  const auto prompts = testing::tiny_prompt_batch(cfg, 3, rng);
  const auto a = encoder.encode(prompts);
  const auto b = encoder.encode(prompts);
  for (size_t l = 0; l < a.layers.size(); ++l) CHECK(a.layers[l] == b.layers[l]);

  auto ragged = prompts;
  ragged[1].ids.push_back(static_cast<int32_t>(cfg.tok_eos()));
  try {
    encoder.encode(ragged);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::shape);
  }

  auto oob = prompts;
  oob[0].ids[6] = static_cast<int32_t>(cfg.n_embeddings());
  try {
    encoder.encode(oob);
    FAIL("expected data error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::data);
  }
}

TEST_CASE("pool_g weights form a convex combination of token states") {
  auto cfg = testing::tiny_encoder_config();
  EncoderD encoder(cfg);
  Rng rng(13);

  nn::MatD h(2 * 5, cfg.d_hidden);
  nn::fill_normal(h, rng, 1.0);
  nn::MatD attn;
  const nn::MatD z = encoder.pool_g(h, 2, 5, &attn);
  REQUIRE(attn.rows() == 2);
  REQUIRE(attn.cols() == 5);
  for (int b = 0; b < 2; ++b) {
    CHECK(attn.row(b).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(attn.row(b).minCoeff() > 0.0);
    const nn::MatD manual = attn.row(b) * h.middleRows(b * 5, 5);
    CHECK((z.row(b) - manual.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }

  // A single token is returned as-is; identical tokens pool to themselves.
  nn::MatD one(1, cfg.d_hidden);
  nn::fill_normal(one, rng, 1.0);
  CHECK((encoder.pool_g(one, 1, 1) - one).cwiseAbs().maxCoeff() == 0.0);

  nn::MatD same(4, cfg.d_hidden);
  same.rowwise() = one.row(0);
  CHECK((encoder.pool_g(same, 1, 4) - one).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(encoder.pool_g(h, 3, 4), Error);
}

TEST_CASE("phi projects onto the unit sphere") {
  auto cfg = testing::tiny_encoder_config();
  EncoderD encoder(cfg);
  Rng rng(17);
  nn::MatD z(6, cfg.d_hidden);
  nn::fill_normal(z, rng, 2.0);
  const nn::MatD out = encoder.project_phi(z);
  REQUIRE(out.cols() == cfg.d_id);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    CHECK(std::fabs(out.row(i).norm() - 1.0) < 1e-6);

  encoder.params().w("phi.w2").setZero();
  encoder.params().w("phi.b2").setZero();
  CHECK_THROWS_WITH_AS(encoder.project_phi(z, nullptr, "item 42"),
                       doctest::Contains("item 42"), Error);
}

TEST_CASE("checkpoint round trip restores parameters exactly") {
  TempDir dir("ckpt");
  const std::string path = (dir.path / "enc.ckpt").string();

  auto cfg = testing::tiny_encoder_config();
  EncoderF encoder(cfg);
  const uint64_t before = encoder.param_hash();
  encoder.save(path);

  encoder.params().w("phi.w1").setConstant(0.25f);
  CHECK(encoder.param_hash() != before);
  encoder.load(path);
  CHECK(encoder.param_hash() == before);

  auto other = cfg;
  other.init_seed = 12345;
  EncoderF stranger(other);
  try {
    stranger.load(path);
    FAIL("expected config-hash mismatch");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::data);
    CHECK(std::string(e.what()).find("configuration") != std::string::npos);
  }

  write_text_file_atomic(path, "not a checkpoint");
  try {
    encoder.load(path);
    FAIL("expected io error");
  } catch (const Error& e) {
    CHECK(e.cls() == ErrClass::io);
  }
}

TEST_CASE("composite chain gradients match central differences") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = testing::run_encoder_chain_check(10, 21);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(rep.n_checked == 10);
  CHECK(rep.max_rel_err <= 1e-4);
  CHECK(secs < 30.0);
}
