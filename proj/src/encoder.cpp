#include "idproxy/encoder.hpp"

#include "json.hpp"

namespace idproxy::enc {

using json = nlohmann::ordered_json;

std::string EncoderConfig::canonical_json() const {
  json j;
  j["n_layers"] = n_layers;
  j["d_hidden"] = d_hidden;
  j["n_heads"] = n_heads;
  j["vocab_size"] = vocab_size;
  j["max_tokens"] = max_tokens;
  j["d_id"] = d_id;
  j["init_seed"] = init_seed;
  return j.dump();
}

uint64_t EncoderConfig::hash() const { return fnv64(canonical_json()); }

PromptTokens build_prompt(const data::Item& item, const EncoderConfig& cfg) {
  if (item.content_tokens.empty())
    fail(ErrClass::data,
         "build_prompt: item " + std::to_string(item.item_id) + " has no content tokens");
  if (item.image_patches.rows() != data::kNumPatches ||
      item.image_patches.cols() != data::kPatchDim)
    fail(ErrClass::shape, "build_prompt: item " + std::to_string(item.item_id) +
                              " patch grid is not " + std::to_string(data::kNumPatches) +
                              "x" + std::to_string(data::kPatchDim));

  // [BOS] patches text... suffix-literal " [EMB] " [EOS]
  constexpr int64_t kTail = EncoderConfig::kSuffixLen + 4;  // suffix + "  [EMB]  " + EOS
  const int64_t scaffold = 1 + data::kNumPatches + kTail;
  const int64_t text_budget = cfg.max_tokens - scaffold;
  if (text_budget < 1)
    fail(ErrClass::config, "build_prompt: max_tokens leaves no room for text tokens");
  const int64_t n_text =
      std::min<int64_t>(static_cast<int64_t>(item.content_tokens.size()), text_budget);

  PromptTokens p;
  p.ids.reserve(static_cast<size_t>(scaffold + n_text));
  p.ids.push_back(static_cast<int32_t>(cfg.tok_bos()));
  for (int i = 0; i < data::kNumPatches; ++i) p.ids.push_back(PromptTokens::kPatchSlot);
  for (int64_t t = 0; t < n_text; ++t) {
    const int32_t id = item.content_tokens[static_cast<size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size)
      fail(ErrClass::data, "build_prompt: token " + std::to_string(id) +
                               " outside vocab of item " + std::to_string(item.item_id));
    p.ids.push_back(id);
  }
  for (int i = 0; i < EncoderConfig::kSuffixLen; ++i)
    p.ids.push_back(static_cast<int32_t>(cfg.tok_suffix(i)));
  p.ids.push_back(static_cast<int32_t>(cfg.tok_quote()));
  p.emb_pos = static_cast<int64_t>(p.ids.size());
  p.ids.push_back(static_cast<int32_t>(cfg.tok_emb()));
  p.ids.push_back(static_cast<int32_t>(cfg.tok_quote()));
  p.ids.push_back(static_cast<int32_t>(cfg.tok_eos()));
  p.patches = item.image_patches;
  return p;
}

}  // namespace idproxy::enc
