#pragma once

#include <string>

#include "idproxy/optim.hpp"

// Flat named-tensor checkpoint: magic line, one JSON header line (config hash
// + tensor names/shapes), then raw little-endian float32 payloads in header
// order. Loading validates the hash and every shape against the live set.

namespace idproxy::nn {

inline constexpr const char* kCkptMagic = "IDPXCKPT1";

namespace detail {
std::string ckpt_header_json(uint64_t config_hash,
                             const std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>>& tensors);
void ckpt_parse(const std::string& blob, const std::string& path, uint64_t expected_hash,
                std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>>& tensors,
                const char*& payload, size_t& payload_size);
}  // namespace detail

template <class S>
void save_checkpoint(const ParamSet<S>& params, uint64_t config_hash,
                     const std::string& path) {
  std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> tensors;
  size_t n_floats = 0;
  for (const auto& e : params.entries()) {
    tensors.push_back({e.name, {e.w.rows(), e.w.cols()}});
    n_floats += static_cast<size_t>(e.w.size());
  }
  std::string blob = detail::ckpt_header_json(config_hash, tensors);
  blob.reserve(blob.size() + n_floats * sizeof(float));
  for (const auto& e : params.entries()) {
    for (Eigen::Index i = 0; i < e.w.size(); ++i) {
      const float f = static_cast<float>(e.w.data()[i]);
      blob.append(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
  write_text_file_atomic(path, blob);
}

template <class S>
void load_checkpoint(ParamSet<S>& params, uint64_t expected_config_hash,
                     const std::string& path) {
  const std::string blob = read_text_file(path);
  std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> tensors;
  const char* payload = nullptr;
  size_t payload_size = 0;
  detail::ckpt_parse(blob, path, expected_config_hash, tensors, payload, payload_size);

  size_t need = 0;
  for (const auto& [name, shape] : tensors)
    need += static_cast<size_t>(shape.first) * static_cast<size_t>(shape.second);
  if (payload_size != need * sizeof(float))
    fail(ErrClass::io, "checkpoint payload size mismatch: " + path);

  const char* at = payload;
  for (const auto& [name, shape] : tensors) {
    if (!params.has(name))
      fail(ErrClass::data, "checkpoint tensor not in model: " + name);
    auto& w = params.w(name);
    if (w.rows() != shape.first || w.cols() != shape.second)
      fail(ErrClass::shape, "checkpoint shape mismatch for " + name);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      float f;
      std::memcpy(&f, at, sizeof(float));
      at += sizeof(float);
      w.data()[i] = static_cast<S>(f);
    }
  }
}

}  // namespace idproxy::nn
