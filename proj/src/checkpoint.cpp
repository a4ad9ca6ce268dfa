#include "idproxy/checkpoint.hpp"

#include "json.hpp"

namespace idproxy::nn::detail {

using json = nlohmann::ordered_json;

std::string ckpt_header_json(
    uint64_t config_hash,
    const std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>>& tensors) {
  json j;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash));
  j["config_hash"] = buf;
  json list = json::array();
  for (const auto& [name, shape] : tensors)
    list.push_back({{"name", name}, {"rows", shape.first}, {"cols", shape.second}});
  j["tensors"] = list;
  return std::string(kCkptMagic) + "\n" + j.dump() + "\n";
}

void ckpt_parse(const std::string& blob, const std::string& path, uint64_t expected_hash,
                std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>>& tensors,
                const char*& payload, size_t& payload_size) {
  const size_t magic_end = blob.find('\n');
  if (magic_end == std::string::npos || blob.substr(0, magic_end) != kCkptMagic)
    fail(ErrClass::io, "not a checkpoint file: " + path);
  const size_t header_end = blob.find('\n', magic_end + 1);
  if (header_end == std::string::npos)
    fail(ErrClass::io, "truncated checkpoint header: " + path);
  json j;
  try {
    j = json::parse(blob.substr(magic_end + 1, header_end - magic_end - 1));
  } catch (const json::exception& e) {
    fail(ErrClass::io, "bad checkpoint header in " + path + ": " + e.what());
  }
  const uint64_t got = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
  if (got != expected_hash)
    fail(ErrClass::data, "checkpoint config hash mismatch: " + path +
                             " was produced under a different configuration");
  tensors.clear();
  for (const auto& t : j.at("tensors"))
    tensors.push_back({t.at("name").get<std::string>(),
                       {t.at("rows").get<int64_t>(), t.at("cols").get<int64_t>()}});
  payload = blob.data() + header_end + 1;
  payload_size = blob.size() - header_end - 1;
}

}  // namespace idproxy::nn::detail
