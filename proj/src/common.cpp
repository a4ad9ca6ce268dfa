#include "idproxy/common.hpp"

#include <cerrno>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace idproxy {

const char* err_class_name(ErrClass c) {
  switch (c) {
    case ErrClass::ok: return "ok";
    case ErrClass::config: return "config";
    case ErrClass::shape: return "shape";
    case ErrClass::data: return "data";
    case ErrClass::degenerate: return "degenerate";
    case ErrClass::dependency: return "dependency";
    case ErrClass::not_found: return "not_found";
    case ErrClass::numeric: return "numeric";
    case ErrClass::io: return "io";
    case ErrClass::empty_split: return "empty_split";
    case ErrClass::metric: return "metric";
    case ErrClass::internal: return "internal";
  }
  return "unknown";
}

Rng Rng::fork(const std::string& tag) const {
  Fnv64 h;
  h.update(&state_[0], sizeof(state_));
  h.update(tag);
  return Rng(h.value());
}

std::string Fnv64::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h_));
  return std::string(buf);
}

uint64_t fnv64(const void* data, size_t n) {
  Fnv64 h;
  h.update(data, n);
  return h.value();
}

uint64_t fnv64(const std::string& s) { return fnv64(s.data(), s.size()); }

std::string fnv64_hex(const std::string& s) {
  Fnv64 h;
  h.update(s);
  return h.hex();
}

std::string real_to_string(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

double string_to_real(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || errno == ERANGE) fail(ErrClass::data, "bad real literal: " + s);
  return v;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrClass::io, "cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrClass::io, "cannot open for writing: " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail(ErrClass::io, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrClass::io, "rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) fail(ErrClass::io, "cannot create directory: " + path + ": " + ec.message());
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace idproxy
