#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pvsent/error.hpp"

namespace pvsent {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Writes to a sibling temp file, then renames over the destination so that
// readers never observe a partially written artifact.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Little-endian binary envelope shared by every model artifact:
//   4-byte magic | u32 format version | payload
class BinaryWriter {
 public:
  BinaryWriter(std::string_view magic, std::uint32_t version) {
    buf_.append(magic.data(), magic.size());
    u32(version);
  }

  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s.data(), s.size());
  }
  void f64s(const double* data, std::size_t n) { raw(data, n * sizeof(double)); }

  const std::string& bytes() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class BinaryReader {
 public:
  // Validates magic and version; `what` names the artifact in error messages.
  BinaryReader(std::string bytes, std::string_view magic, std::uint32_t version, std::string what)
      : buf_(std::move(bytes)), what_(std::move(what)) {
    if (buf_.size() < magic.size() || std::string_view(buf_).substr(0, magic.size()) != magic) {
      throw DataError("corrupt " + what_ + " file (bad magic)");
    }
    pos_ = magic.size();
    const std::uint32_t found = u32();
    if (found != version) {
      throw DataError(what_ + " file version " + std::to_string(found) + " unsupported (expected " +
                      std::to_string(version) + ")");
    }
  }

  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void f64s(double* out, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(out, buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  // Call after the last field; trailing garbage is treated as corruption.
  void finish() const {
    if (pos_ != buf_.size()) throw DataError("corrupt " + what_ + " file (trailing bytes)");
  }

 private:
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw DataError("corrupt " + what_ + " file (truncated)");
  }

  std::string buf_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace pvsent
