// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nerfus/core/common.hpp"

namespace nerfus {

/// Named-array container with a version header and trailing CRC32.
/// Writes are atomic: temp file in the same directory, then rename.
class Checkpoint {
 public:
  enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, u8 = 3 };

  struct Entry {
    Dtype dtype = Dtype::u8;
    std::vector<std::int64_t> dims;
    std::vector<std::uint8_t> bytes;

    std::size_t count() const {
      std::size_t n = 1;
      for (auto d : dims) n *= std::size_t(d);
      return n;
    }
  };

  static constexpr std::uint32_t kVersion = 1;

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  template <class T>
  void put(const std::string& name, const T* data, std::vector<std::int64_t> dims) {
    Entry e;
    e.dtype = dtype_of<T>();
    e.dims = std::move(dims);
    e.bytes.resize(e.count() * sizeof(T));
    std::memcpy(e.bytes.data(), data, e.bytes.size());
    entries_[name] = std::move(e);
  }

  template <class T>
  void put(const std::string& name, const std::vector<T>& data) {
    put(name, data.data(), {std::int64_t(data.size())});
  }

  void put_scalar(const std::string& name, std::int64_t v) { put(name, &v, {1}); }
  void put_scalar(const std::string& name, double v) { put(name, &v, {1}); }

  void put_string(const std::string& name, const std::string& s) {
    put(name, reinterpret_cast<const std::uint8_t*>(s.data()),
        {std::int64_t(s.size())});
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IoError("checkpoint: missing entry '" + name + "'");
    return it->second;
  }

  template <class T>
  std::vector<T> get(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != dtype_of<T>())
      throw IoError("checkpoint: dtype mismatch for entry '" + name + "'");
    std::vector<T> out(e.count());
    std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
    return out;
  }

  std::int64_t get_i64(const std::string& name) const { return get<std::int64_t>(name).at(0); }
  double get_f64(const std::string& name) const { return get<double>(name).at(0); }

  std::string get_string(const std::string& name) const {
    const Entry& e = entry(name);
    return std::string(e.bytes.begin(), e.bytes.end());
  }

  void save(const std::string& path) const {
    namespace fs = std::filesystem;
    std::vector<std::uint8_t> blob;
    append(blob, "NUSC", 4);
    append_u32(blob, kVersion);
    append_u64(blob, entries_.size());
    for (const auto& [name, e] : entries_) {
      append_u64(blob, name.size());
      append(blob, name.data(), name.size());
      blob.push_back(std::uint8_t(e.dtype));
      append_u64(blob, e.dims.size());
      for (auto d : e.dims) append_u64(blob, std::uint64_t(d));
      append_u64(blob, e.bytes.size());
      append(blob, e.bytes.data(), e.bytes.size());
    }
    std::uint32_t crc = crc32(0L, blob.data(), uInt(blob.size()));
    append_u32(blob, crc);

    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write checkpoint: " + path);
      out.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
      if (!out) throw IoError("short write on checkpoint: " + path);
    }
    fs::rename(tmp, target);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (blob.size() < 16 || std::memcmp(blob.data(), "NUSC", 4) != 0)
      throw IoError("corrupt checkpoint (bad magic): " + path);

    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, blob.data() + blob.size() - 4, 4);
    std::uint32_t crc = crc32(0L, blob.data(), uInt(blob.size() - 4));
    if (crc != stored_crc) throw IoError("corrupt checkpoint (checksum mismatch): " + path);

    Reader r{blob.data(), blob.size() - 4, 4, path};
    std::uint32_t version = r.u32();
    if (version != kVersion)
      throw IoError("checkpoint version mismatch in " + path + ": got " +
                    std::to_string(version) + ", expected " + std::to_string(kVersion));

    Checkpoint ck;
    std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t name_len = r.u64();
      std::string name = r.str(name_len);
      Entry e;
      e.dtype = Dtype(r.u8());
      std::uint64_t nd = r.u64();
      for (std::uint64_t d = 0; d < nd; ++d) e.dims.push_back(std::int64_t(r.u64()));
      std::uint64_t nb = r.u64();
      e.bytes = r.bytes(nb);
      ck.entries_[name] = std::move(e);
    }
    return ck;
  }

 private:
  template <class T>
  static constexpr Dtype dtype_of() {
    if constexpr (std::is_same_v<T, float>) return Dtype::f32;
    if constexpr (std::is_same_v<T, double>) return Dtype::f64;
    if constexpr (std::is_same_v<T, std::int64_t>) return Dtype::i64;
    if constexpr (std::is_same_v<T, std::uint8_t>) return Dtype::u8;
  }

  static void append(std::vector<std::uint8_t>& b, const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    b.insert(b.end(), c, c + n);
  }
  static void append_u32(std::vector<std::uint8_t>& b, std::uint32_t v) { append(b, &v, 4); }
  static void append_u64(std::vector<std::uint8_t>& b, std::uint64_t v) { append(b, &v, 8); }

  struct Reader {
    const std::uint8_t* data;
    std::size_t end;
    std::size_t pos;
    std::string path;

    void need(std::size_t n) {
      if (pos + n > end) throw IoError("corrupt checkpoint (truncated): " + path);
    }
    std::uint8_t u8() {
      need(1);
      return data[pos++];
    }
    std::uint32_t u32() {
      need(4);
      std::uint32_t v;
      std::memcpy(&v, data + pos, 4);
      pos += 4;
      return v;
    }
    std::uint64_t u64() {
      need(8);
      std::uint64_t v;
      std::memcpy(&v, data + pos, 8);
      pos += 8;
      return v;
    }
    std::string str(std::size_t n) {
      need(n);
      std::string s(reinterpret_cast<const char*>(data + pos), n);
      pos += n;
      return s;
    }
    std::vector<std::uint8_t> bytes(std::size_t n) {
      need(n);
      std::vector<std::uint8_t> v(data + pos, data + pos + n);
      pos += n;
      return v;
    }
  };

  std::map<std::string, Entry> entries_;
};

}  // namespace nerfus
