#pragma once

// Single-file tensor archive. Layout (safetensors-compatible):
//
//   u64 little-endian header length N
//   N bytes of JSON: {"__metadata__": {string: string},
//                     "<name>": {"dtype": "F32"|"F64", "shape": [...],
//                                "data_offsets": [begin, end]}, ...}
//   raw little-endian array bytes, offsets relative to the end of the header
//
// Arrays are stored in name order so identical contents give identical bytes.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nucleisam/tensor.hpp"

namespace nucleisam {

inline constexpr const char* kArchiveFormatVersion = "1";

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "F32" : "F64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "archive supports float and double");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Writes `bytes` to `path` via a sibling temporary file and rename, so a
/// crash never leaves a truncated file at `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw ArchiveError("write failed for " + tmp.string() + " (disk full?)");
    }
  }
  std::filesystem::rename(tmp, path);
}

class Archive {
 public:
  std::map<std::string, std::string> metadata;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put_as(name, t, dtype_of<T>());
  }

  template <typename T>
  void put_as(const std::string& name, const Tensor<T>& t, DType dtype) {
    Entry e{dtype, t.shape, {}};
    e.bytes.resize(t.numel() * dtype_size(dtype));
    if (dtype == DType::f32) {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const float v = static_cast<float>(t[i]);
        std::memcpy(e.bytes.data() + 4 * i, &v, 4);
      }
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double v = static_cast<double>(t[i]);
        std::memcpy(e.bytes.data() + 8 * i, &v, 8);
      }
    }
    entries_[name] = std::move(e);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  const Shape& shape(const std::string& name) const { return entry(name).shape; }
  DType dtype(const std::string& name) const { return entry(name).dtype; }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const Entry& e = entry(name);
    Tensor<T> t(e.shape);
    if (e.dtype == DType::f32) {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        float v;
        std::memcpy(&v, e.bytes.data() + 4 * i, 4);
        t[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        double v;
        std::memcpy(&v, e.bytes.data() + 8 * i, 8);
        t[i] = static_cast<T>(v);
      }
    }
    return t;
  }

  void erase(const std::string& name) { entries_.erase(name); }

  std::string serialize() const {
    nlohmann::json header = nlohmann::json::object();
    nlohmann::json meta = nlohmann::json::object();
    for (const auto& [k, v] : metadata) meta[k] = v;
    if (!meta.contains("format_version")) meta["format_version"] = kArchiveFormatVersion;
    header["__metadata__"] = meta;
    std::size_t offset = 0;
    for (const auto& [name, e] : entries_) {
      header[name] = {{"dtype", dtype_name(e.dtype)}, {"shape", e.shape}, {"data_offsets", {offset, offset + e.bytes.size()}}};
      offset += e.bytes.size();
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');
    std::string out(8, '\0');
    const std::uint64_t n = text.size();
    std::memcpy(out.data(), &n, 8);
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& [name, e] : entries_) out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
    return out;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

  static Archive deserialize(const std::string& bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 8) throw ArchiveError(origin + ": truncated archive");
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    if (n > bytes.size() - 8) throw ArchiveError(origin + ": header length exceeds file size");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.substr(8, n));
    } catch (const nlohmann::json::parse_error& e) {
      throw ArchiveError(origin + ": unreadable header: " + e.what());
    }
    const std::size_t base = 8 + n;
    Archive a;
    for (const auto& [name, v] : header.items()) {
      if (name == "__metadata__") {
        for (const auto& [k, mv] : v.items()) a.metadata[k] = mv.is_string() ? mv.get<std::string>() : mv.dump();
        continue;
      }
      Entry e;
      const std::string dt = v.at("dtype").get<std::string>();
      if (dt == "F32") e.dtype = DType::f32;
      else if (dt == "F64") e.dtype = DType::f64;
      else throw ArchiveError(origin + ": unsupported dtype " + dt + " for " + name);
      e.shape = v.at("shape").get<Shape>();
      const auto off = v.at("data_offsets").get<std::vector<std::size_t>>();
      if (off.size() != 2 || off[1] < off[0] || base + off[1] > bytes.size() ||
          off[1] - off[0] != shape_numel(e.shape) * dtype_size(e.dtype)) {
        throw ArchiveError(origin + ": bad data offsets for " + name);
      }
      e.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + off[0]),
                     bytes.begin() + static_cast<std::ptrdiff_t>(base + off[1]));
      a.entries_[name] = std::move(e);
    }
    if (auto it = a.metadata.find("format_version"); it != a.metadata.end() && it->second != kArchiveFormatVersion) {
      throw ArchiveError(origin + ": unsupported format version " + it->second);
    }
    return a;
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArchiveError("cannot open archive " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path.string());
  }

 private:
  struct Entry {
    DType dtype = DType::f64;
    Shape shape;
    std::vector<unsigned char> bytes;
  };

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArchiveError("archive has no array named '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace nucleisam
