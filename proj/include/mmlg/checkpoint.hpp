#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "mmlg/tensor.hpp"

// Container layout (all integers little-endian):
//   "MMLG" | u32 version | u64 header length | header text | data | u64 checksum
// The header holds one line per metadata entry ("meta <key> <value>") and one
// per tensor ("tensor <name> <dtype> <d0>x<d1>... <offset> <bytes>"), tensors
// in sorted-name order with contiguous offsets into the data section. The
// checksum is FNV-1a 64 over the data section.

namespace mmlg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'L', 'G'};

enum class DType { f32, f64, i32, u8 };

inline std::string_view to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
    case DType::u8: return "u8";
  }
  return "?";
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
  }
  return 0;
}

inline DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "i32") return DType::i32;
  if (s == "u8") return DType::u8;
  throw FormatError("dtype", "unknown dtype '" + std::string(s) + "'");
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported checkpoint dtype");
    return DType::u8;
  }
}

struct RawTensor {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
  bool operator==(const RawTensor&) const = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, RawTensor> tensors;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put_raw<T>(name, t.shape(), t.data());
  }

  template <typename T>
  void put_raw(const std::string& name, const Shape& shape, std::span<const T> data) {
    RawTensor r{dtype_of<T>(), shape, std::vector<std::uint8_t>(data.size() * sizeof(T))};
    if (!data.empty()) std::memcpy(r.bytes.data(), data.data(), r.bytes.size());
    tensors[name] = std::move(r);
  }

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  // Tensor converted to T (floating dtypes convert between each other).
  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("tensor " + name, "missing");
    const auto& r = it->second;
    const std::size_t n = numel(r.shape);
    AlignedVector<T> out(n);
    auto convert = [&](auto tag) {
      using S = decltype(tag);
      for (std::size_t i = 0; i < n; ++i) {
        S v;
        std::memcpy(&v, r.bytes.data() + i * sizeof(S), sizeof(S));
        out[i] = static_cast<T>(v);
      }
    };
    switch (r.dtype) {
      case DType::f32: convert(float{}); break;
      case DType::f64: convert(double{}); break;
      case DType::i32: convert(std::int32_t{}); break;
      case DType::u8: convert(std::uint8_t{}); break;
    }
    return Tensor<T>(r.shape, std::move(out));
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("meta " + key, "missing");
    return it->second;
  }
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace checkpoint_detail {

inline bool is_token(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (c == ' ' || c == '\n' || c == '\r' || c == '\t') return false;
  }
  return true;
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape(const std::string& s, const std::string& field) {
  Shape shape;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &pos);
    } catch (const std::exception&) {
      throw FormatError(field, "bad shape '" + s + "'");
    }
    if (pos != part.size() || v == 0) throw FormatError(field, "bad shape '" + s + "'");
    shape.push_back(static_cast<std::size_t>(v));
  }
  if (shape.empty()) throw FormatError(field, "empty shape");
  return shape;
}

}  // namespace checkpoint_detail

inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  using namespace checkpoint_detail;
  std::string header;
  for (const auto& [k, v] : ck.meta) {
    if (!is_token(k)) throw ValidationError("checkpoint: meta key '" + k + "' must be a non-empty token");
    if (v.find('\n') != std::string::npos || v.find('\r') != std::string::npos) {
      throw ValidationError("checkpoint: meta value for '" + k + "' contains a newline");
    }
    header += "meta " + k + " " + v + "\n";
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (!is_token(name)) throw ValidationError("checkpoint: tensor name '" + name + "' must be a non-empty token");
    if (t.bytes.size() != numel(t.shape) * dtype_size(t.dtype)) {
      throw ValidationError("checkpoint: tensor '" + name + "' byte size does not match its shape");
    }
    header += "tensor " + name + " " + std::string(to_string(t.dtype)) + " " + shape_field(t.shape) + " " +
              std::to_string(offset) + " " + std::to_string(t.bytes.size()) + "\n";
    offset += t.bytes.size();
  }

  std::vector<std::uint8_t> out;
  out.reserve(16 + header.size() + offset + 8);
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  const std::size_t data_start = out.size();
  for (const auto& [_, t] : ck.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  put_le<std::uint64_t>(out, fnv1a64(out.data() + data_start, offset));
  return out;
}

inline Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  using namespace checkpoint_detail;
  if (bytes.size() < 16) throw FormatError("magic", "file too short for a checkpoint header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("magic", "not an MMLG checkpoint");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("version", "unsupported checkpoint version " + std::to_string(version) +
                                                 " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw FormatError("header_length", "header extends past end of file");
  const std::string header(reinterpret_cast<const char*>(bytes.data() + 16), static_cast<std::size_t>(header_len));

  Checkpoint ck;
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::size_t offset, size;
  };
  std::vector<Entry> entries;
  std::istringstream lines(header);
  std::string line;
  std::size_t expected_offset = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("meta ", 0) == 0) {
      const auto sp = line.find(' ', 5);
      if (sp == std::string::npos) throw FormatError("header", "malformed meta line '" + line + "'");
      ck.meta[line.substr(5, sp - 5)] = line.substr(sp + 1);
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, dtype, shape;
      unsigned long long off = 0, size = 0;
      if (!(ls >> name >> dtype >> shape >> off >> size)) {
        throw FormatError("header", "malformed tensor line '" + line + "'");
      }
      const std::string field = "tensor " + name;
      Entry e{name, parse_dtype(dtype), parse_shape(shape, field), static_cast<std::size_t>(off),
              static_cast<std::size_t>(size)};
      if (e.offset != expected_offset) throw FormatError(field, "non-contiguous offset");
      if (e.size != numel(e.shape) * dtype_size(e.dtype)) throw FormatError(field, "size does not match shape");
      if (!entries.empty() && !(entries.back().name < e.name)) throw FormatError(field, "tensors not in sorted order");
      expected_offset += e.size;
      entries.push_back(std::move(e));
    } else if (!line.empty()) {
      throw FormatError("header", "unrecognized line '" + line + "'");
    }
  }
  const std::size_t data_start = 16 + static_cast<std::size_t>(header_len);
  if (bytes.size() - data_start < expected_offset + 8) throw FormatError("data", "truncated data section");
  if (bytes.size() - data_start != expected_offset + 8) throw FormatError("data", "trailing bytes after checksum");
  const auto stored = get_le<std::uint64_t>(bytes.data() + data_start + expected_offset);
  if (stored != fnv1a64(bytes.data() + data_start, expected_offset)) {
    throw FormatError("checksum", "data checksum mismatch");
  }
  for (auto& e : entries) {
    const auto* p = bytes.data() + data_start + e.offset;
    ck.tensors[e.name] = RawTensor{e.dtype, std::move(e.shape), std::vector<std::uint8_t>(p, p + e.size)};
  }
  return ck;
}

// Exclusive advisory lock on "<path>.lock" for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& path) : lock_path_(path.string() + ".lock") {
    fd_ = ::open(lock_path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw ValidationError("cannot create lock file " + lock_path_);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ValidationError("another process is writing " + path.string());
    }
  }
  ~OutputLock() {
    if (fd_ >= 0) {
      ::unlink(lock_path_.c_str());
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string lock_path_;
  int fd_ = -1;
};

// Writes to a temporary sibling and renames into place, so readers never see
// a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  OutputLock lock(path);
  const auto tmp = std::filesystem::path(path.string() + ".tmp." + std::to_string(::getpid()));
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      std::filesystem::remove(tmp);
      throw ValidationError("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(ck));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace mmlg
