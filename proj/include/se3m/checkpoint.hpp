#pragma once

// Checkpoint container.
//
// Layout (all integers little-endian):
//   "SE3MCKPT"  u32 version  u32 tensor_count  u32 section_count
//   per tensor:  u32 name_len, name, u8 dtype (0 = f32, 1 = f64), u32 rank, u64 dims[rank]
//   per section: u32 key_len, key, u64 byte_len, bytes
//   tensor values, row-major, in header order
//   u64 FNV-1a checksum of every preceding byte
//
// A sidecar "<path>.manifest" text file lists the tensors, sections and the
// checksum for human inspection. Single-line sections whose key starts with
// "meta." are copied into it verbatim.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "se3m/error.hpp"
#include "se3m/tensor.hpp"

namespace se3m {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'E', '3', 'M', 'C', 'K', 'P', 'T'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened on load; narrowed on save for f32
};

struct Checkpoint {
  std::vector<StoredTensor> tensors;
  std::map<std::string, std::string> sections;

  template <typename T>
  void add(const Parameter<T>& p) {
    tensors.push_back({p.name, sizeof(T) == 4 ? DType::f32 : DType::f64, p.value.shape(),
                       std::vector<double>(p.value.values().begin(), p.value.values().end())});
  }

  template <typename T>
  void add_all(const ParameterRefs<T>& params) {
    for (const auto* p : params) add(*p);
  }

  const StoredTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw DataError("checkpoint has no tensor '" + name + "'");
  }

  const std::string& section(const std::string& key) const {
    auto it = sections.find(key);
    if (it == sections.end()) throw DataError("checkpoint has no section '" + key + "'");
    return it->second;
  }

  /// Copies a stored tensor into a parameter of identical name and shape.
  template <typename T>
  void restore(Parameter<T>& p) const {
    const StoredTensor& t = tensor(p.name);
    if (t.shape != p.value.shape())
      throw DataError("checkpoint tensor '" + p.name + "' has shape " + shape_string(t.shape) + ", expected " +
                      shape_string(p.value.shape()));
    for (std::size_t i = 0; i < t.values.size(); ++i) p.value[i] = static_cast<T>(t.values[i]);
  }

  template <typename T>
  void restore_all(const ParameterRefs<T>& params) const {
    for (auto* p : params) restore(*p);
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const std::string& s) { bytes_ += s; }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw DataError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << contents;
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  w.u32(static_cast<std::uint32_t>(ckpt.sections.size()));
  for (const auto& t : ckpt.tensors) {
    if (shape_size(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor '" + t.name + "' size mismatch");
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
  }
  for (const auto& [key, text] : ckpt.sections) {
    w.str(key);
    w.u64(text.size());
    w.raw(text);
  }
  for (const auto& t : ckpt.tensors) {
    for (double v : t.values) {
      if (t.dtype == DType::f32)
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        w.u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  const std::uint64_t sum = fnv1a64(w.bytes());
  w.u64(sum);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 28 || bytes.compare(0, 8, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint file");
  const std::size_t body = bytes.size() - 8;
  detail::ByteReader tail(bytes, bytes.size());
  tail.raw(body);
  if (tail.u64() != fnv1a64(std::string_view(bytes).substr(0, body))) throw DataError("checkpoint checksum mismatch");

  detail::ByteReader r(bytes, body);
  r.raw(8);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto n_tensors = r.u32();
  const auto n_sections = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    StoredTensor t;
    t.name = r.str();
    const auto dtype = r.u8();
    if (dtype > 1) throw DataError("unknown dtype in checkpoint");
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.u64());
    ckpt.tensors.push_back(std::move(t));
  }
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    std::string key = r.str();
    ckpt.sections[key] = r.raw(r.u64());
  }
  for (auto& t : ckpt.tensors) {
    const std::size_t n = shape_size(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k)
      t.values[k] = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.u32()))
                                          : std::bit_cast<double>(r.u64());
  }
  if (r.pos() != body) throw DataError("trailing bytes in checkpoint");
  return ckpt;
}

inline std::string checkpoint_manifest(const Checkpoint& ckpt, std::uint64_t checksum) {
  std::ostringstream m;
  m << "format se3m-checkpoint " << kCheckpointVersion << "\n";
  for (const auto& t : ckpt.tensors)
    m << "tensor " << t.name << ' ' << (t.dtype == DType::f32 ? "f32" : "f64") << ' ' << shape_string(t.shape) << "\n";
  for (const auto& [key, text] : ckpt.sections) m << "section " << key << ' ' << text.size() << "\n";
  for (const auto& [key, text] : ckpt.sections)
    if (key.starts_with("meta.") && text.find('\n') == std::string::npos) m << key << ' ' << text << "\n";
  m << "checksum fnv1a64 " << hex64(checksum) << "\n";
  return m.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  write_file(path, bytes);
  std::uint64_t sum = 0;
  for (int i = 0; i < 8; ++i) sum |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[bytes.size() - 8 + i])) << (8 * i);
  write_file(path.string() + ".manifest", checkpoint_manifest(ckpt, sum));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path));
}

}  // namespace se3m
