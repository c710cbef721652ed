#pragma once

// "FPDLAB" checkpoint container:
//   magic[6] | u32 version | str kind | str fingerprint | str config
//   | u32 block count | blocks | u64 checksum
// where str = u32 length + bytes and each block is
//   str name | u32 ndim | u64 dims[ndim] | f64 values[prod(dims)]
// All integers and floats little-endian; the checksum is FNV-1a over every
// preceding byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpdlab/nn.hpp"
#include "fpdlab/rng.hpp"
#include "fpdlab/tensor.hpp"

namespace fpdlab {

inline constexpr char kCheckpointMagic[6] = {'F', 'P', 'D', 'L', 'A', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string kind;         // world | teacher | student
  std::string fingerprint;  // config fingerprint of the producing run
  std::string config;       // resolved config text
  ParamStore blocks;

  std::string serialize() const;
  static Checkpoint parse(const std::string& bytes);
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : b_(bytes), end_(end) {}

  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string Checkpoint::serialize() const {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_str(out, kind);
  detail::put_str(out, fingerprint);
  detail::put_str(out, config);
  detail::put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, t] : blocks) {
    detail::put_str(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) detail::put_u64(out, d);
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_u64(out, fnv1a(out.data(), out.size()));
  return out;
}

inline Checkpoint Checkpoint::parse(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("not an FPDLAB checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 8;
  detail::Reader tail(bytes, bytes.size());
  (void)tail.raw(body);
  if (tail.u64() != fnv1a(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch");

  detail::Reader r(bytes, body);
  (void)r.raw(sizeof kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  c.kind = r.str();
  c.fingerprint = r.str();
  c.config = r.str();
  const std::uint32_t n = r.u32();
  for (std::uint32_t b = 0; b < n; ++b) {
    std::string name = r.str();
    const std::uint32_t nd = r.u32();
    Shape shape(nd);
    for (auto& d : shape) d = r.u64();
    const std::size_t count = fpdlab::numel(shape);
    r.need(count * 8);
    std::vector<double> v(count);
    for (auto& x : v) x = std::bit_cast<double>(r.u64());
    c.blocks.add(std::move(name), Tensor(std::move(shape), std::move(v)));
  }
  if (r.pos() != body) throw CheckpointError("trailing bytes after checkpoint blocks");
  return c;
}

// Write-then-rename so readers never observe a partial file.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_atomic(path, c.serialize());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return Checkpoint::parse(read_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

// Prefixed copy of every tensor in `src` into `dst`.
inline void put_blocks(ParamStore& dst, const std::string& prefix, const ParamStore& src) {
  for (const auto& [name, t] : src) dst.add(prefix + name, t.clone(false));
}

// The sub-store under `prefix`, with the prefix stripped.
inline ParamStore take_blocks(const ParamStore& src, const std::string& prefix) {
  ParamStore out;
  for (const auto& [name, t] : src)
    if (name.starts_with(prefix)) out.add(name.substr(prefix.size()), t.clone(false));
  return out;
}

// u64 values stored exactly as pairs of 32-bit halves.
inline Tensor pack_u64(const std::vector<std::uint64_t>& xs) {
  std::vector<double> v;
  for (std::uint64_t x : xs) {
    v.push_back(static_cast<double>(x >> 32));
    v.push_back(static_cast<double>(x & 0xFFFFFFFFULL));
  }
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

inline std::vector<std::uint64_t> unpack_u64(const Tensor& t) {
  const auto v = t.values();
  if (v.size() % 2) throw CheckpointError("packed integer block has odd length");
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < v.size(); i += 2)
    out.push_back((static_cast<std::uint64_t>(v[i]) << 32) | static_cast<std::uint64_t>(v[i + 1]));
  return out;
}

inline Tensor pack_rng(const CounterRng& rng) { return pack_u64({rng.key(), rng.counter()}); }
inline CounterRng unpack_rng(const Tensor& t) {
  const auto v = unpack_u64(t);
  if (v.size() != 2) throw CheckpointError("rng block must hold key and counter");
  return CounterRng::restore(v[0], v[1]);
}

// Optimizer step count plus one second-moment block per parameter.
inline void put_optimizer(ParamStore& dst, const std::string& prefix, const RmsOptimizer& opt,
                          const ParamStore& params) {
  dst.add(prefix + "steps", pack_u64({opt.steps}));
  std::size_t k = 0;
  for (const auto& [name, t] : params) {
    std::vector<double> v = opt.second_moment.empty() ? std::vector<double>(t.numel(), 0.0) : opt.second_moment[k];
    dst.add(prefix + "v." + name, Tensor(t.shape(), std::move(v)));
    ++k;
  }
}

inline void take_optimizer(const ParamStore& src, const std::string& prefix, RmsOptimizer& opt,
                           const ParamStore& params) {
  opt.steps = unpack_u64(src.get(prefix + "steps")).at(0);
  opt.second_moment.clear();
  for (const auto& [name, t] : params) {
    const Tensor& v = src.get(prefix + "v." + name);
    if (v.shape() != t.shape()) throw CheckpointError("optimizer state shape mismatch for '" + name + "'");
    opt.second_moment.emplace_back(v.values().begin(), v.values().end());
  }
}

}  // namespace fpdlab
