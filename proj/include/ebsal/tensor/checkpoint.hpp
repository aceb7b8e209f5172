#pragma once

// Binary parameter checkpoint.
//
// Layout (all integers little-endian):
//   magic    8 bytes  "EBSALCKP"
//   version  u32      currently 1
//   meta     u64 length + UTF-8 bytes (free-form text, JSON by convention)
//   count    u64      number of records
//   record   u32 name length, name bytes, u32 rank, rank x u64 dims,
//            prod(dims) x f64 (IEEE-754 binary64, little-endian)
// Records keep insertion order so identical models produce identical bytes.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'E', 'B', 'S', 'A', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string meta;
  std::vector<CheckpointRecord> records;

  template <typename T>
  void add(std::string name, const Tensor<T>& t) {
    for (const auto& r : records) {
      if (r.name == name) throw CheckpointError("duplicate checkpoint record " + name);
    }
    records.push_back({std::move(name), t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }

  const CheckpointRecord& find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return r;
    }
    throw CheckpointError("checkpoint has no record named " + name);
  }

  // Copies a record into `t`; shapes must match exactly.
  template <typename T>
  void load_into(const std::string& name, Tensor<T>& t) const {
    const auto& r = find(name);
    if (r.shape != t.shape()) {
      throw CheckpointError("record " + name + " has shape " + shape_str(r.shape) + ", expected " +
                            shape_str(t.shape()));
    }
    for (std::size_t i = 0; i < r.data.size(); ++i) t[i] = static_cast<T>(r.data[i]);
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
inline std::string get_bytes(std::istream& is, std::uint64_t n) {
  if (n > (1ull << 32)) throw CheckpointError("implausible length in checkpoint");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(is.gcount()) != n) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, ck.meta.size());
  os.write(ck.meta.data(), static_cast<std::streamsize>(ck.meta.size()));
  detail::put_u64(os, ck.records.size());
  for (const auto& r : ck.records) {
    detail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put_u64(os, d);
    for (double v : r.data) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 8 || magic != kCheckpointMagic) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = static_cast<std::uint32_t>(detail::get_le(is, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.meta = detail::get_bytes(is, detail::get_le(is, 8));
  const auto count = detail::get_le(is, 8);
  for (std::uint64_t k = 0; k < count; ++k) {
    CheckpointRecord r;
    r.name = detail::get_bytes(is, detail::get_le(is, 4));
    const auto rank = detail::get_le(is, 4);
    if (rank == 0 || rank > 8) throw CheckpointError("bad rank in record " + r.name);
    for (std::uint64_t i = 0; i < rank; ++i) r.shape.push_back(detail::get_le(is, 8));
    const auto n = shape_size(r.shape);
    if (n > (1ull << 31)) throw CheckpointError("implausible record size in " + r.name);
    r.data.resize(n);
    for (auto& v : r.data) v = std::bit_cast<double>(detail::get_le(is, 8));
    ck.records.push_back(std::move(r));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace ebsal
