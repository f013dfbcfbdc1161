#pragma once

// Binary checkpoint: "STRK", u32 version, u32 count, then per parameter
// u32 name length, name bytes, u32 rank, u32 dims[rank], f32 payload.
// All integers and floats little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "strek/optim.hpp"

namespace strek {

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'T', 'R', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_i32(std::ostream& os, std::int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("unexpected end of file");
  return v;
}
inline std::int32_t read_i32(std::istream& is) {
  std::int32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("unexpected end of file");
  return v;
}
inline float read_f32(std::istream& is) {
  float v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("unexpected end of file");
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw FormatError("unexpected end of file");
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw FormatError("unexpected end of file");
  return v;
}

}  // namespace io

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

template <class T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(kCheckpointMagic.data(), 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(params.items().size()));
  for (const auto& p : params.items()) {
    io::write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    io::write_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
    for (T v : p.tensor.values()) io::write_f32(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("bad checkpoint magic in " + path);
  const auto version = io::read_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = io::read_u32(is);
  std::vector<CheckpointEntry> out(count);
  for (auto& e : out) {
    const auto len = io::read_u32(is);
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw FormatError("truncated parameter name");
    const auto rank = io::read_u32(is);
    e.shape.resize(rank);
    for (auto& d : e.shape) d = io::read_u32(is);
    e.values.resize(numel(e.shape));
    for (auto& v : e.values) v = io::read_f32(is);
  }
  return out;
}

/// Loads values into an already-constructed parameter set; names and shapes
/// must match exactly.
template <class T>
void load_checkpoint(const std::string& path, ParameterSet<T>& params) {
  const auto entries = read_checkpoint(path);
  auto& items = params.items();
  if (entries.size() != items.size())
    throw FormatError("checkpoint has " + std::to_string(entries.size()) + " parameters, network expects " +
                      std::to_string(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (entries[i].name != items[i].name || entries[i].shape != items[i].tensor.shape())
      throw FormatError("checkpoint parameter '" + entries[i].name + "' " + shape_str(entries[i].shape) +
                        " does not match '" + items[i].name + "' " + shape_str(items[i].tensor.shape()));
    auto& dst = items[i].tensor.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(entries[i].values[j]);
  }
}

// ---------------------------------------------------------------------------
// Resumable training state: "STRS", u32 version, u64 completed iterations,
// then raw parameter values (native T) and Adam moments (f64).
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kStateMagic{'S', 'T', 'R', 'S'};

template <class T>
void save_training_state(const std::string& path, std::uint64_t iterations_done, const ParameterSet<T>& params,
                         const Adam<T>& adam) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write training state " + tmp);
    os.write(kStateMagic.data(), 4);
    io::write_u32(os, 1);
    io::write_u64(os, iterations_done);
    io::write_u32(os, static_cast<std::uint32_t>(sizeof(T)));
    io::write_u32(os, static_cast<std::uint32_t>(params.items().size()));
    for (const auto& p : params.items()) {
      io::write_u64(os, p.tensor.size());
      os.write(reinterpret_cast<const char*>(p.tensor.values().data()), static_cast<std::streamsize>(p.tensor.size() * sizeof(T)));
    }
    io::write_u64(os, adam.steps());
    const auto& m = adam.first_moments();
    const auto& v = adam.second_moments();
    io::write_u32(os, static_cast<std::uint32_t>(m.size()));
    for (std::size_t i = 0; i < m.size(); ++i) {
      io::write_u64(os, m[i].size());
      for (double x : m[i]) io::write_f64(os, x);
      for (double x : v[i]) io::write_f64(os, x);
    }
    if (!os) throw std::runtime_error("failed writing training state " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Returns the number of completed iterations stored in the state file.
template <class T>
std::uint64_t load_training_state(const std::string& path, ParameterSet<T>& params, Adam<T>& adam) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open training state " + path);
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kStateMagic) throw FormatError("bad training-state magic in " + path);
  if (io::read_u32(is) != 1) throw FormatError("unsupported training-state version");
  const auto done = io::read_u64(is);
  if (io::read_u32(is) != sizeof(T)) throw FormatError("training state precision mismatch");
  auto& items = params.items();
  if (io::read_u32(is) != items.size()) throw FormatError("training state parameter count mismatch");
  for (auto& p : items) {
    if (io::read_u64(is) != p.tensor.size()) throw FormatError("training state size mismatch for " + p.name);
    if (!is.read(reinterpret_cast<char*>(p.tensor.values().data()), static_cast<std::streamsize>(p.tensor.size() * sizeof(T))))
      throw FormatError("truncated training state");
  }
  const auto t = io::read_u64(is);
  const auto count = io::read_u32(is);
  std::vector<std::vector<double>> m(count), v(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto n = io::read_u64(is);
    m[i].resize(n);
    v[i].resize(n);
    for (auto& x : m[i]) x = io::read_f64(is);
    for (auto& x : v[i]) x = io::read_f64(is);
  }
  adam.restore(t, std::move(m), std::move(v));
  return done;
}

}  // namespace strek
