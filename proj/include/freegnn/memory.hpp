#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "freegnn/binary_io.hpp"
#include "freegnn/hash.hpp"
#include "freegnn/numerics/tensor.hpp"
#include "freegnn/rng.hpp"

namespace freegnn {

/// Algorithm R on slot indices only: the t-th arrival is kept with
/// probability min(1, B/t) and, once full, evicts a uniformly chosen slot.
class ReservoirSampler {
 public:
  explicit ReservoirSampler(std::size_t capacity = 0, std::uint64_t seed = 0) : capacity_(capacity), rng_(seed) {}

  /// Slot the arrival should occupy, or nullopt when it is discarded.
  std::optional<std::size_t> offer(std::uint64_t t) {
    if (t <= seen_) throw std::invalid_argument("reservoir: arrival index must be strictly increasing");
    seen_ = t;
    if (capacity_ == 0) return std::nullopt;
    if (size_ < capacity_) return size_++;
    const auto j = rng_.below(t);
    if (j < capacity_) return static_cast<std::size_t>(j);
    return std::nullopt;
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return size_; }
  std::uint64_t seen() const noexcept { return seen_; }
  Rng& rng() noexcept { return rng_; }
  const Rng& rng() const noexcept { return rng_; }

 private:
  std::size_t capacity_;
  std::size_t size_ = 0;
  std::uint64_t seen_ = 0;
  Rng rng_;
};

/// Stored windows are kept in single precision, which halves the dominant
/// B*w*N*d term of the footprint.
struct MemoryEntry {
  std::vector<std::size_t> shape;  // w x N x d, inputs only
  std::vector<float> values;
  std::uint64_t inserted_at = 0;   // arrival index t
  Eigen::VectorXd embedding_mean;  // mean over nodes of the cached embedding
  std::uint64_t refreshed_at = 0;  // arrival index of the last cache refresh

  MemoryEntry() = default;
  MemoryEntry(const Tensor& w, std::uint64_t t, Eigen::VectorXd mean)
      : shape(w.shape()), values(w.values().begin(), w.values().end()), inserted_at(t), embedding_mean(std::move(mean)), refreshed_at(t) {}

  Tensor window() const {
    Tensor x(shape);
    std::copy(values.begin(), values.end(), x.data());
    return x;
  }
};

/// Reservoir-sampled buffer of unlabeled target windows with a per-entry
/// embedding cache used by the drift score.
class ReplayMemory {
 public:
  explicit ReplayMemory(std::size_t capacity = 200, std::uint64_t seed = 0) : sampler_(capacity, seed) {
    entries_.reserve(capacity);
  }

  std::size_t capacity() const noexcept { return sampler_.capacity(); }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::uint64_t seen() const noexcept { return sampler_.seen(); }
  const MemoryEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<MemoryEntry>& entries() const noexcept { return entries_; }
  Rng& rng() noexcept { return sampler_.rng(); }

  /// Returns true when the window was stored.
  bool reservoir_insert(const Tensor& window, std::uint64_t t, Eigen::VectorXd embedding_mean) {
    if (!entries_.empty() && window.shape() != entries_.front().shape)
      throw ShapeError("replay memory: window shape " + shape_string(window.shape()) + " differs from stored " +
                       shape_string(entries_.front().shape));
    if (!entries_.empty() && embedding_mean.size() != entries_.front().embedding_mean.size())
      throw ShapeError("replay memory: embedding width changed");
    const auto slot = sampler_.offer(t);
    if (!slot) return false;
    MemoryEntry e(window, t, std::move(embedding_mean));
    if (*slot == entries_.size()) entries_.push_back(std::move(e));
    else entries_[*slot] = std::move(e);
    return true;
  }

  void refresh_embedding(std::size_t i, Eigen::VectorXd embedding_mean, std::uint64_t t) {
    auto& e = entries_.at(i);
    if (embedding_mean.size() != e.embedding_mean.size()) throw ShapeError("replay memory: embedding width changed");
    e.embedding_mean = std::move(embedding_mean);
    e.refreshed_at = t;
  }

  /// Arrivals since the entry's cache was last recomputed.
  std::uint64_t staleness(std::size_t i, std::uint64_t now) const {
    const auto at = entries_.at(i).refreshed_at;
    return now > at ? now - at : 0;
  }

  /// Mean over entries of the cached per-window embedding means.
  std::optional<Eigen::VectorXd> embedding_centroid() const {
    if (entries_.empty()) return std::nullopt;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(entries_.front().embedding_mean.size());
    for (const auto& e : entries_) acc += e.embedding_mean;
    return acc / static_cast<double>(entries_.size());
  }

  /// Bytes held by stored windows and caches (the B*w*N*d term dominates).
  std::size_t footprint_bytes() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      n += e.values.size() * sizeof(float) + static_cast<std::size_t>(e.embedding_mean.size()) * sizeof(double) +
           2 * sizeof(std::uint64_t);
    return n;
  }

 private:
  ReservoirSampler sampler_;
  std::vector<MemoryEntry> entries_;
};

/// Uniform without replacement; min(batch, size) indices in draw order.
inline std::vector<std::size_t> sample_replay(const ReplayMemory& memory, std::size_t batch_size, Rng& rng) {
  return sample_without_replacement(rng, memory.size(), batch_size);
}

inline std::vector<std::size_t> sample_replay(const ReplayMemory& memory, std::size_t batch_size, std::uint64_t seed) {
  Rng rng(seed);
  return sample_replay(memory, batch_size, rng);
}

// Snapshot: "FGNNMEMS", u32 version, u64 capacity, u64 seen, u64 count, then per
// entry u64 inserted_at, u64 refreshed_at, u32 rank + u64 dims, f32 window data,
// u64 embedding length, f64 embedding; trailing u64 FNV-1a of everything before.
inline constexpr char kMemoryMagic[8] = {'F', 'G', 'N', 'N', 'M', 'E', 'M', 'S'};
inline constexpr std::uint32_t kMemoryVersion = 1;

struct MemorySnapshot {
  std::size_t capacity = 0;
  std::uint64_t seen = 0;
  std::vector<MemoryEntry> entries;
};

inline std::vector<unsigned char> serialize_memory(const ReplayMemory& m) {
  detail::ByteWriter w;
  w.bytes(kMemoryMagic, 8);
  w.le(kMemoryVersion);
  w.le(static_cast<std::uint64_t>(m.capacity()));
  w.le(m.seen());
  w.le(static_cast<std::uint64_t>(m.size()));
  for (const auto& e : m.entries()) {
    w.le(e.inserted_at);
    w.le(e.refreshed_at);
    w.le(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.le(static_cast<std::uint64_t>(d));
    for (float v : e.values) w.le(v);
    w.le(static_cast<std::uint64_t>(e.embedding_mean.size()));
    for (Eigen::Index i = 0; i < e.embedding_mean.size(); ++i) w.le(e.embedding_mean[i]);
  }
  Fnv1a h;
  h.update(w.data().data(), w.data().size());
  w.le(h.digest());
  return w.data();
}

inline MemorySnapshot deserialize_memory(const std::vector<unsigned char>& buf) {
  if (buf.size() < 8 + 4 + 8) throw BinaryFormatError("memory snapshot truncated");
  if (std::memcmp(buf.data(), kMemoryMagic, 8) != 0) throw BinaryFormatError("not a memory snapshot (bad magic)");
  Fnv1a h;
  h.update(buf.data(), buf.size() - 8);
  if (detail::ByteReader(buf.data() + buf.size() - 8, 8).le<std::uint64_t>() != h.digest())
    throw BinaryFormatError("memory snapshot checksum mismatch");
  detail::ByteReader r(buf.data() + 8, buf.size() - 16);
  if (const auto v = r.le<std::uint32_t>(); v != kMemoryVersion) throw BinaryFormatError("unsupported memory snapshot version " + std::to_string(v));
  MemorySnapshot s;
  s.capacity = static_cast<std::size_t>(r.le<std::uint64_t>());
  s.seen = r.le<std::uint64_t>();
  const auto count = r.le<std::uint64_t>();
  for (std::uint64_t k = 0; k < count; ++k) {
    MemoryEntry e;
    e.inserted_at = r.le<std::uint64_t>();
    e.refreshed_at = r.le<std::uint64_t>();
    e.shape.resize(r.le<std::uint32_t>());
    std::size_t count_values = 1;
    for (auto& d : e.shape) count_values *= (d = static_cast<std::size_t>(r.le<std::uint64_t>()));
    e.values.resize(count_values);
    for (auto& v : e.values) v = r.le<float>();
    e.embedding_mean.resize(static_cast<Eigen::Index>(r.le<std::uint64_t>()));
    for (Eigen::Index i = 0; i < e.embedding_mean.size(); ++i) e.embedding_mean[i] = r.le<double>();
    s.entries.push_back(std::move(e));
  }
  if (!r.done()) throw BinaryFormatError("trailing bytes in memory snapshot");
  return s;
}

inline void save_memory_snapshot(const ReplayMemory& m, const std::filesystem::path& path) {
  const auto bytes = serialize_memory(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write memory snapshot '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline MemorySnapshot load_memory_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open memory snapshot '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_memory(buf);
}

}  // namespace freegnn
