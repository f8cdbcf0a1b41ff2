#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "freegnn/binary_io.hpp"
#include "freegnn/data/dataset.hpp"
#include "freegnn/hash.hpp"
#include "freegnn/model.hpp"

namespace freegnn {

class CheckpointError : public BinaryFormatError {
 public:
  using BinaryFormatError::BinaryFormatError;
};

inline constexpr char kCheckpointMagic[8] = {'F', 'G', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything a forecaster needs at deployment: weights plus the frozen
/// training-set scaling. No training data is stored.
struct Checkpoint {
  ModelState model;
  std::optional<Scaler> scaler;
  nlohmann::json meta = nlohmann::json::object();  // free-form provenance (graph names, epochs, ...)
};

inline std::uint64_t config_digest(const ModelConfig& c) { return fnv1a(nlohmann::json(c).dump()); }

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 8);
  w.le(kCheckpointVersion);
  w.le(config_digest(ck.model.config));
  w.le(ck.model.seed);
  w.str(nlohmann::json(ck.model.config).dump());
  nlohmann::json extra = {{"meta", ck.meta}};
  if (ck.scaler) extra["scaler"] = *ck.scaler;
  w.str(extra.dump());
  const auto& names = param_names();
  w.le(static_cast<std::uint32_t>(ck.model.params.size()));
  for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
    const Mat& m = ck.model.params[i];
    w.str(names[i]);
    w.le(static_cast<std::uint64_t>(m.rows()));
    w.le(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.size(); ++k) w.le(m.data()[k]);
  }
  Fnv1a h;
  h.update(w.data().data(), w.data().size());
  w.le(h.digest());
  return w.data();
}

/// FNV-1a of the serialized bytes, hex encoded.
inline std::string checkpoint_digest(const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return hex64(h.digest());
}

/// expected: when given, every tensor must match the shapes that config implies.
inline Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& buf, const ModelConfig* expected = nullptr) {
  if (buf.size() < 8 + 4 + 8) throw CheckpointError("checkpoint truncated");
  if (std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  {
    Fnv1a h;
    h.update(buf.data(), buf.size() - 8);
    detail::ByteReader tail(buf.data() + buf.size() - 8, 8);
    if (tail.le<std::uint64_t>() != h.digest()) throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)");
  }
  detail::ByteReader r(buf.data(), buf.size() - 8);
  char magic[8];
  r.bytes(magic, 8);
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto digest = r.le<std::uint64_t>();
  Checkpoint ck;
  ck.model.seed = r.le<std::uint64_t>();
  ck.model.config = nlohmann::json::parse(r.str()).get<ModelConfig>();
  if (config_digest(ck.model.config) != digest) throw CheckpointError("checkpoint config digest mismatch");
  const auto extra = nlohmann::json::parse(r.str());
  ck.meta = extra.value("meta", nlohmann::json::object());
  if (extra.contains("scaler")) ck.scaler = extra["scaler"].get<Scaler>();

  const auto& names = param_names();
  const auto shapes = param_shapes(expected ? *expected : ck.model.config);
  const auto count = r.le<std::uint32_t>();
  if (count != static_cast<std::uint32_t>(kParamCount))
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, expected " + std::to_string(kParamCount));
  for (std::size_t i = 0; i < count; ++i) {
    const auto name = r.str();
    if (name != names[i]) throw CheckpointError("unexpected tensor '" + name + "' at slot " + std::to_string(i) + " (expected '" + names[i] + "')");
    const auto rows = static_cast<Eigen::Index>(r.le<std::uint64_t>());
    const auto cols = static_cast<Eigen::Index>(r.le<std::uint64_t>());
    if (rows != shapes[i].first || cols != shapes[i].second) {
      throw ShapeError("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) + ", config expects " +
                       std::to_string(shapes[i].first) + "x" + std::to_string(shapes[i].second));
    }
    Mat m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.le<double>();
    ck.model.params.push_back(std::move(m));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last tensor");
  if (!ck.model.all_finite()) throw CheckpointError("checkpoint contains non-finite parameters");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf, expected);
}

}  // namespace freegnn
