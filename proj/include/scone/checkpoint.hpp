#ifndef SCONE_CHECKPOINT_HPP_
#define SCONE_CHECKPOINT_HPP_

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scone/error.hpp"
#include "scone/nn.hpp"

namespace scone {

// Layout: magic, u32 version, u64 metadata length, metadata (JSON text),
// u32 array count, then per array: u32 name length, name, u8 group, u32 rank,
// i32 dims[rank], f64 values. Integers are little-endian.
inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'O', 'N', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata;
  ParamStore<double> params;
};

namespace detail {

template <typename I>
void put_le(std::ostream& out, I v) {
  using U = std::make_unsigned_t<I>;
  U u = static_cast<U>(v);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
  out.write(buf, sizeof(U));
}

template <typename I>
I get_le(std::istream& in, const std::string& what) {
  using U = std::make_unsigned_t<I>;
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("truncated checkpoint reading " + what);
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(buf[i]) << (8 * i);
  return static_cast<I>(u);
}

inline void put_double(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_le(out, bits);
}

inline double get_double(std::istream& in, const std::string& what) {
  const auto bits = get_le<std::uint64_t>(in, what);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

}  // namespace detail

/// Serializes metadata and every parameter array; byte output is a pure function of the inputs.
template <typename T>
std::string serialize_checkpoint(const ParamStore<T>& params, const nlohmann::json& metadata,
                                 const std::function<bool(const ParamSpec&)>& keep = {}) {
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = metadata.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!keep || keep(params.spec(i))) ids.push_back(i);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ids.size()));
  for (std::size_t i : ids) {
    const auto& spec = params.spec(i);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.name.size()));
    out.write(spec.name.data(), static_cast<std::streamsize>(spec.name.size()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(spec.group));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.shape.size()));
    for (int d : spec.shape) detail::put_le<std::int32_t>(out, d);
    const auto& v = params[i];
    for (Eigen::Index k = 0; k < v.size(); ++k) detail::put_double(out, static_cast<double>(v[k]));
  }
  return out.str();
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params, const nlohmann::json& metadata,
                     const std::function<bool(const ParamSpec&)>& keep = {}) {
  const std::string bytes = serialize_checkpoint(params, metadata, keep);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

inline Checkpoint parse_checkpoint(std::istream& in, const std::string& source = "<checkpoint>") {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError(source + " is not a checkpoint file");
  const auto version = detail::get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = detail::get_le<std::uint64_t>(in, "metadata length");
  std::string meta(meta_len, '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(meta_len))) throw CheckpointError("truncated metadata");
  Checkpoint ck;
  try {
    ck.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(source + ": bad metadata: " + e.what());
  }
  const auto count = detail::get_le<std::uint32_t>(in, "array count");
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto name_len = detail::get_le<std::uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw CheckpointError("truncated array name");
    const auto group = detail::get_le<std::uint8_t>(in, name);
    if (group > 2) throw CheckpointError("bad parameter group for " + name);
    const auto rank = detail::get_le<std::uint32_t>(in, name);
    std::vector<int> shape(rank);
    for (auto& d : shape) {
      d = detail::get_le<std::int32_t>(in, name);
      if (d < 0) throw CheckpointError("negative dimension in " + name);
    }
    const auto id = ck.params.add(name, shape, static_cast<ParamGroup>(group));
    auto& v = ck.params[id];
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = detail::get_double(in, name);
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return parse_checkpoint(in, path);
}

/**
 * Copies checkpoint arrays into `dst`. A full load demands that every
 * destination array is present; a partial load copies whatever matches by name
 * and returns the names that were left untouched.
 */
template <typename T>
std::vector<std::string> apply_checkpoint(ParamStore<T>& dst, const Checkpoint& ck, bool partial = false) {
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto& spec = dst.spec(i);
    const auto j = ck.params.find(spec.name);
    if (!j) {
      missing.push_back(spec.name);
      continue;
    }
    if (ck.params.spec(*j).shape != spec.shape) throw CheckpointError("shape mismatch for parameter " + spec.name);
    dst[i] = ck.params[*j].template cast<T>();
  }
  if (!partial && !missing.empty()) throw CheckpointError("checkpoint lacks parameter " + missing.front());
  return missing;
}

}  // namespace scone

#endif  // SCONE_CHECKPOINT_HPP_
