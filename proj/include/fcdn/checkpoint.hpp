#pragma once

// Checkpoint file, all integers little-endian:
//
//   magic      8 bytes  "FCDNCKPT"
//   version    u32      1
//   digest     u64      FNV-1a of the config text
//   config     u32 length + UTF-8 text (RunConfig::to_text())
//   count      u32      number of parameter records
//   records    u32 name length + name, 4 x u64 dims (n, c, h, w),
//              n*c*h*w IEEE-754 binary32 values

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fcdn/architecture.hpp"
#include "fcdn/config.hpp"
#include "fcdn/errors.hpp"

namespace fcdn {

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'C', 'D', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t digest = 0;
  RunConfig config;
  std::vector<CheckpointRecord> records;
};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  unsigned char buf[sizeof(U)];
  in.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(U))) throw IoError("checkpoint truncated reading " + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline std::string get_string(std::istream& in, const std::string& what) {
  const auto len = get_le<std::uint32_t>(in, what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) throw IoError("checkpoint truncated reading " + what);
  return s;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                             const std::vector<const Parameter<float>*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, config.digest());
  const std::string text = config.to_text();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    const Shape& s = p->value.shape();
    for (std::uint64_t d : {s.n, s.c, s.h, s.w}) detail::put_le<std::uint64_t>(out, d);
    for (float v : p->value.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 8 || magic != kCheckpointMagic) throw IoError(path.string() + ": not a checkpoint file");
  Checkpoint ck;
  ck.version = detail::get_le<std::uint32_t>(in, "version");
  if (ck.version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.digest = detail::get_le<std::uint64_t>(in, "digest");
  ck.config = RunConfig::parse(detail::get_string(in, "config"));
  if (ck.config.digest() != ck.digest) throw IoError(path.string() + ": config digest mismatch");
  const auto count = detail::get_le<std::uint32_t>(in, "record count");
  for (std::uint32_t r = 0; r < count; ++r) {
    CheckpointRecord rec;
    rec.name = detail::get_string(in, "record name");
    Shape s;
    s.n = detail::get_le<std::uint64_t>(in, rec.name);
    s.c = detail::get_le<std::uint64_t>(in, rec.name);
    s.h = detail::get_le<std::uint64_t>(in, rec.name);
    s.w = detail::get_le<std::uint64_t>(in, rec.name);
    std::vector<float> values(s.numel());
    for (float& v : values) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(in, rec.name));
    rec.value = Tensor<float>(s, std::move(values));
    ck.records.push_back(std::move(rec));
  }
  return ck;
}

// Copies checkpoint records into a network whose parameters match by name,
// order and shape.
inline void load_parameters(const Checkpoint& ck, Network<float>& net) {
  auto params = net.parameters();
  if (params.size() != ck.records.size()) {
    throw IoError("checkpoint has " + std::to_string(ck.records.size()) + " tensors, network " +
                  std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& rec = ck.records[i];
    if (rec.name != params[i]->name || rec.value.shape() != params[i]->value.shape()) {
      throw IoError("checkpoint tensor '" + rec.name + "' " + rec.value.shape().str() + " does not match '" +
                    params[i]->name + "' " + params[i]->value.shape().str());
    }
    params[i]->value = rec.value;
    params[i]->zero_grad();
  }
}

}  // namespace fcdn
