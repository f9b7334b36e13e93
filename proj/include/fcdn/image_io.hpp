#pragma once

// Binary netpbm reading and writing: P6 (8-bit RGB) and P5 (8-bit gray).

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fcdn/errors.hpp"

namespace fcdn {

struct Image8 {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t channels = 0;          // 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

namespace detail {

inline std::string read_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw IoError(path.string() + ": truncated netpbm header");
  return tok;
}

inline std::size_t read_dim(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = read_token(in, path);
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(tok, &pos);
    if (pos != tok.size() || v == 0) throw IoError("");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw IoError(path.string() + ": bad netpbm header field '" + tok + "'");
  }
}

}  // namespace detail

inline Image8 read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string magic = detail::read_token(in, path);
  Image8 img;
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    throw IoError(path.string() + ": not a binary PPM/PGM file (magic '" + magic + "')");
  }
  img.w = detail::read_dim(in, path);
  img.h = detail::read_dim(in, path);
  if (detail::read_dim(in, path) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  img.pixels.resize(img.h * img.w * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  return img;
}

inline void write_netpbm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("netpbm supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace fcdn
