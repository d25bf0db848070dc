#pragma once

// 8-bit RGB raster and binary PPM (P6, maxval 255) IO.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "arrag/common.hpp"

namespace arrag {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved channels

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }

  bool operator==(const Image&) const = default;
};

inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for writing: " + path);
  const std::string bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

namespace detail {

inline std::size_t ppm_header_int(const std::string& s, std::size_t& pos, const std::string& path) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  if (start == pos) throw Error(ErrorCode::kFormat, "malformed PPM header: " + path);
  return std::stoul(s.substr(start, pos - start));
}

}  // namespace detail

inline Image decode_ppm(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw Error(ErrorCode::kFormat, "not a binary PPM (P6): " + path);
  std::size_t pos = 2;
  const std::size_t w = detail::ppm_header_int(bytes, pos, path);
  const std::size_t h = detail::ppm_header_int(bytes, pos, path);
  const std::size_t maxval = detail::ppm_header_int(bytes, pos, path);
  if (maxval != 255) throw Error(ErrorCode::kFormat, "PPM maxval must be 255: " + path);
  ++pos;  // single whitespace after maxval
  Image img(w, h);
  if (bytes.size() < pos + img.rgb.size()) throw Error(ErrorCode::kFormat, "truncated PPM pixel data: " + path);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.rgb.size(), img.rgb.begin());
  return img;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open for reading: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_ppm(ss.str(), path);
}

}  // namespace arrag
