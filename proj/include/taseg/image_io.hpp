#pragma once

// Binary graymap (P5, one channel) and pixmap (P6, three channels) codecs,
// maxval 255.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "taseg/error.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // row-major, channel-interleaved
};

inline std::vector<std::uint8_t> encode_pnm(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("image must have 1 or 3 channels");
  if (img.pixels.size() != img.height * img.width * img.channels) {
    throw FormatError("image payload does not match its dimensions");
  }
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline Image8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& what = "image") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> FormatError {
    return FormatError(what + ": " + msg + " at byte offset " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail(std::string("expected ") + field);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw fail(std::string(field) + " too large");
      ++pos;
    }
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw fail("bad magic (expected P5 or P6)");
  }
  Image8 img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw fail("maxval " + std::to_string(maxval) + " unsupported (only 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("missing whitespace after header");
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() - pos < n) {
    throw fail("truncated payload: " + std::to_string(bytes.size() - pos) + " of " + std::to_string(n) +
               " bytes present");
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline void write_image(const std::string& path, const Image8& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write image '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing image '" + path + "'");
}

inline Image8 read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes, path);
}

inline std::uint8_t quantize(Scalar v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// [H x W x c] tensor with values in [0, 1] to 8-bit.
inline Image8 to_image8(const Tensor& t) {
  if (t.ndim() != 3 || (t.dim(2) != 1 && t.dim(2) != 3)) {
    throw ShapeError("to_image8: expected [H x W x 1|3], got " + to_string(t.shape()));
  }
  Image8 img{t.dim(0), t.dim(1), t.dim(2), {}};
  img.pixels.reserve(t.size());
  for (Scalar v : t.data()) img.pixels.push_back(quantize(v));
  return img;
}

inline Tensor to_tensor(const Image8& img) {
  Tensor t({img.height, img.width, img.channels});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = static_cast<Scalar>(img.pixels[i]) / Scalar{255};
  return t;
}

}  // namespace taseg
