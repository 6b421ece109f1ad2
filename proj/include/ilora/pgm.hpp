#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ilora/error.hpp"
#include "ilora/maskgeom.hpp"

namespace ilora {

// Parses a P2 (ASCII) or P5 (binary) PGM image; nonzero samples are foreground.
inline BinaryMask parse_pgm(const std::string& content) {
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    while (pos < content.size()) {
      if (std::isspace(static_cast<unsigned char>(content[pos]))) {
        ++pos;
      } else if (content[pos] == '#') {
        while (pos < content.size() && content[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) -> std::size_t {
    skip_space_and_comments();
    const std::size_t start = pos;
    while (pos < content.size() && std::isdigit(static_cast<unsigned char>(content[pos]))) ++pos;
    if (start == pos) throw ValidationError(std::string("PGM: expected ") + what);
    const std::string digits = content.substr(start, pos - start);
    if (digits.size() > 9) throw ValidationError(std::string("PGM: ") + what + " too large");
    return std::stoul(digits);
  };

  if (content.size() < 2 || content[0] != 'P' || (content[1] != '2' && content[1] != '5')) {
    throw ValidationError("PGM: magic number must be P2 or P5");
  }
  const bool binary = content[1] == '5';
  pos = 2;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (width == 0 || height == 0) throw ValidationError("PGM: zero-sized image");
  if (maxval == 0 || maxval > 65535) throw ValidationError("PGM: maxval out of range");

  BinaryMask mask(height, width);
  const std::size_t count = width * height;
  if (binary) {
    if (pos >= content.size() || !std::isspace(static_cast<unsigned char>(content[pos]))) {
      throw ValidationError("PGM: missing whitespace before raster");
    }
    ++pos;
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (content.size() - pos < count * bytes_per) throw ValidationError("PGM: truncated raster");
    for (std::size_t i = 0; i < count; ++i) {
      unsigned v = static_cast<unsigned char>(content[pos + i * bytes_per]);
      if (bytes_per == 2) v = (v << 8) | static_cast<unsigned char>(content[pos + i * 2 + 1]);
      if (v > maxval) throw ValidationError("PGM: sample exceeds maxval");
      mask.bits[i] = v != 0;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t v = read_uint("sample");
      if (v > maxval) throw ValidationError("PGM: sample exceeds maxval");
      mask.bits[i] = v != 0;
    }
  }
  return mask;
}

inline BinaryMask read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_pgm(ss.str());
}

}  // namespace ilora
