#include "magic/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace magic {

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace {

void write_netpbm(const std::string& path, const char* magic, std::int64_t h, std::int64_t w,
                  const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("short write on " + path);
}

std::int64_t read_token(std::istream& is) {
  std::string tok;
  while (is >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(is, rest);
      continue;
    }
    return std::stoll(tok);
  }
  throw std::runtime_error("netpbm: truncated header");
}

}  // namespace

void write_pgm(const std::string& path, const Tensor<float>& image) {
  const Shape& s = image.shape();
  std::int64_t h = 0, w = 0;
  if (s.size() == 3 && s[0] == 1) {
    h = s[1];
    w = s[2];
  } else if (s.size() == 2) {
    h = s[0];
    w = s[1];
  } else {
    throw ShapeError("write_pgm: expected [1,H,W] or [H,W], got " + shape_str(s));
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) bytes[static_cast<std::size_t>(i)] = quantize(image[i]);
  write_netpbm(path, "P5", h, w, bytes);
}

void write_ppm(const std::string& path, const Tensor<float>& image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(s));
  const std::int64_t h = s[1], w = s[2], plane = h * w;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * plane));
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) bytes[static_cast<std::size_t>(3 * i + c)] = quantize(image[c * plane + i]);
  write_netpbm(path, "P6", h, w, bytes);
}

Tensor<float> read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error(path + ": not a binary PGM");
  const std::int64_t w = read_token(is), h = read_token(is), maxval = read_token(is);
  if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error(path + ": unsupported PGM header");
  is.get();  // the single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error(path + ": truncated data");
  Tensor<float> out(Shape{1, h, w});
  for (std::int64_t i = 0; i < w * h; ++i) out[i] = static_cast<float>(bytes[static_cast<std::size_t>(i)]) / 255.0f;
  return out;
}

}  // namespace magic
