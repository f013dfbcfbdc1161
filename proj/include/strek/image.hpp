#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "strek/tensor.hpp"

namespace strek {

/// Single-channel row-major image with intensities in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  float at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;

  template <class T>
  Tensor<T> to_tensor() const {
    return Tensor<T>(Shape{1, height, width}, std::vector<T>(pixels.begin(), pixels.end()));
  }
};

/// Counter-clockwise rotation of a row-major h x w grid by k quarter turns.
/// Output dims are swapped for odd k.
template <class V>
std::vector<V> rotate_grid_90k(const std::vector<V>& in, std::size_t h, std::size_t w, int k) {
  k = ((k % 4) + 4) % 4;
  std::vector<V> out(in.size());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const V v = in[r * w + c];
      switch (k) {
        case 0: out[r * w + c] = v; break;
        case 1: out[(w - 1 - c) * h + r] = v; break;
        case 2: out[(h - 1 - r) * w + (w - 1 - c)] = v; break;
        default: out[c * h + (h - 1 - r)] = v; break;
      }
    }
  return out;
}

inline Image rotate_image_90k(const Image& image, int k) {
  Image out;
  const bool odd = (((k % 4) + 4) % 4) % 2 == 1;
  out.height = odd ? image.width : image.height;
  out.width = odd ? image.height : image.width;
  out.pixels = rotate_grid_90k(image.pixels, image.height, image.width, k);
  return out;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string pgm_token(std::istream& is) {
  std::string tok;
  char ch = 0;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace detail

inline Image read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image " + path);
  if (detail::pgm_token(is) != "P5") throw std::runtime_error(path + ": not a binary PGM (P5)");
  const auto w = std::stoul(detail::pgm_token(is));
  const auto h = std::stoul(detail::pgm_token(is));
  const auto maxval = std::stoul(detail::pgm_token(is));
  if (maxval == 0 || maxval > 65535) throw std::runtime_error(path + ": bad maxval");
  Image img(h, w);
  if (maxval < 256) {
    std::vector<unsigned char> buf(h * w);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw std::runtime_error(path + ": truncated pixel data");
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i]) / static_cast<float>(maxval);
  } else {
    std::vector<unsigned char> buf(2 * h * w);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw std::runtime_error(path + ": truncated pixel data");
    for (std::size_t i = 0; i < h * w; ++i)
      img.pixels[i] = static_cast<float>((buf[2 * i] << 8) | buf[2 * i + 1]) / static_cast<float>(maxval);
  }
  return img;
}

/// 8-bit quantization of values clamped to [0,1].
inline void write_pgm(const std::string& path, const Image& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image " + path);
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> buf(image.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("failed writing image " + path);
}

/// Linearly rescales values to [0,1] (constant input maps to 0.5).
inline Image normalize_for_display(std::size_t h, std::size_t w, const std::vector<double>& values) {
  Image img(h, w);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < values.size(); ++i)
    img.pixels[i] = span > 0 ? static_cast<float>((values[i] - *lo) / span) : 0.5f;
  return img;
}

}  // namespace strek
