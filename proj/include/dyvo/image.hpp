// Planar-free interleaved image container and binary PGM/PPM serialization.
// 8-bit images cover RGB and grayscale (P6/P5), 16-bit single-channel images
// cover depth and panoptic label maps (P5 with maxval 65535, big-endian as
// netpbm requires).
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyvo {

template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c = 1, T fill = T(0))
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  T& at(int x, int y, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

using Image8 = Image<uint8_t>;
using Image16 = Image<uint16_t>;
using ImageF = Image<float>;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Image8 to_gray(const Image8& rgb) {
  if (rgb.channels == 1) return rgb;
  Image8 gray(rgb.width, rgb.height, 1);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      // Integer BT.601 weights; keeps conversion exactly reproducible.
      const int v = 299 * rgb.at(x, y, 0) + 587 * rgb.at(x, y, 1) + 114 * rgb.at(x, y, 2);
      gray.at(x, y) = static_cast<uint8_t>((v + 500) / 1000);
    }
  }
  return gray;
}

/// Bilinear sample at sub-pixel (x, y); caller guarantees
/// 0 <= x <= width-1 and 0 <= y <= height-1.
template <typename T>
inline double bilinear(const Image<T>& img, double x, double y, int c = 0) {
  int x0 = static_cast<int>(x);
  int y0 = static_cast<int>(y);
  if (x0 > img.width - 2) x0 = img.width - 2;
  if (y0 > img.height - 2) y0 = img.height - 2;
  if (x0 < 0) x0 = 0;
  if (y0 < 0) y0 = 0;
  const double ax = x - x0;
  const double ay = y - y0;
  const double v00 = img.at(x0, y0, c);
  const double v10 = img.at(x0 + 1, y0, c);
  const double v01 = img.at(x0, y0 + 1, c);
  const double v11 = img.at(x0 + 1, y0 + 1, c);
  return (1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11);
}

inline Image8 resize_bilinear(const Image8& src, int w, int h) {
  Image8 dst(w, h, src.channels);
  const double sx = static_cast<double>(src.width) / w;
  const double sy = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) * sx - 0.5;
      const double v = (y + 0.5) * sy - 0.5;
      for (int c = 0; c < src.channels; ++c) {
        double s = bilinear(src, u < 0 ? 0 : u, v < 0 ? 0 : v, c);
        dst.at(x, y, c) = static_cast<uint8_t>(s + 0.5);
      }
    }
  }
  return dst;
}

/// Summed-area table; integral.at(x, y) holds the sum over [0,x) x [0,y).
inline std::vector<uint32_t> integral_image(const Image8& img) {
  const int w = img.width + 1;
  const int h = img.height + 1;
  std::vector<uint32_t> sums(static_cast<size_t>(w) * h, 0);
  for (int y = 0; y < img.height; ++y) {
    uint32_t row = 0;
    for (int x = 0; x < img.width; ++x) {
      row += img.at(x, y);
      sums[static_cast<size_t>(y + 1) * w + (x + 1)] = sums[static_cast<size_t>(y) * w + (x + 1)] + row;
    }
  }
  return sums;
}

/// Mean intensity over the (2r+1)^2 box centered at (x, y); the box must lie
/// inside the image.
inline double box_mean(const std::vector<uint32_t>& integral, int stride_w, int x, int y,
                       int r) {
  const int x0 = x - r;
  const int y0 = y - r;
  const int x1 = x + r + 1;
  const int y1 = y + r + 1;
  const uint32_t s = integral[static_cast<size_t>(y1) * stride_w + x1] -
                     integral[static_cast<size_t>(y0) * stride_w + x1] -
                     integral[static_cast<size_t>(y1) * stride_w + x0] +
                     integral[static_cast<size_t>(y0) * stride_w + x0];
  const int n = (2 * r + 1) * (2 * r + 1);
  return static_cast<double>(s) / n;
}

namespace detail {

inline int pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one unsigned integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) throw IoError("pnm: malformed header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace detail

/// Writes P5 (1 channel) or P6 (3 channels), 8-bit.
inline void write_pnm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("pnm: unsupported channel count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pnm: cannot open " + path.string() + " for writing");
  out << (img.channels == 3 ? "P6\n" : "P5\n") << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("pnm: short write on " + path.string());
}

/// Writes 16-bit single-channel P5, most significant byte first.
inline void write_pnm16(const std::filesystem::path& path, const Image16& img) {
  if (img.channels != 1) throw IoError("pnm16: single channel only");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pnm16: cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << " " << img.height << "\n65535\n";
  std::vector<uint8_t> buf(img.data.size() * 2);
  for (size_t i = 0; i < img.data.size(); ++i) {
    buf[2 * i] = static_cast<uint8_t>(img.data[i] >> 8);
    buf[2 * i + 1] = static_cast<uint8_t>(img.data[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("pnm16: short write on " + path.string());
}

/// Reads P5/P6 with maxval 255.
inline Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("pnm: cannot open " + path.string());
  char p = 0, kind = 0;
  in.get(p);
  in.get(kind);
  if (p != 'P' || (kind != '5' && kind != '6')) throw IoError("pnm: bad magic in " + path.string());
  const int w = detail::pnm_token(in);
  const int h = detail::pnm_token(in);
  const int maxval = detail::pnm_token(in);
  if (maxval != 255) throw IoError("pnm: expected maxval 255 in " + path.string());
  Image8 img(w, h, kind == '6' ? 3 : 1);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw IoError("pnm: truncated pixel data in " + path.string());
  return img;
}

/// Reads 16-bit single-channel P5 (maxval > 255), big-endian.
inline Image16 read_pnm16(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("pnm16: cannot open " + path.string());
  char p = 0, kind = 0;
  in.get(p);
  in.get(kind);
  if (p != 'P' || kind != '5') throw IoError("pnm16: bad magic in " + path.string());
  const int w = detail::pnm_token(in);
  const int h = detail::pnm_token(in);
  const int maxval = detail::pnm_token(in);
  if (maxval <= 255 || maxval > 65535) throw IoError("pnm16: expected 16-bit maxval in " + path.string());
  Image16 img(w, h, 1);
  std::vector<uint8_t> buf(img.data.size() * 2);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError("pnm16: truncated pixel data in " + path.string());
  for (size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
  return img;
}

}  // namespace dyvo
