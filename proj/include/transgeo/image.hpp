#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace transgeo {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved float image, row-major (row, col, channel). Pixel values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h <= 0 || w <= 0 || c <= 0) throw ImageError("image extents must be positive");
  }

  float& at(int row, int col, int ch) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  float at(int row, int col, int ch) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }

  bool operator==(const Image&) const = default;
};

/// Bilinear sample at continuous coordinates where pixel (r, c) covers [c, c+1) x [r, r+1).
/// Points outside the closed image rectangle [0,width] x [0,height] return 0; inside, edge
/// pixels are clamped.
inline float sample_bilinear(const Image& img, double x, double y, int ch) {
  if (!(x >= 0.0 && x <= img.width && y >= 0.0 && y <= img.height)) return 0.0f;
  const double fx = std::clamp(x - 0.5, 0.0, double(img.width - 1));
  const double fy = std::clamp(y - 0.5, 0.0, double(img.height - 1));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double tx = fx - x0;
  const double ty = fy - y0;
  const double top = img.at(y0, x0, ch) * (1 - tx) + img.at(y0, x1, ch) * tx;
  const double bot = img.at(y1, x0, ch) * (1 - tx) + img.at(y1, x1, ch) * tx;
  return static_cast<float>(top * (1 - ty) + bot * ty);
}

/// Bilinear resize with half-pixel centers (edges clamped).
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (out_h == src.height && out_w == src.width) return src;
  Image out(out_h, out_w, src.channels);
  const double sy = double(src.height) / out_h;
  const double sx = double(src.width) / out_w;
  for (int r = 0; r < out_h; ++r) {
    for (int c = 0; c < out_w; ++c) {
      const double y = (r + 0.5) * sy;
      const double x = (c + 0.5) * sx;
      for (int ch = 0; ch < src.channels; ++ch) out.at(r, c, ch) = sample_bilinear(src, x, y, ch);
    }
  }
  return out;
}

/// Per-channel mean and standard deviation over a set of images.
struct ImageStats {
  std::vector<float> mean;
  std::vector<float> std;
};

inline ImageStats channel_stats(const std::vector<Image>& images) {
  if (images.empty()) throw ImageError("no images to take statistics over");
  const int c = images.front().channels;
  std::vector<double> s(c, 0.0), s2(c, 0.0);
  double count = 0;
  for (const auto& img : images) {
    if (img.channels != c) throw ImageError("channel count differs across images");
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      s[i % c] += img.data[i];
      s2[i % c] += double(img.data[i]) * img.data[i];
    }
    count += double(img.data.size()) / c;
  }
  ImageStats st;
  for (int k = 0; k < c; ++k) {
    const double m = s[k] / count;
    st.mean.push_back(float(m));
    st.std.push_back(float(std::sqrt(std::max(s2[k] / count - m * m, 1e-6))));
  }
  return st;
}

inline Image standardize(Image img, const ImageStats& st) {
  if (st.mean.size() != std::size_t(img.channels)) throw ImageError("statistics do not match channel count");
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const std::size_t k = i % img.channels;
    img.data[i] = (img.data[i] - st.mean[k]) / st.std[k];
  }
  return img;
}

namespace detail {

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline int read_header_int(std::istream& in) {
  // Skips whitespace and '#' comments per the netpbm format.
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int v = 0;
  if (!(in >> v) || v <= 0) throw ImageError("malformed netpbm header");
  return v;
}

}  // namespace detail

/// Encodes as binary P6 (3 channels) or P5 (1 channel), 8-bit, maxval 255.
inline std::string encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("PNM supports 1 or 3 channels");
  std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.data.size());
  for (float v : img.data) out.push_back(static_cast<char>(detail::quantize(v)));
  return out;
}

inline Image decode_pnm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  int channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw ImageError("unsupported netpbm magic");
  }
  const int w = detail::read_header_int(in);
  const int h = detail::read_header_int(in);
  const int maxval = detail::read_header_int(in);
  if (maxval != 255) throw ImageError("only maxval 255 is supported");
  if (!std::isspace(in.get())) throw ImageError("malformed netpbm header");
  const std::size_t offset = static_cast<std::size_t>(in.tellg());
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() < offset + need) throw ImageError("truncated netpbm payload");
  Image img(h, w, channels);
  for (std::size_t i = 0; i < need; ++i) {
    img.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[offset + i])) / 255.0f;
  }
  return img;
}

inline void save_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot write " + path);
  const std::string bytes = encode_pnm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageError("write failed: " + path);
}

inline Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot open image " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes);
}

}  // namespace transgeo
