#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ckd/matrix.hpp"

namespace ckd {

// Interleaved float image, values in [0, 1]. c is 1 (thermal) or 3 (RGB).
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> pix;

  Image() = default;
  Image(int h_, int w_, int c_, float fill = 0.f)
      : h(h_), w(w_), c(c_), pix(static_cast<size_t>(h_) * w_ * c_, fill) {}

  float& at(int y, int x, int ch) {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  float at(int y, int x, int ch) const {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }

  float mean(int ch) const {
    double s = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += at(y, x, ch);
    return static_cast<float>(s / (static_cast<double>(h) * w));
  }

  float mean_all() const {
    double s = 0;
    for (float v : pix) s += v;
    return static_cast<float>(s / pix.size());
  }
};

// Bilinear sample with pixel centers at integer+0.5; out-of-frame reads
// return `fill` for the given channel.
inline float sample_bilinear(const Image& img, double x, double y, int ch,
                             float fill) {
  const double fx = x - 0.5, fy = y - 0.5;
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0, ay = fy - y0;
  auto px = [&](int yy, int xx) -> float {
    if (xx < 0 || yy < 0 || xx >= img.w || yy >= img.h) return fill;
    return img.at(yy, xx, ch);
  };
  const double top = px(y0, x0) * (1 - ax) + px(y0, x0 + 1) * ax;
  const double bot = px(y0 + 1, x0) * (1 - ax) + px(y0 + 1, x0 + 1) * ax;
  return static_cast<float>(top * (1 - ay) + bot * ay);
}

// ---- Netpbm I/O (binary P5/P6, 8-bit). The dataset interchange format. ----

inline void write_pnm(const Image& img, const std::string& path) {
  if (img.c != 1 && img.c != 3) contract_error("write_pnm: channels must be 1 or 3");
  std::ofstream f(path, std::ios::binary);
  if (!f) data_error("write_pnm: cannot open " + path);
  f << (img.c == 1 ? "P5" : "P6") << "\n" << img.w << " " << img.h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<size_t>(img.w) * img.c);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        const float v = std::clamp(img.at(y, x, ch), 0.f, 1.f);
        row[static_cast<size_t>(x) * img.c + ch] =
            static_cast<std::uint8_t>(std::lround(v * 255.f));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) data_error("write_pnm: write failed for " + path);
}

inline Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) data_error("read_pnm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P6")
    data_error("read_pnm: unsupported format '" + magic + "' in " + path);
  auto next_int = [&]() -> int {
    // Skips whitespace and '#' comment lines.
    for (;;) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
    int v = -1;
    f >> v;
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255)
    data_error("read_pnm: bad header in " + path);
  f.get();  // single whitespace after maxval
  Image img(h, w, magic == "P5" ? 1 : 3);
  std::vector<std::uint8_t> raw(static_cast<size_t>(w) * h * img.c);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<size_t>(f.gcount()) != raw.size())
    data_error("read_pnm: truncated pixel data in " + path);
  for (size_t i = 0; i < raw.size(); ++i)
    img.pix[i] = static_cast<float>(raw[i]) / 255.f;
  return img;
}

}  // namespace ckd
