#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ckd/box.hpp"
#include "ckd/image.hpp"
#include "ckd/rng.hpp"

namespace ckd {

// Aligned RGB + thermal frame with one annotated target.
struct FramePair {
  Image rgb;  // H x W x 3
  Image tir;  // H x W x 1
  BBox gt;
};

struct Sequence {
  std::string name;
  std::vector<FramePair> frames;
};

// Controls the global intensity statistics of the two modalities. The
// defaults deliberately separate the thermal mean/contrast from the RGB
// grayscale statistics so the two modalities carry distinct styles.
struct StylePreset {
  double rgb_bg_level = 0.32;
  double rgb_bg_texture = 0.22;
  double rgb_target_lift = 0.30;
  double rgb_noise = 0.015;
  double tir_bg_level = 0.58;
  double tir_target_gain = 0.38;
  double tir_distractor_gain = 0.08;
  double tir_noise = 0.015;
  int tir_smooth_radius = 2;
  double motion_scale = 2.0;  // random-walk velocity sigma, px/frame
  int distractors = 2;
};

inline StylePreset style_preset(const std::string& name) {
  if (name == "default") return {};
  if (name == "static") {
    StylePreset p;
    p.motion_scale = 0.0;
    return p;
  }
  if (name == "lowgap") {
    StylePreset p;
    p.tir_bg_level = 0.40;
    p.tir_target_gain = 0.30;
    return p;
  }
  contract_error("unknown style preset '" + name + "'");
}

namespace detail {

// Two-pass separable box blur, all channels.
inline void box_blur(Image& img, int radius) {
  if (radius <= 0) return;
  Image tmp = img;
  const int win = 2 * radius + 1;
  for (int ch = 0; ch < img.c; ++ch) {
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double s = 0;
        for (int k = -radius; k <= radius; ++k)
          s += img.at(y, std::clamp(x + k, 0, img.w - 1), ch);
        tmp.at(y, x, ch) = static_cast<float>(s / win);
      }
    for (int x = 0; x < img.w; ++x)
      for (int y = 0; y < img.h; ++y) {
        double s = 0;
        for (int k = -radius; k <= radius; ++k)
          s += tmp.at(std::clamp(y + k, 0, img.h - 1), x, ch);
        img.at(y, x, ch) = static_cast<float>(s / win);
      }
  }
}

struct Walker {
  double cx, cy, vx = 0, vy = 0;

  void step(double sigma, double margin_x, double margin_y, int canvas, Rng& rng) {
    vx = 0.85 * vx + rng.normal(0, sigma * 0.5);
    vy = 0.85 * vy + rng.normal(0, sigma * 0.5);
    cx += vx;
    cy += vy;
    if (cx < margin_x) { cx = margin_x; vx = std::abs(vx); }
    if (cx > canvas - margin_x) { cx = canvas - margin_x; vx = -std::abs(vx); }
    if (cy < margin_y) { cy = margin_y; vy = std::abs(vy); }
    if (cy > canvas - margin_y) { cy = canvas - margin_y; vy = -std::abs(vy); }
  }
};

inline void draw_textured_rect(Image& rgb, const BBox& b, const float base[3],
                               const std::vector<float>& tile, int tile_n,
                               double amplitude) {
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y)));
  const int x1 = std::min(rgb.w, static_cast<int>(std::ceil(b.x + b.w)));
  const int y1 = std::min(rgb.h, static_cast<int>(std::ceil(b.y + b.h)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const int ty = (y - y0) % tile_n, tx = (x - x0) % tile_n;
      const float t = tile[static_cast<size_t>(ty) * tile_n + tx];
      for (int ch = 0; ch < 3; ++ch)
        rgb.at(y, x, ch) =
            std::clamp(base[ch] + static_cast<float>(amplitude) * t, 0.f, 1.f);
    }
}

inline void draw_blob(Image& tir, double cx, double cy, double sx, double sy,
                      double gain) {
  const int x0 = std::max(0, static_cast<int>(cx - 3 * sx));
  const int x1 = std::min(tir.w, static_cast<int>(cx + 3 * sx) + 1);
  const int y0 = std::max(0, static_cast<int>(cy - 3 * sy));
  const int y1 = std::min(tir.h, static_cast<int>(cy + 3 * sy) + 1);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double dx = (x + 0.5 - cx) / sx, dy = (y + 0.5 - cy) / sy;
      const double v = gain * std::exp(-0.5 * (dx * dx + dy * dy));
      float& p = tir.at(y, x, 0);
      p = std::clamp(p + static_cast<float>(v), 0.f, 1.f);
    }
}

}  // namespace detail

// Deterministic two-modality sequence: a textured target on RGB clutter and
// a warm blob on a smooth thermal background, sharing exact annotations.
// RGB distractors reuse the target texture; in thermal they are faint, so
// the modalities genuinely complement each other.
inline Sequence generate_synthetic_sequence(std::uint64_t seed, int length,
                                            int canvas,
                                            const StylePreset& style = {}) {
  if (length < 2) contract_error("generate_synthetic_sequence: length must be >= 2");
  if (canvas < 32) contract_error("generate_synthetic_sequence: canvas must be >= 32");
  Rng rng(seed ^ 0x53594e5448ULL);

  const double tw = rng.uniform(canvas / 9.0, canvas / 5.0);
  const double th = rng.uniform(canvas / 9.0, canvas / 5.0);

  float target_base[3], distractor_base[3];
  for (int ch = 0; ch < 3; ++ch) {
    target_base[ch] = static_cast<float>(rng.uniform(0.45, 0.85));
    distractor_base[ch] = std::clamp(
        target_base[ch] + static_cast<float>(rng.uniform(-0.08, 0.08)), 0.f, 1.f);
  }
  const int tile_n = 8;
  std::vector<float> tile(tile_n * tile_n);
  for (auto& v : tile) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  // Static cluttered RGB background.
  Image bg(canvas, canvas, 3, static_cast<float>(style.rgb_bg_level));
  const int n_patches = 10;
  for (int i = 0; i < n_patches; ++i) {
    const int px = static_cast<int>(rng.uniform_int(0, canvas - 1));
    const int py = static_cast<int>(rng.uniform_int(0, canvas - 1));
    const int pw = static_cast<int>(rng.uniform_int(canvas / 8, canvas / 3));
    const int ph = static_cast<int>(rng.uniform_int(canvas / 8, canvas / 3));
    float shade[3];
    for (int ch = 0; ch < 3; ++ch)
      shade[ch] = static_cast<float>(style.rgb_bg_level +
                                     style.rgb_bg_texture * rng.uniform(-1.0, 1.0));
    for (int y = py; y < std::min(canvas, py + ph); ++y)
      for (int x = px; x < std::min(canvas, px + pw); ++x)
        for (int ch = 0; ch < 3; ++ch)
          bg.at(y, x, ch) = std::clamp(shade[ch], 0.f, 1.f);
  }
  detail::box_blur(bg, 3);

  detail::Walker target{rng.uniform(tw, canvas - tw), rng.uniform(th, canvas - th)};
  std::vector<detail::Walker> extras;
  for (int i = 0; i < style.distractors; ++i)
    extras.push_back({rng.uniform(tw, canvas - tw), rng.uniform(th, canvas - th)});

  Sequence seq;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_%06llu",
                  static_cast<unsigned long long>(seed));
    seq.name = buf;
  }
  seq.frames.reserve(length);
  for (int t = 0; t < length; ++t) {
    if (t > 0) {
      target.step(style.motion_scale, 0.6 * tw, 0.6 * th, canvas, rng);
      for (auto& e : extras) e.step(style.motion_scale, 0.6 * tw, 0.6 * th, canvas, rng);
    }
    FramePair fp;
    fp.rgb = bg;
    const BBox tb{target.cx - tw / 2, target.cy - th / 2, tw, th};
    for (const auto& e : extras) {
      const BBox eb{e.cx - tw / 2, e.cy - th / 2, tw, th};
      detail::draw_textured_rect(fp.rgb, eb, distractor_base, tile, tile_n,
                                 style.rgb_target_lift);
    }
    detail::draw_textured_rect(fp.rgb, tb, target_base, tile, tile_n,
                               style.rgb_target_lift);
    for (auto& v : fp.rgb.pix)
      v = std::clamp(v + static_cast<float>(rng.normal(0, style.rgb_noise)), 0.f, 1.f);

    fp.tir = Image(canvas, canvas, 1, static_cast<float>(style.tir_bg_level));
    for (const auto& e : extras)
      detail::draw_blob(fp.tir, e.cx, e.cy, tw / 3.0, th / 3.0,
                        style.tir_distractor_gain);
    detail::draw_blob(fp.tir, target.cx, target.cy, tw / 3.0, th / 3.0,
                      style.tir_target_gain);
    for (auto& v : fp.tir.pix)
      v = std::clamp(v + static_cast<float>(rng.normal(0, style.tir_noise)), 0.f, 1.f);
    detail::box_blur(fp.tir, style.tir_smooth_radius);

    fp.gt = clip_to_frame(tb, canvas, canvas);
    seq.frames.push_back(std::move(fp));
  }
  return seq;
}

// ---- On-disk dataset (<root>/<seq>/{rgb,tir}/NNNNNN.p?m + groundtruth.txt) ----

inline void save_dataset(const std::vector<Sequence>& seqs, const std::string& root) {
  namespace fs = std::filesystem;
  for (const auto& seq : seqs) {
    const fs::path dir = fs::path(root) / seq.name;
    fs::create_directories(dir / "rgb");
    fs::create_directories(dir / "tir");
    std::ofstream gt(dir / "groundtruth.txt");
    if (!gt) data_error("save_dataset: cannot write " + (dir / "groundtruth.txt").string());
    char buf[32];
    for (size_t i = 0; i < seq.frames.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%06zu", i);
      write_pnm(seq.frames[i].rgb, (dir / "rgb" / (std::string(buf) + ".ppm")).string());
      write_pnm(seq.frames[i].tir, (dir / "tir" / (std::string(buf) + ".pgm")).string());
      const BBox& b = seq.frames[i].gt;
      gt << b.x << "," << b.y << "," << b.w << "," << b.h << "\n";
    }
  }
}

inline std::vector<Sequence> load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  std::vector<Sequence> out;
  if (!fs::exists(root)) return out;
  std::vector<fs::path> seq_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) seq_dirs.push_back(e.path());
  std::sort(seq_dirs.begin(), seq_dirs.end());

  for (const auto& dir : seq_dirs) {
    Sequence seq;
    seq.name = dir.filename().string();

    std::ifstream gtf(dir / "groundtruth.txt");
    if (!gtf) data_error("load_dataset: missing groundtruth.txt in sequence '" + seq.name + "'");
    std::vector<BBox> boxes;
    std::string line;
    while (std::getline(gtf, line)) {
      if (line.empty()) continue;
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ss(line);
      BBox b;
      if (!(ss >> b.x >> b.y >> b.w >> b.h))
        data_error("load_dataset: bad annotation line " +
                   std::to_string(boxes.size() + 1) + " in sequence '" + seq.name + "'");
      boxes.push_back(b);
    }

    auto list_images = [&](const char* sub) {
      std::vector<fs::path> files;
      const fs::path d = dir / sub;
      if (fs::exists(d))
        for (const auto& e : fs::directory_iterator(d))
          if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      return files;
    };
    const auto rgb_files = list_images("rgb");
    const auto tir_files = list_images("tir");
    if (rgb_files.size() != boxes.size() || tir_files.size() != boxes.size())
      data_error("load_dataset: sequence '" + seq.name + "' has " +
                 std::to_string(rgb_files.size()) + " rgb / " +
                 std::to_string(tir_files.size()) + " tir frames but " +
                 std::to_string(boxes.size()) + " annotation lines");

    for (size_t i = 0; i < boxes.size(); ++i) {
      FramePair fp;
      fp.rgb = read_pnm(rgb_files[i].string());
      fp.tir = read_pnm(tir_files[i].string());
      if (fp.rgb.c != 3)
        data_error("load_dataset: " + rgb_files[i].string() + " is not RGB");
      if (fp.tir.c != 1)
        data_error("load_dataset: " + tir_files[i].string() + " is not single-channel");
      if (fp.rgb.h != fp.tir.h || fp.rgb.w != fp.tir.w)
        data_error("load_dataset: modality size mismatch in sequence '" + seq.name +
                   "' frame " + std::to_string(i));
      fp.gt = clip_to_frame(boxes[i], fp.rgb.w, fp.rgb.h);
      seq.frames.push_back(std::move(fp));
    }
    if (seq.frames.size() < 2)
      data_error("load_dataset: sequence '" + seq.name + "' has fewer than 2 frames");
    out.push_back(std::move(seq));
  }
  return out;
}

// ---- Template/search crops ----

struct CropConfig {
  int template_size = 32;
  int search_size = 64;
  double template_factor = 2.0;
  double search_factor = 4.0;
};

// Affine map from search-crop coordinates back to frame coordinates:
// x_frame = x_crop * scale + ox.
struct CropTransform {
  double scale = 1.0, ox = 0.0, oy = 0.0;

  BBox apply(const BBox& b) const {
    return {b.x * scale + ox, b.y * scale + oy, b.w * scale, b.h * scale};
  }
  BBox invert(const BBox& b) const {
    return {(b.x - ox) / scale, (b.y - oy) / scale, b.w / scale, b.h / scale};
  }
};

// The unit of both training and inference: paired crops plus the exact
// mapping from search-crop coordinates back to the frame.
struct FrameSample {
  Image template_rgb, template_tir;
  Image search_rgb, search_tir;
  BBox gt_in_search;
  CropTransform transform;
};

namespace detail {

inline Image crop_resize(const Image& img, double cx, double cy, double side,
                         int out_size) {
  Image out(out_size, out_size, img.c);
  std::vector<float> fill(img.c);
  for (int ch = 0; ch < img.c; ++ch) fill[ch] = img.mean(ch);
  const double scale = side / out_size;
  const double ox = cx - side / 2, oy = cy - side / 2;
  for (int y = 0; y < out_size; ++y)
    for (int x = 0; x < out_size; ++x) {
      const double sx = (x + 0.5) * scale + ox;
      const double sy = (y + 0.5) * scale + oy;
      for (int ch = 0; ch < img.c; ++ch)
        out.at(y, x, ch) = sample_bilinear(img, sx, sy, ch, fill[ch]);
    }
  return out;
}

}  // namespace detail

// Square context crops: side = factor * sqrt(w*h), centered on the box.
// The template is cut around the template frame's annotation, the search
// region around the previous (or jittered) box.
inline FrameSample make_sample(const FramePair& frame, const FramePair& template_frame,
                               const BBox& prev_box, const CropConfig& cfg) {
  if (prev_box.degenerate())
    contract_error("make_sample: degenerate previous box");
  if (template_frame.gt.degenerate())
    contract_error("make_sample: degenerate template box");

  FrameSample s;
  const BBox& tb = template_frame.gt;
  const double t_side = cfg.template_factor * std::sqrt(tb.w * tb.h);
  s.template_rgb = detail::crop_resize(template_frame.rgb, tb.cx(), tb.cy(), t_side,
                                       cfg.template_size);
  s.template_tir = detail::crop_resize(template_frame.tir, tb.cx(), tb.cy(), t_side,
                                       cfg.template_size);

  const double side = cfg.search_factor * std::sqrt(prev_box.w * prev_box.h);
  s.search_rgb = detail::crop_resize(frame.rgb, prev_box.cx(), prev_box.cy(), side,
                                     cfg.search_size);
  s.search_tir = detail::crop_resize(frame.tir, prev_box.cx(), prev_box.cy(), side,
                                     cfg.search_size);
  s.transform = {side / cfg.search_size, prev_box.cx() - side / 2,
                 prev_box.cy() - side / 2};
  s.gt_in_search = s.transform.invert(frame.gt);
  return s;
}

}  // namespace ckd
