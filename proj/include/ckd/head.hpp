#pragma once

#include <cmath>
#include <utility>

#include "ckd/box.hpp"
#include "ckd/data.hpp"
#include "ckd/matrix.hpp"
#include "ckd/rng.hpp"

namespace ckd {

constexpr int kHeadChannels = 32;
constexpr double kFocalAlpha = 2.0;
constexpr double kFocalBeta = 4.0;
constexpr double kLambdaL1 = 5.0;
constexpr double kLambdaIou = 2.0;
constexpr double kScoreClip = 1e-6;

// Maps live on the search grid in row-major cell order: row i = cell
// (i / G, i % G). Offsets and sizes are column pairs (x, y) / (w, h).
template <class S>
struct HeadOutput {
  Mat<S> score;   // N x 1
  Mat<S> offset;  // N x 2, sub-cell offsets in [0,1)
  Mat<S> size;    // N x 2, box size normalized by search side
  int grid = 0;
};

// Shared 1x1 projection, then one small conv stack per map:
// 3x3 conv + ReLU + 1x1 conv + sigmoid.
template <class S>
struct HeadBranchParams {
  Mat<S> conv_w;  // (9*Hc) x Hc
  Mat<S> conv_b;  // 1 x Hc
  Mat<S> out_w;   // Hc x C_out
  Mat<S> out_b;   // 1 x C_out
};

template <class S>
struct HeadParams {
  Mat<S> proj_w;  // C_in x Hc
  Mat<S> proj_b;  // 1 x Hc
  HeadBranchParams<S> score, offset, size;
};

template <class S>
HeadBranchParams<S> init_head_branch(int hc, int c_out, Rng& rng) {
  HeadBranchParams<S> b;
  b.conv_w.resize(9 * hc, hc);
  fill_truncated_normal(b.conv_w, 0.02, rng);
  b.conv_b = Mat<S>::Zero(1, hc);
  b.out_w.resize(hc, c_out);
  fill_truncated_normal(b.out_w, 0.02, rng);
  b.out_b = Mat<S>::Zero(1, c_out);
  return b;
}

template <class S>
HeadParams<S> init_head(int c_in, Rng& rng) {
  HeadParams<S> p;
  p.proj_w.resize(c_in, kHeadChannels);
  fill_truncated_normal(p.proj_w, 0.02, rng);
  p.proj_b = Mat<S>::Zero(1, kHeadChannels);
  p.score = init_head_branch<S>(kHeadChannels, 1, rng);
  p.offset = init_head_branch<S>(kHeadChannels, 2, rng);
  p.size = init_head_branch<S>(kHeadChannels, 2, rng);
  return p;
}

// Channel concatenation, RGB first. Inputs must already cover the full grid.
template <class S>
Mat<S> fuse_student_features(const Mat<S>& rgb_final, const Mat<S>& tir_final) {
  if (rgb_final.rows() != tir_final.rows())
    contract_error("fuse_student_features: search grids differ");
  Mat<S> fused(rgb_final.rows(), rgb_final.cols() + tir_final.cols());
  fused.leftCols(rgb_final.cols()) = rgb_final;
  fused.rightCols(tir_final.cols()) = tir_final;
  return fused;
}

namespace detail {

// 3x3 neighborhood gather with zero padding; rows stay in grid order.
template <class S>
Mat<S> im2col3(const Mat<S>& x, int grid) {
  const Eigen::Index hc = x.cols();
  Mat<S> m = Mat<S>::Zero(x.rows(), 9 * hc);
  for (int cy = 0; cy < grid; ++cy)
    for (int cx = 0; cx < grid; ++cx) {
      const int row = cy * grid + cx;
      int slot = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++slot) {
          const int ny = cy + dy, nx = cx + dx;
          if (ny < 0 || ny >= grid || nx < 0 || nx >= grid) continue;
          m.middleCols(slot * hc, hc).row(row) = x.row(ny * grid + nx);
        }
    }
  return m;
}

template <class S>
void im2col3_backward(const Mat<S>& dm, int grid, Mat<S>& dx) {
  const Eigen::Index hc = dx.cols();
  for (int cy = 0; cy < grid; ++cy)
    for (int cx = 0; cx < grid; ++cx) {
      const int row = cy * grid + cx;
      int slot = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx2 = -1; dx2 <= 1; ++dx2, ++slot) {
          const int ny = cy + dy, nx = cx + dx2;
          if (ny < 0 || ny >= grid || nx < 0 || nx >= grid) continue;
          dx.row(ny * grid + nx) += dm.middleCols(slot * hc, hc).row(row);
        }
    }
}

template <class S>
Mat<S> relu(const Mat<S>& x) {
  return x.array().max(S(0)).matrix();
}

template <class S>
Mat<S> sigmoid(const Mat<S>& x) {
  return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

template <class S>
struct HeadBranchCache {
  Mat<S> m;     // im2col of the projected features
  Mat<S> pre1;  // conv output before ReLU
  Mat<S> act1;  // after ReLU
  Mat<S> out;   // after sigmoid
};

template <class S>
Mat<S> head_branch_forward(const Mat<S>& t0, const HeadBranchParams<S>& p, int grid,
                           HeadBranchCache<S>& c) {
  c.m = im2col3(t0, grid);
  c.pre1.noalias() = c.m * p.conv_w;
  c.pre1.rowwise() += p.conv_b.row(0);
  c.act1 = relu(c.pre1);
  Mat<S> z = c.act1 * p.out_w;
  z.rowwise() += p.out_b.row(0);
  c.out = sigmoid(z);
  return c.out;
}

// Returns the gradient w.r.t. t0; parameter grads accumulate into `g`.
template <class S>
Mat<S> head_branch_backward(const HeadBranchParams<S>& p, const HeadBranchCache<S>& c,
                            const Mat<S>& d_out, int grid, Eigen::Index hc,
                            HeadBranchParams<S>& g) {
  const Mat<S> dz =
      (d_out.array() * c.out.array() * (S(1) - c.out.array())).matrix();
  g.out_w.noalias() += c.act1.transpose() * dz;
  g.out_b += dz.colwise().sum();
  Mat<S> dact = dz * p.out_w.transpose();
  const Mat<S> dpre =
      (dact.array() * (c.pre1.array() > S(0)).template cast<S>()).matrix();
  g.conv_w.noalias() += c.m.transpose() * dpre;
  g.conv_b += dpre.colwise().sum();
  const Mat<S> dm = dpre * p.conv_w.transpose();
  Mat<S> dt0 = Mat<S>::Zero(c.m.rows(), hc);
  im2col3_backward(dm, grid, dt0);
  return dt0;
}

}  // namespace detail

template <class S>
struct HeadCache {
  Mat<S> x_in;
  Mat<S> pre0, t0;  // projection before/after ReLU
  detail::HeadBranchCache<S> score, offset, size;
  int grid = 0;
};

template <class S>
HeadOutput<S> head_forward(const Mat<S>& features, const HeadParams<S>& p, int grid,
                           HeadCache<S>* cache = nullptr) {
  if (features.rows() != static_cast<Eigen::Index>(grid) * grid)
    contract_error("head_forward: feature rows do not cover the grid");
  HeadCache<S> local;
  HeadCache<S>& c = cache ? *cache : local;
  c.grid = grid;
  c.x_in = features;
  c.pre0.noalias() = features * p.proj_w;
  c.pre0.rowwise() += p.proj_b.row(0);
  c.t0 = detail::relu(c.pre0);
  HeadOutput<S> out;
  out.grid = grid;
  out.score = detail::head_branch_forward(c.t0, p.score, grid, c.score);
  out.offset = detail::head_branch_forward(c.t0, p.offset, grid, c.offset);
  out.size = detail::head_branch_forward(c.t0, p.size, grid, c.size);
  if (!out.score.allFinite() || !out.offset.allFinite() || !out.size.allFinite())
    throw std::runtime_error("head_forward: non-finite output");
  return out;
}

template <class S>
struct HeadOutputGrad {
  Mat<S> score, offset, size;
};

template <class S>
Mat<S> head_backward(const HeadParams<S>& p, const HeadCache<S>& c,
                     const HeadOutputGrad<S>& d, HeadParams<S>& g) {
  const Eigen::Index hc = p.proj_w.cols();
  Mat<S> dt0 =
      detail::head_branch_backward(p.score, c.score, d.score, c.grid, hc, g.score);
  dt0 += detail::head_branch_backward(p.offset, c.offset, d.offset, c.grid, hc,
                                      g.offset);
  dt0 += detail::head_branch_backward(p.size, c.size, d.size, c.grid, hc, g.size);
  const Mat<S> dpre0 =
      (dt0.array() * (c.pre0.array() > S(0)).template cast<S>()).matrix();
  g.proj_w.noalias() += c.x_in.transpose() * dpre0;
  g.proj_b += dpre0.colwise().sum();
  return dpre0 * p.proj_w.transpose();
}

// ---- decoding ----

// Argmax cell (ties: smallest row-major index), center = (cell + offset) * p,
// size = size_map * search side. Crop coordinates.
template <class S>
BBox decode_box_crop(const HeadOutput<S>& out, int patch, int search_size) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < out.score.rows(); ++i)
    if (out.score(i, 0) > out.score(best, 0)) best = i;
  const int g = out.grid;
  const double cx = static_cast<double>(best % g);
  const double cy = static_cast<double>(best / g);
  const double px = (cx + static_cast<double>(out.offset(best, 0))) * patch;
  const double py = (cy + static_cast<double>(out.offset(best, 1))) * patch;
  const double w = static_cast<double>(out.size(best, 0)) * search_size;
  const double h = static_cast<double>(out.size(best, 1)) * search_size;
  return {px - w / 2, py - h / 2, w, h};
}

template <class S>
BBox decode_box(const HeadOutput<S>& out, int patch, int search_size,
                const CropTransform& transform) {
  return transform.apply(decode_box_crop(out, patch, search_size));
}

// ---- task loss ----

namespace detail {

// Center-based Gaussian target: 1 at the cell holding the gt center,
// falling off with per-axis std = box size / 4 in cells, at least one cell.
template <class S>
Mat<S> gaussian_target(const BBox& gt, int grid, int patch) {
  const double gcx = gt.cx() / patch, gcy = gt.cy() / patch;
  const int cx0 = std::clamp(static_cast<int>(std::floor(gcx)), 0, grid - 1);
  const int cy0 = std::clamp(static_cast<int>(std::floor(gcy)), 0, grid - 1);
  const double sx = std::max(1.0, gt.w / (4.0 * patch));
  const double sy = std::max(1.0, gt.h / (4.0 * patch));
  Mat<S> t(grid * grid, 1);
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      const double dx = (x - cx0) / sx, dy = (y - cy0) / sy;
      t(y * grid + x, 0) = static_cast<S>(std::exp(-0.5 * (dx * dx + dy * dy)));
    }
  t(cy0 * grid + cx0, 0) = S(1);
  return t;
}

inline std::pair<int, int> gt_cell(const BBox& gt, int grid, int patch) {
  return {std::clamp(static_cast<int>(std::floor(gt.cx() / patch)), 0, grid - 1),
          std::clamp(static_cast<int>(std::floor(gt.cy() / patch)), 0, grid - 1)};
}

struct GiouGrad {
  double value = 0;
  double dx1 = 0, dy1 = 0, dx2 = 0, dy2 = 0;  // w.r.t. predicted corners
};

// GIoU of corner boxes plus analytic derivatives w.r.t. the prediction.
inline GiouGrad giou_corners(double x1, double y1, double x2, double y2,
                             const BBox& gt) {
  GiouGrad r;
  const double g1 = gt.x, g2 = gt.y, g3 = gt.x + gt.w, g4 = gt.y + gt.h;
  const double iw = std::min(x2, g3) - std::max(x1, g1);
  const double ih = std::min(y2, g4) - std::max(y1, g2);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double ap = (x2 - x1) * (y2 - y1);
  const double ag = gt.w * gt.h;
  const double uni = ap + ag - inter;
  const double cw = std::max(x2, g3) - std::min(x1, g1);
  const double ch = std::max(y2, g4) - std::min(y1, g2);
  const double hull = cw * ch;
  if (uni <= 0 || hull <= 0) return r;
  r.value = inter / uni - (hull - uni) / hull;

  double di_x1 = 0, di_y1 = 0, di_x2 = 0, di_y2 = 0;
  if (inter > 0) {
    if (x1 > g1) di_x1 = -ih;
    if (x2 < g3) di_x2 = ih;
    if (y1 > g2) di_y1 = -iw;
    if (y2 < g4) di_y2 = iw;
  }
  const double da_x1 = -(y2 - y1), da_x2 = (y2 - y1);
  const double da_y1 = -(x2 - x1), da_y2 = (x2 - x1);
  const double dc_x1 = (x1 < g1) ? -ch : 0.0;
  const double dc_x2 = (x2 > g3) ? ch : 0.0;
  const double dc_y1 = (y1 < g2) ? -cw : 0.0;
  const double dc_y2 = (y2 > g4) ? cw : 0.0;

  auto combine = [&](double di, double da, double dc) {
    const double du = da - di;
    const double d_iou = (di * uni - inter * du) / (uni * uni);
    // Penalty term (hull - uni) / hull via the quotient rule.
    const double d_pen = (dc - du) / hull - (hull - uni) * dc / (hull * hull);
    return d_iou - d_pen;
  };
  r.dx1 = combine(di_x1, da_x1, dc_x1);
  r.dx2 = combine(di_x2, da_x2, dc_x2);
  r.dy1 = combine(di_y1, da_y1, dc_y1);
  r.dy2 = combine(di_y2, da_y2, dc_y2);
  return r;
}

}  // namespace detail

// Focal classification against a Gaussian target, plus L1 and GIoU terms on
// the box read at the gt-center cell. Weights 1 / 5 / 2.
template <class S>
S task_loss(const HeadOutput<S>& out, const BBox& gt, int patch, int search_size,
            HeadOutputGrad<S>* grad = nullptr, S grad_scale = S(1)) {
  if (gt.degenerate()) contract_error("task_loss: degenerate ground-truth box");
  const int grid = out.grid;
  const Mat<S> target = detail::gaussian_target<S>(gt, grid, patch);
  const auto [cx0, cy0] = detail::gt_cell(gt, grid, patch);
  const Eigen::Index center = static_cast<Eigen::Index>(cy0) * grid + cx0;

  if (grad) {
    if (grad->score.size() == 0) grad->score = Mat<S>::Zero(grid * grid, 1);
    if (grad->offset.size() == 0) grad->offset = Mat<S>::Zero(grid * grid, 2);
    if (grad->size.size() == 0) grad->size = Mat<S>::Zero(grid * grid, 2);
  }

  // Classification.
  double cls = 0;
  const double lo = kScoreClip, hi = 1.0 - kScoreClip;
  for (Eigen::Index i = 0; i < out.score.rows(); ++i) {
    const double p = std::clamp(static_cast<double>(out.score(i, 0)), lo, hi);
    const double t = static_cast<double>(target(i, 0));
    const bool clipped = static_cast<double>(out.score(i, 0)) != p;
    if (i == center) {
      cls += -std::pow(1 - p, kFocalAlpha) * std::log(p);
      if (grad && !clipped)
        grad->score(i, 0) += grad_scale *
                             static_cast<S>(kFocalAlpha * std::pow(1 - p, kFocalAlpha - 1) *
                                                std::log(p) -
                                            std::pow(1 - p, kFocalAlpha) / p);
    } else {
      const double w = std::pow(1 - t, kFocalBeta);
      cls += -w * std::pow(p, kFocalAlpha) * std::log(1 - p);
      if (grad && !clipped)
        grad->score(i, 0) +=
            grad_scale *
            static_cast<S>(-w * (kFocalAlpha * std::pow(p, kFocalAlpha - 1) *
                                     std::log(1 - p) -
                                 std::pow(p, kFocalAlpha) / (1 - p)));
    }
  }

  // Regression at the center cell.
  const double offx = static_cast<double>(out.offset(center, 0));
  const double offy = static_cast<double>(out.offset(center, 1));
  const double sw = static_cast<double>(out.size(center, 0));
  const double sh = static_cast<double>(out.size(center, 1));
  const double pcx = (cx0 + offx) * patch, pcy = (cy0 + offy) * patch;
  const double x1 = pcx - sw * search_size / 2, x2 = pcx + sw * search_size / 2;
  const double y1 = pcy - sh * search_size / 2, y2 = pcy + sh * search_size / 2;

  const double inv = 1.0 / search_size;
  const double e1 = x1 * inv - gt.x * inv;
  const double e2 = y1 * inv - gt.y * inv;
  const double e3 = x2 * inv - (gt.x + gt.w) * inv;
  const double e4 = y2 * inv - (gt.y + gt.h) * inv;
  const double l1 =
      (std::abs(e1) + std::abs(e2) + std::abs(e3) + std::abs(e4)) / 4.0;

  const auto gi = detail::giou_corners(x1, y1, x2, y2, gt);
  const double total = cls + kLambdaL1 * l1 + kLambdaIou * (1.0 - gi.value);

  if (grad) {
    auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
    // Corner derivatives of the combined regression terms.
    const double dx1 = kLambdaL1 * sgn(e1) * inv / 4.0 - kLambdaIou * gi.dx1;
    const double dy1 = kLambdaL1 * sgn(e2) * inv / 4.0 - kLambdaIou * gi.dy1;
    const double dx2 = kLambdaL1 * sgn(e3) * inv / 4.0 - kLambdaIou * gi.dx2;
    const double dy2 = kLambdaL1 * sgn(e4) * inv / 4.0 - kLambdaIou * gi.dy2;
    grad->offset(center, 0) += grad_scale * static_cast<S>((dx1 + dx2) * patch);
    grad->offset(center, 1) += grad_scale * static_cast<S>((dy1 + dy2) * patch);
    grad->size(center, 0) +=
        grad_scale * static_cast<S>((dx2 - dx1) * search_size / 2.0);
    grad->size(center, 1) +=
        grad_scale * static_cast<S>((dy2 - dy1) * search_size / 2.0);
  }
  return static_cast<S>(total);
}

}  // namespace ckd
