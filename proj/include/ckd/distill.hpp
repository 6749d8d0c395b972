#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "ckd/types.hpp"

namespace ckd {

constexpr double kInstanceNormEps = 1e-5;

// Per-layer, per-channel token statistics. Population std, no epsilon:
// sigma = 0 is a legitimate style value.
template <class S>
struct StyleStats {
  std::vector<Mat<S>> mu;     // per layer, 1 x D
  std::vector<Mat<S>> sigma;  // per layer, 1 x D
};

template <class S>
std::pair<Mat<S>, Mat<S>> style_stats_layer(const Mat<S>& f) {
  if (f.rows() < 1) contract_error("style_stats: empty feature matrix");
  Mat<S> mu = f.colwise().mean();
  Mat<S> var =
      (f.rowwise() - mu.row(0)).array().square().colwise().mean().matrix();
  return {std::move(mu), var.array().sqrt().matrix()};
}

template <class S>
StyleStats<S> style_stats(const LayerFeatures<S>& features) {
  StyleStats<S> st;
  for (const auto& f : features.layers) {
    auto [mu, sigma] = style_stats_layer(f);
    st.mu.push_back(std::move(mu));
    st.sigma.push_back(std::move(sigma));
  }
  return st;
}

namespace detail {
template <class S>
void check_same_shape(const LayerFeatures<S>& a, const LayerFeatures<S>& b,
                      const char* who) {
  if (a.layer_count() != b.layer_count()) contract_error(who);
  for (size_t l = 0; l < a.layers.size(); ++l)
    if (a.layers[l].rows() != b.layers[l].rows() ||
        a.layers[l].cols() != b.layers[l].cols())
      contract_error(who);
}
}  // namespace detail

// Mutual style loss between the two student branches:
// (1/L) sum_l [ mean_d (mu_a - mu_b)^2 + mean_d (sigma_a - sigma_b)^2 ].
template <class S>
S style_distill_loss(const LayerFeatures<S>& rgb, const LayerFeatures<S>& tir) {
  detail::check_same_shape(rgb, tir, "style_distill_loss: shape mismatch");
  const auto sa = style_stats(rgb), sb = style_stats(tir);
  S loss = 0;
  for (size_t l = 0; l < sa.mu.size(); ++l) {
    loss += (sa.mu[l] - sb.mu[l]).array().square().mean();
    loss += (sa.sigma[l] - sb.sigma[l]).array().square().mean();
  }
  return loss / static_cast<S>(rgb.layer_count());
}

// Accumulates scale * dLoss/dFeatures into both branches' feature gradients
// (gradient is mutual). d_rgb / d_tir must already be sized like the features
// or empty; empty entries are allocated as zeros.
template <class S>
void style_distill_backward(const LayerFeatures<S>& rgb, const LayerFeatures<S>& tir,
                            S scale, std::vector<Mat<S>>& d_rgb,
                            std::vector<Mat<S>>& d_tir) {
  detail::check_same_shape(rgb, tir, "style_distill_backward: shape mismatch");
  const int L = rgb.layer_count();
  d_rgb.resize(static_cast<size_t>(L));
  d_tir.resize(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const Mat<S>& fa = rgb.layers[static_cast<size_t>(l)];
    const Mat<S>& fb = tir.layers[static_cast<size_t>(l)];
    const auto [mu_a, sg_a] = style_stats_layer(fa);
    const auto [mu_b, sg_b] = style_stats_layer(fb);
    const Eigen::Index n = fa.rows(), d = fa.cols();
    if (d_rgb[static_cast<size_t>(l)].size() == 0)
      d_rgb[static_cast<size_t>(l)] = Mat<S>::Zero(n, d);
    if (d_tir[static_cast<size_t>(l)].size() == 0)
      d_tir[static_cast<size_t>(l)] = Mat<S>::Zero(n, d);

    const S c = scale * S(2) / (static_cast<S>(L) * static_cast<S>(d));
    const Mat<S> dmu = c * (mu_a - mu_b);          // 1 x D, sign for branch a
    const Mat<S> dsg = c * (sg_a - sg_b);

    // d mu_d / d f_{n,d} = 1/N; d sigma_d / d f_{n,d} = (f - mu)/(N sigma),
    // with a zero subgradient on constant channels.
    Mat<S> ga = Mat<S>(n, d), gb = Mat<S>(n, d);
    ga.rowwise() = (dmu / static_cast<S>(n)).row(0);
    gb.rowwise() = (-dmu / static_cast<S>(n)).row(0);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (sg_a(0, j) > S(0))
        ga.col(j).array() += dsg(0, j) * (fa.col(j).array() - mu_a(0, j)) /
                             (static_cast<S>(n) * sg_a(0, j));
      if (sg_b(0, j) > S(0))
        gb.col(j).array() -= dsg(0, j) * (fb.col(j).array() - mu_b(0, j)) /
                             (static_cast<S>(n) * sg_b(0, j));
    }
    d_rgb[static_cast<size_t>(l)] += ga;
    d_tir[static_cast<size_t>(l)] += gb;
  }
}

// ---- instance normalization ----

template <class S>
Mat<S> instance_normalize_layer(const Mat<S>& f, double epsilon) {
  const auto [mu, sigma] = style_stats_layer(f);
  Mat<S> out = f.rowwise() - mu.row(0);
  const Mat<S> denom =
      (sigma.array().square() + static_cast<S>(epsilon)).sqrt().matrix();
  out.array().rowwise() /= denom.row(0).array();
  return out;
}

template <class S>
LayerFeatures<S> instance_normalize(const LayerFeatures<S>& features,
                                    double epsilon = kInstanceNormEps) {
  if (epsilon <= 0) contract_error("instance_normalize: epsilon must be positive");
  LayerFeatures<S> out;
  for (const auto& f : features.layers)
    out.layers.push_back(instance_normalize_layer(f, epsilon));
  return out;
}

// Backward of x_hat = (x - mu)/sqrt(var + eps) per channel, exact for any eps:
// dx = istd * (g - mean(g) - x_hat * mean(g .* x_hat)), means over tokens.
template <class S>
Mat<S> instance_normalize_backward_layer(const Mat<S>& f, const Mat<S>& g,
                                         double epsilon) {
  const auto [mu, sigma] = style_stats_layer(f);
  const Eigen::Index n = f.rows();
  Mat<S> istd = (sigma.array().square() + static_cast<S>(epsilon))
                    .rsqrt()
                    .matrix();
  Mat<S> xhat = f.rowwise() - mu.row(0);
  xhat.array().rowwise() *= istd.row(0).array();
  const Mat<S> m1 = g.colwise().mean();
  const Mat<S> m2 = (g.array() * xhat.array()).colwise().mean().matrix();
  Mat<S> dx = g;
  dx.rowwise() -= m1.row(0);
  dx -= (xhat.array().rowwise() * m2.row(0).array()).matrix();
  dx.array().rowwise() *= istd.row(0).array();
  (void)n;
  return dx;
}

// ---- content distillation (one modality pair) ----

// (1/L) sum_l mean( (IN(teacher) - IN(student))^2 ). Teacher is a constant.
template <class S>
S content_distill_loss(const LayerFeatures<S>& teacher, const LayerFeatures<S>& student,
                       double epsilon = kInstanceNormEps) {
  detail::check_same_shape(teacher, student, "content_distill_loss: shape mismatch");
  S loss = 0;
  for (size_t l = 0; l < teacher.layers.size(); ++l) {
    const Mat<S> t = instance_normalize_layer(teacher.layers[l], epsilon);
    const Mat<S> s = instance_normalize_layer(student.layers[l], epsilon);
    loss += (t - s).array().square().mean();
  }
  return loss / static_cast<S>(teacher.layer_count());
}

// Accumulates scale * dLoss/dStudent; no gradient reaches the teacher.
template <class S>
void content_distill_backward(const LayerFeatures<S>& teacher,
                              const LayerFeatures<S>& student, double epsilon, S scale,
                              std::vector<Mat<S>>& d_student) {
  detail::check_same_shape(teacher, student, "content_distill_backward: shape mismatch");
  const int L = teacher.layer_count();
  d_student.resize(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const Mat<S>& ft = teacher.layers[static_cast<size_t>(l)];
    const Mat<S>& fs = student.layers[static_cast<size_t>(l)];
    const Mat<S> t = instance_normalize_layer(ft, epsilon);
    const Mat<S> s = instance_normalize_layer(fs, epsilon);
    const S c = scale * S(2) /
                (static_cast<S>(L) * static_cast<S>(fs.rows()) *
                 static_cast<S>(fs.cols()));
    const Mat<S> g_hat = c * (s - t);
    const Mat<S> dx = instance_normalize_backward_layer(fs, g_hat, epsilon);
    if (d_student[static_cast<size_t>(l)].size() == 0)
      d_student[static_cast<size_t>(l)] = dx;
    else
      d_student[static_cast<size_t>(l)] += dx;
  }
}

// ---- raw feature distillation (FD ablation) ----

template <class S>
S feature_distill_loss(const LayerFeatures<S>& a, const LayerFeatures<S>& b) {
  detail::check_same_shape(a, b, "feature_distill_loss: shape mismatch");
  S loss = 0;
  for (size_t l = 0; l < a.layers.size(); ++l)
    loss += (a.layers[l] - b.layers[l]).array().square().mean();
  return loss / static_cast<S>(a.layer_count());
}

// Gradient into `student` only; `teacher` is a constant.
template <class S>
void feature_distill_backward(const LayerFeatures<S>& teacher,
                              const LayerFeatures<S>& student, S scale,
                              std::vector<Mat<S>>& d_student) {
  detail::check_same_shape(teacher, student, "feature_distill_backward: shape mismatch");
  const int L = teacher.layer_count();
  d_student.resize(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const Mat<S>& ft = teacher.layers[static_cast<size_t>(l)];
    const Mat<S>& fs = student.layers[static_cast<size_t>(l)];
    const S c = scale * S(2) /
                (static_cast<S>(L) * static_cast<S>(fs.rows()) *
                 static_cast<S>(fs.cols()));
    Mat<S> dx = c * (fs - ft);
    if (d_student[static_cast<size_t>(l)].size() == 0)
      d_student[static_cast<size_t>(l)] = std::move(dx);
    else
      d_student[static_cast<size_t>(l)] += dx;
  }
}

}  // namespace ckd
