#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ckd/model.hpp"

namespace ckd {

// Ablation rows. `mm` gates masked modeling, `fd` swaps decoupled content
// distillation for raw feature mimicry, `in_only` drops the distillation
// losses and instance-normalizes student features in the forward path.
struct Variant {
  bool sd = false, cd = false, mm = false, fd = false, in_only = false;
};

inline Variant parse_variant(const std::string& name) {
  if (name == "baseline") return {};
  if (name == "sd") return {true, false, false, false, false};
  if (name == "sd_cd") return {true, true, false, false, false};
  if (name == "sd_cd_mm" || name == "ckd") return {true, true, true, false, false};
  if (name == "in") return {false, false, false, false, true};
  if (name == "fd") return {false, false, false, true, false};
  contract_error("unknown variant: " + name);
}

struct TrainConfig {
  int steps = 2000;
  int batch = 4;
  std::uint64_t seed = 0;
  double mask_ratio = 0.25;
  double lambda_cd = 1.0;
  double lambda_sd = 2.0;  // style term weighted 2:1 against content
  double lr_backbone = 5e-4;
  double lr_head = 5e-3;  // 10x backbone
  double weight_decay = 1e-4;
  std::string variant = "ckd";

  void validate() const {
    if (steps < 1 || batch < 1) contract_error("TrainConfig: steps and batch must be positive");
    if (mask_ratio < 0 || mask_ratio >= 1)
      contract_error("TrainConfig: mask_ratio must lie in [0, 1)");
    if (lambda_cd < 0 || lambda_sd < 0)
      contract_error("TrainConfig: distillation weights must be non-negative");
    if (lr_backbone <= 0 || lr_head <= 0)
      contract_error("TrainConfig: learning rates must be positive");
  }
};

struct LossBreakdown {
  double task = 0, cd = 0, sd = 0, total = 0;
};

template <class S>
S total_loss(S task, S cd, S sd, const TrainConfig& cfg) {
  if (!std::isfinite(static_cast<double>(task)) ||
      !std::isfinite(static_cast<double>(cd)) ||
      !std::isfinite(static_cast<double>(sd)))
    throw std::runtime_error("total_loss: non-finite component");
  return task + static_cast<S>(cfg.lambda_cd) * cd + static_cast<S>(cfg.lambda_sd) * sd;
}

// ---- batch assembly ----

// Training pairs: template cut at its frame's ground truth, search cut around
// a jittered ground truth to imitate tracking drift.
template <class S>
FrameSample sample_training_pair(const std::vector<Sequence>& data,
                                 const CropConfig& crop, Rng& rng) {
  if (data.empty()) contract_error("sample_training_pair: no sequences");
  const Sequence& seq = data[static_cast<size_t>(
      rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
  const int n = static_cast<int>(seq.frames.size());
  const int ti = rng.uniform_int(0, n - 1);
  const int si = rng.uniform_int(0, n - 1);
  const FramePair& sf = seq.frames[static_cast<size_t>(si)];
  BBox prev = sf.gt;
  const double jx = rng.uniform(-0.15, 0.15) * prev.w;
  const double jy = rng.uniform(-0.15, 0.15) * prev.h;
  const double js = std::exp(rng.uniform(-0.2, 0.2));
  prev.x += jx;
  prev.y += jy;
  prev.w *= js;
  prev.h *= js;
  prev = clip_to_frame(prev, sf.rgb.w, sf.rgb.h);
  return make_sample(sf, seq.frames[static_cast<size_t>(ti)], prev, crop);
}

template <class S>
std::vector<FrameSample> make_batch(const std::vector<Sequence>& data,
                                    const CropConfig& crop, int batch, Rng& rng) {
  std::vector<FrameSample> out;
  out.reserve(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i) out.push_back(sample_training_pair<S>(data, crop, rng));
  return out;
}

// ---- loss + gradients over one batch ----

namespace detail {

// Places a search-grid gradient into the full token layout of a branch's
// final layer.
template <class S>
void add_search_grad(std::vector<Mat<S>>& d_features, int layer, const Mat<S>& g,
                     int n_search, int n_template, int channels) {
  Mat<S>& slot = d_features[static_cast<size_t>(layer)];
  if (slot.size() == 0) slot = Mat<S>::Zero(n_search + n_template, channels);
  slot.topRows(n_search) += g;
}

}  // namespace detail

// Forward and backward for one batch; gradients accumulate into `grads`
// (shapes of the model, zeroed by the caller). Returns batch-mean losses.
template <class S>
LossBreakdown compute_loss_and_grads(FourBranchModel<S>& model,
                                     const std::vector<FrameSample>& batch,
                                     const TrainConfig& cfg, const Variant& var,
                                     Rng& rng, FourBranchModel<S>& grads) {
  if (batch.empty()) contract_error("compute_loss_and_grads: empty batch");
  cfg.validate();
  const int ns = model.n_search(), nt = model.n_template();
  const int D = model.cfg.channels, L = model.cfg.layers;
  const S inv_b = S(1) / static_cast<S>(batch.size());
  LossBreakdown bd;

  for (const FrameSample& sample : batch) {
    Mask mask_rgb, mask_tir;
    const bool masking = var.mm && cfg.mask_ratio > 0;
    if (masking) {
      mask_rgb = sample_mask(ns, cfg.mask_ratio, rng);
      mask_tir = sample_mask(ns, cfg.mask_ratio, rng);
    }

    BranchCache<S> c_trgb, c_ttir, c_srgb, c_stir;
    forward_branch_train(sample.search_rgb, sample.template_rgb, model.teacher_rgb,
                         model.cfg, nullptr, c_trgb);
    forward_branch_train(sample.search_tir, sample.template_tir, model.teacher_tir,
                         model.cfg, nullptr, c_ttir);
    forward_branch_train(sample.search_rgb, sample.template_rgb, model.student_rgb,
                         model.cfg, masking ? &mask_rgb : nullptr, c_srgb);
    forward_branch_train(sample.search_tir, sample.template_tir, model.student_tir,
                         model.cfg, masking ? &mask_tir : nullptr, c_stir);

    const Mat<S> srgb_final = c_srgb.features.layers.back().topRows(ns);
    const Mat<S> stir_final = c_stir.features.layers.back().topRows(ns);
    Mat<S> head_rgb_in = srgb_final, head_tir_in = stir_final;
    if (model.feature_norm) {
      head_rgb_in = instance_normalize_layer(srgb_final, kInstanceNormEps);
      head_tir_in = instance_normalize_layer(stir_final, kInstanceNormEps);
    }
    const Mat<S> fused = fuse_student_features(head_rgb_in, head_tir_in);

    HeadCache<S> hc_fused, hc_rgb, hc_tir;
    const auto out_fused = head_forward(fused, model.head_fused, model.grid(), &hc_fused);
    const auto out_trgb = head_forward(
        Mat<S>(c_trgb.features.layers.back().topRows(ns)), model.head_rgb,
        model.grid(), &hc_rgb);
    const auto out_ttir = head_forward(
        Mat<S>(c_ttir.features.layers.back().topRows(ns)), model.head_tir,
        model.grid(), &hc_tir);

    HeadOutputGrad<S> g_fused, g_trgb, g_ttir;
    S task = 0;
    task += task_loss(out_fused, sample.gt_in_search, model.cfg.patch,
                      model.search_size, &g_fused, inv_b);
    task += task_loss(out_trgb, sample.gt_in_search, model.cfg.patch,
                      model.search_size, &g_trgb, inv_b);
    task += task_loss(out_ttir, sample.gt_in_search, model.cfg.patch,
                      model.search_size, &g_ttir, inv_b);
    if (!std::isfinite(static_cast<double>(task)))
      throw std::runtime_error("train_step: non-finite task loss");
    bd.task += static_cast<double>(task) / static_cast<double>(batch.size());

    S cd = 0, sd = 0;
    std::vector<Mat<S>> d_trgb(static_cast<size_t>(L)), d_ttir(static_cast<size_t>(L)),
        d_srgb(static_cast<size_t>(L)), d_stir(static_cast<size_t>(L));

    if (var.cd) {
      cd += content_distill_loss(c_trgb.features, c_srgb.features);
      cd += content_distill_loss(c_ttir.features, c_stir.features);
      content_distill_backward(c_trgb.features, c_srgb.features, kInstanceNormEps,
                               static_cast<S>(cfg.lambda_cd) * inv_b, d_srgb);
      content_distill_backward(c_ttir.features, c_stir.features, kInstanceNormEps,
                               static_cast<S>(cfg.lambda_cd) * inv_b, d_stir);
    } else if (var.fd) {
      cd += feature_distill_loss(c_trgb.features, c_srgb.features);
      cd += feature_distill_loss(c_ttir.features, c_stir.features);
      feature_distill_backward(c_trgb.features, c_srgb.features,
                               static_cast<S>(cfg.lambda_cd) * inv_b, d_srgb);
      feature_distill_backward(c_ttir.features, c_stir.features,
                               static_cast<S>(cfg.lambda_cd) * inv_b, d_stir);
    }
    if (var.sd) {
      sd = style_distill_loss(c_srgb.features, c_stir.features);
      style_distill_backward(c_srgb.features, c_stir.features,
                             static_cast<S>(cfg.lambda_sd) * inv_b, d_srgb, d_stir);
    }
    if (!std::isfinite(static_cast<double>(cd)))
      throw std::runtime_error("train_step: non-finite content distillation loss");
    if (!std::isfinite(static_cast<double>(sd)))
      throw std::runtime_error("train_step: non-finite style distillation loss");
    bd.cd += static_cast<double>(cd) / static_cast<double>(batch.size());
    bd.sd += static_cast<double>(sd) / static_cast<double>(batch.size());

    // Heads backward; fused gradient splits into the two student halves.
    const Mat<S> d_fused_in = head_backward(model.head_fused, hc_fused, g_fused,
                                            grads.head_fused);
    Mat<S> d_rgb_grid = d_fused_in.leftCols(D);
    Mat<S> d_tir_grid = d_fused_in.rightCols(D);
    if (model.feature_norm) {
      d_rgb_grid = instance_normalize_backward_layer(srgb_final, d_rgb_grid,
                                                     kInstanceNormEps);
      d_tir_grid = instance_normalize_backward_layer(stir_final, d_tir_grid,
                                                     kInstanceNormEps);
    }
    detail::add_search_grad(d_srgb, L - 1, d_rgb_grid, ns, nt, D);
    detail::add_search_grad(d_stir, L - 1, d_tir_grid, ns, nt, D);
    detail::add_search_grad(
        d_trgb, L - 1, head_backward(model.head_rgb, hc_rgb, g_trgb, grads.head_rgb),
        ns, nt, D);
    detail::add_search_grad(
        d_ttir, L - 1, head_backward(model.head_tir, hc_tir, g_ttir, grads.head_tir),
        ns, nt, D);

    branch_backward(model.teacher_rgb, model.cfg, c_trgb, d_trgb, grads.teacher_rgb);
    branch_backward(model.teacher_tir, model.cfg, c_ttir, d_ttir, grads.teacher_tir);
    branch_backward(model.student_rgb, model.cfg, c_srgb, d_srgb, grads.student_rgb);
    branch_backward(model.student_tir, model.cfg, c_stir, d_stir, grads.student_tir);
  }

  bd.total = static_cast<double>(total_loss(
      static_cast<S>(bd.task), static_cast<S>(bd.cd), static_cast<S>(bd.sd), cfg));
  return bd;
}

// ---- optimizer ----

template <class S>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::vector<Mat<S>> m, v;

  void init(FourBranchModel<S>& model) {
    m.clear();
    v.clear();
    visit_params(model, [&](const std::string&, Mat<S>& p, bool) {
      m.push_back(Mat<S>::Zero(p.rows(), p.cols()));
      v.push_back(Mat<S>::Zero(p.rows(), p.cols()));
    });
  }

  void update(FourBranchModel<S>& model, FourBranchModel<S>& grads,
              const TrainConfig& cfg) {
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    auto prefs = collect_params(model);
    auto grefs = collect_params(grads);
    for (size_t i = 0; i < prefs.size(); ++i) {
      const double lr = prefs[i].is_head ? cfg.lr_head : cfg.lr_backbone;
      Mat<S>& p = *prefs[i].value;
      const Mat<S>& g = *grefs[i].value;
      m[i] = static_cast<S>(beta1) * m[i] + static_cast<S>(1 - beta1) * g;
      v[i] = (static_cast<S>(beta2) * v[i].array() +
              static_cast<S>(1 - beta2) * g.array().square())
                 .matrix();
      const auto mhat = m[i].array() / static_cast<S>(bc1);
      const auto vhat = v[i].array() / static_cast<S>(bc2);
      p.array() -= static_cast<S>(lr) *
                   (mhat / (vhat.sqrt() + static_cast<S>(eps)) +
                    static_cast<S>(cfg.weight_decay) * p.array());
    }
  }
};

// ---- training loop ----

template <class S>
struct Trainer {
  FourBranchModel<S> model;
  TrainConfig cfg;
  Variant var;
  CropConfig crop;
  AdamW<S> opt;
  Rng rng;

  Trainer(FourBranchModel<S> m, const TrainConfig& c)
      : model(std::move(m)), cfg(c), var(parse_variant(c.variant)), rng(c.seed) {
    cfg.validate();
    model.feature_norm = var.in_only;
    crop.template_size = model.template_size;
    crop.search_size = model.search_size;
    opt.init(model);
  }

  LossBreakdown step(const std::vector<Sequence>& data) {
    auto batch = make_batch<S>(data, crop, cfg.batch, rng);
    return step_on(batch);
  }

  LossBreakdown step_on(const std::vector<FrameSample>& batch) {
    FourBranchModel<S> grads = zero_like(model);
    const LossBreakdown bd =
        compute_loss_and_grads(model, batch, cfg, var, rng, grads);
    opt.update(model, grads, cfg);
    return bd;
  }
};

// ---- finite-difference harness ----

struct GradCheckResult {
  double max_rel_err = 0;
  int checked = 0;
};

// Perturbs every parameter uniformly in [-scale, scale]. Gradient checks run
// at a generic point: at the zero-bias initialization the ReLU and focal-clip
// kinks sit exactly where central differences straddle them.
template <class S>
void jitter_params(FourBranchModel<S>& model, double scale, Rng& rng) {
  visit_params(model, [&](const std::string&, Mat<S>& p, bool) {
    for (Eigen::Index i = 0; i < p.size(); ++i)
      p.data()[i] += static_cast<S>(rng.uniform(-scale, scale));
  });
}

// Central differences on a random subset of coordinates against the analytic
// gradients already accumulated in `grads`. `loss` re-evaluates the loss at
// the model's current parameters. `accept` restricts the checked parameters;
// use it to exclude coordinates the loss deliberately treats as constants
// (stop-gradient teachers under the distillation terms). The denominator
// floor keeps cancellation noise from dominating near-zero gradients; below
// it the comparison degrades to an absolute one.
template <class S, class LossFn,
          class Pred = bool (*)(const ParamRef<S>&)>
GradCheckResult grad_check(
    FourBranchModel<S>& model, FourBranchModel<S>& grads, LossFn loss, int coords,
    double eps, Rng& rng,
    Pred accept = [](const ParamRef<S>&) { return true; },
    double denom_floor = 1e-4) {
  auto prefs = collect_params(model);
  auto grefs = collect_params(grads);
  GradCheckResult res;
  const int max_draws = coords * 64;
  for (int c = 0; res.checked < coords && c < max_draws; ++c) {
    const size_t pi =
        static_cast<size_t>(rng.uniform_int(0, static_cast<int>(prefs.size()) - 1));
    if (!accept(prefs[pi])) continue;
    Mat<S>& p = *prefs[pi].value;
    if (p.size() == 0) continue;
    const Eigen::Index idx = rng.uniform_int(0, static_cast<int>(p.size()) - 1);
    const S saved = p.data()[idx];
    p.data()[idx] = saved + static_cast<S>(eps);
    const double up = static_cast<double>(loss());
    p.data()[idx] = saved - static_cast<S>(eps);
    const double down = static_cast<double>(loss());
    p.data()[idx] = saved;
    const double numeric = (up - down) / (2 * eps);
    const double analytic = static_cast<double>(grefs[pi].value->data()[idx]);
    const double denom = std::max(denom_floor, std::abs(numeric) + std::abs(analytic));
    res.max_rel_err = std::max(res.max_rel_err, std::abs(numeric - analytic) / denom);
    ++res.checked;
  }
  return res;
}

}  // namespace ckd
