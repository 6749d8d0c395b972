#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckd/model.hpp"
#include "ckd/train.hpp"

namespace ckd {

constexpr int kNprThresholds = 51;   // evenly spaced in [0, 0.5]
constexpr int kSrThresholds = 21;    // {0, 0.05, ..., 1.0}

struct OpeResult {
  std::string name;
  std::vector<BBox> boxes;       // boxes[0] = ground truth (initialization)
  std::vector<double> frame_ms;  // wall time per frame
};

// One-pass evaluation: template fixed from frame 1 ground truth, search crop
// centered on the previous prediction, no re-initialization.
template <class S>
OpeResult run_ope(const FourBranchModel<S>& model, const Sequence& seq,
                  const EliminationConfig& elim = EliminationConfig::none()) {
  if (seq.frames.size() < 2) contract_error("run_ope: sequence shorter than 2 frames");
  CropConfig crop;
  crop.template_size = model.template_size;
  crop.search_size = model.search_size;

  OpeResult res;
  res.name = seq.name;
  res.boxes.push_back(seq.frames[0].gt);
  res.frame_ms.push_back(0.0);
  BBox prev = seq.frames[0].gt;
  for (size_t t = 1; t < seq.frames.size(); ++t) {
    const auto started = std::chrono::steady_clock::now();
    BBox box;
    try {
      const FrameSample sample = make_sample(seq.frames[t], seq.frames[0], prev, crop);
      box = track_frame(model, sample, elim);
    } catch (const std::exception& e) {
      data_error("run_ope: sequence " + seq.name + " frame " + std::to_string(t) +
                 ": " + e.what());
    }
    box = clip_to_frame(box, seq.frames[t].rgb.w, seq.frames[t].rgb.h);
    res.boxes.push_back(box);
    prev = box;
    res.frame_ms.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                  started)
            .count());
  }
  return res;
}

// ---- metrics (initialization frame excluded throughout) ----

namespace detail {
inline void check_metric_inputs(const std::vector<BBox>& preds,
                                const std::vector<BBox>& gts) {
  if (preds.size() != gts.size())
    contract_error("metrics: prediction and ground-truth counts differ");
}
}  // namespace detail

inline double precision_rate(const std::vector<BBox>& preds,
                             const std::vector<BBox>& gts, double tau) {
  detail::check_metric_inputs(preds, gts);
  if (preds.size() < 2) return 0.0;
  int hit = 0;
  for (size_t i = 1; i < preds.size(); ++i)
    if (center_distance(preds[i], gts[i]) <= tau) ++hit;
  return static_cast<double>(hit) / static_cast<double>(preds.size() - 1);
}

inline double normalized_precision(const std::vector<BBox>& preds,
                                   const std::vector<BBox>& gts) {
  detail::check_metric_inputs(preds, gts);
  if (preds.size() < 2) return 0.0;
  std::vector<double> nd;
  for (size_t i = 1; i < preds.size(); ++i) {
    if (gts[i].degenerate())
      contract_error("normalized_precision: degenerate ground-truth box");
    const double dx = (preds[i].cx() - gts[i].cx()) / gts[i].w;
    const double dy = (preds[i].cy() - gts[i].cy()) / gts[i].h;
    nd.push_back(std::sqrt(dx * dx + dy * dy));
  }
  double acc = 0;
  for (int t = 0; t < kNprThresholds; ++t) {
    const double thr = 0.5 * t / (kNprThresholds - 1);
    int hit = 0;
    for (double d : nd)
      if (d <= thr) ++hit;
    acc += static_cast<double>(hit) / static_cast<double>(nd.size());
  }
  return acc / kNprThresholds;
}

inline double success_auc(const std::vector<BBox>& preds,
                          const std::vector<BBox>& gts) {
  detail::check_metric_inputs(preds, gts);
  if (preds.size() < 2) return 0.0;
  std::vector<double> ious;
  for (size_t i = 1; i < preds.size(); ++i) ious.push_back(iou(preds[i], gts[i]));
  double acc = 0;
  for (int t = 0; t < kSrThresholds; ++t) {
    const double thr = static_cast<double>(t) / (kSrThresholds - 1);
    int hit = 0;
    for (double v : ious)
      if (v > thr) ++hit;
    acc += static_cast<double>(hit) / static_cast<double>(ious.size());
  }
  return acc / kSrThresholds;
}

// ---- reporting ----

struct SequenceMetrics {
  std::string name;
  double pr = 0, npr = 0, sr = 0;
  double mean_frame_ms = 0;
};

struct MetricReport {
  double tau = 20.0;
  std::vector<SequenceMetrics> sequences;
  double pr = 0, npr = 0, sr = 0;  // aggregate: mean over sequences
};

inline MetricReport aggregate_metrics(const std::vector<OpeResult>& results,
                                      const std::vector<Sequence>& seqs, double tau) {
  if (results.size() != seqs.size())
    contract_error("aggregate_metrics: result and sequence counts differ");
  MetricReport rep;
  rep.tau = tau;
  for (size_t i = 0; i < results.size(); ++i) {
    std::vector<BBox> gts;
    for (const auto& f : seqs[i].frames) gts.push_back(f.gt);
    SequenceMetrics sm;
    sm.name = results[i].name;
    sm.pr = precision_rate(results[i].boxes, gts, tau);
    sm.npr = normalized_precision(results[i].boxes, gts);
    sm.sr = success_auc(results[i].boxes, gts);
    double ms = 0;
    for (size_t t = 1; t < results[i].frame_ms.size(); ++t)
      ms += results[i].frame_ms[t];
    sm.mean_frame_ms =
        results[i].frame_ms.size() > 1
            ? ms / static_cast<double>(results[i].frame_ms.size() - 1)
            : 0.0;
    rep.pr += sm.pr;
    rep.npr += sm.npr;
    rep.sr += sm.sr;
    rep.sequences.push_back(std::move(sm));
  }
  if (!rep.sequences.empty()) {
    rep.pr /= static_cast<double>(rep.sequences.size());
    rep.npr /= static_cast<double>(rep.sequences.size());
    rep.sr /= static_cast<double>(rep.sequences.size());
  }
  return rep;
}

inline nlohmann::json metric_report_json(const MetricReport& rep) {
  nlohmann::json j;
  j["thresholds"] = {{"pr_tau", rep.tau},
                     {"npr_grid", {0.0, 0.5, kNprThresholds}},
                     {"sr_grid", {0.0, 1.0, kSrThresholds}}};
  j["aggregate"] = {{"pr", rep.pr}, {"npr", rep.npr}, {"sr", rep.sr}};
  j["sequences"] = nlohmann::json::array();
  for (const auto& s : rep.sequences)
    j["sequences"].push_back({{"name", s.name},
                              {"pr", s.pr},
                              {"npr", s.npr},
                              {"sr", s.sr},
                              {"mean_frame_ms", s.mean_frame_ms}});
  return j;
}

// ---- modality-gap report ----

// Per layer: sample-averaged per-channel style statistics of the two student
// branches, the style distance between them on raw features, and the mean
// per-channel squared mean-difference before vs after instance normalization.
struct GapReport {
  std::vector<Mat<double>> mu_rgb, sigma_rgb, mu_tir, sigma_tir;  // 1 x D per layer
  std::vector<double> style_distance;
  std::vector<double> pre_in_distance;
  std::vector<double> post_in_distance;
  double mean_style_distance = 0;
};

template <class S>
GapReport gap_report(const FourBranchModel<S>& model,
                     const std::vector<FrameSample>& samples) {
  if (samples.empty()) contract_error("gap_report: no samples");
  const int L = model.cfg.layers, D = model.cfg.channels;
  GapReport rep;
  rep.mu_rgb.assign(L, Mat<double>::Zero(1, D));
  rep.sigma_rgb.assign(L, Mat<double>::Zero(1, D));
  rep.mu_tir.assign(L, Mat<double>::Zero(1, D));
  rep.sigma_tir.assign(L, Mat<double>::Zero(1, D));
  rep.style_distance.assign(L, 0.0);
  rep.pre_in_distance.assign(L, 0.0);
  rep.post_in_distance.assign(L, 0.0);

  for (const FrameSample& sample : samples) {
    BranchCache<S> c_rgb, c_tir;
    forward_branch_train(sample.search_rgb, sample.template_rgb, model.student_rgb,
                         model.cfg, nullptr, c_rgb);
    forward_branch_train(sample.search_tir, sample.template_tir, model.student_tir,
                         model.cfg, nullptr, c_tir);
    for (int l = 0; l < L; ++l) {
      const Mat<S>& fr = c_rgb.features.layers[static_cast<size_t>(l)];
      const Mat<S>& ft = c_tir.features.layers[static_cast<size_t>(l)];
      const auto [mr, sr] = style_stats_layer(fr);
      const auto [mt, st] = style_stats_layer(ft);
      rep.mu_rgb[l] += mr.template cast<double>();
      rep.sigma_rgb[l] += sr.template cast<double>();
      rep.mu_tir[l] += mt.template cast<double>();
      rep.sigma_tir[l] += st.template cast<double>();
      rep.style_distance[l] +=
          static_cast<double>((mr - mt).array().square().mean() +
                              (sr - st).array().square().mean());
      rep.pre_in_distance[l] +=
          static_cast<double>((mr - mt).array().square().mean());
      const auto [mr2, sr2] =
          style_stats_layer(instance_normalize_layer(fr, kInstanceNormEps));
      const auto [mt2, st2] =
          style_stats_layer(instance_normalize_layer(ft, kInstanceNormEps));
      rep.post_in_distance[l] +=
          static_cast<double>((mr2 - mt2).array().square().mean());
      (void)sr2;
      (void)st2;
    }
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (int l = 0; l < L; ++l) {
    rep.mu_rgb[l] *= inv;
    rep.sigma_rgb[l] *= inv;
    rep.mu_tir[l] *= inv;
    rep.sigma_tir[l] *= inv;
    rep.style_distance[l] *= inv;
    rep.pre_in_distance[l] *= inv;
    rep.post_in_distance[l] *= inv;
    rep.mean_style_distance += rep.style_distance[l];
  }
  rep.mean_style_distance /= L;
  return rep;
}

inline void write_gap_csv(const GapReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) data_error("gap report: cannot open for writing: " + path);
  out << "layer,channel,mu_rgb,sigma_rgb,mu_tir,sigma_tir\n";
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  for (size_t l = 0; l < rep.mu_rgb.size(); ++l)
    for (Eigen::Index d = 0; d < rep.mu_rgb[l].cols(); ++d)
      out << l << ',' << d << ',' << fmt(rep.mu_rgb[l](0, d)) << ','
          << fmt(rep.sigma_rgb[l](0, d)) << ',' << fmt(rep.mu_tir[l](0, d)) << ','
          << fmt(rep.sigma_tir[l](0, d)) << '\n';
  out << "summary,layer,style_distance,pre_in_distance,post_in_distance,\n";
  for (size_t l = 0; l < rep.style_distance.size(); ++l)
    out << "summary," << l << ',' << fmt(rep.style_distance[l]) << ','
        << fmt(rep.pre_in_distance[l]) << ',' << fmt(rep.post_in_distance[l])
        << ",\n";
  out << "summary,mean," << fmt(rep.mean_style_distance) << ",,,\n";
  if (!out) data_error("gap report: write failed: " + path);
}

}  // namespace ckd
