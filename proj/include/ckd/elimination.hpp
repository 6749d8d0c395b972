#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ckd/types.hpp"

namespace ckd {

enum class ElimMode { None, CeRgbOnly, Mce };

inline ElimMode parse_elim_mode(const std::string& s) {
  if (s == "none") return ElimMode::None;
  if (s == "ce") return ElimMode::CeRgbOnly;
  if (s == "mce") return ElimMode::Mce;
  contract_error("unknown elimination mode '" + s + "' (expected none|ce|mce)");
}

inline const char* elim_mode_name(ElimMode m) {
  switch (m) {
    case ElimMode::None: return "none";
    case ElimMode::CeRgbOnly: return "ce";
    case ElimMode::Mce: return "mce";
  }
  return "none";
}

// Inference-time search-token dropping. Layers are 1-indexed block positions.
struct EliminationConfig {
  std::vector<int> layers;
  double keep_ratio = 0.7;
  ElimMode mode = ElimMode::None;

  bool active_at(int layer_1idx) const {
    return mode != ElimMode::None &&
           std::find(layers.begin(), layers.end(), layer_1idx) != layers.end();
  }
  void validate(int total_layers) const {
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
      contract_error("EliminationConfig: keep_ratio must be in (0, 1]");
    for (int l : layers)
      if (l < 1 || l > total_layers)
        contract_error("EliminationConfig: layer index " + std::to_string(l) +
                       " out of range [1, " + std::to_string(total_layers) + "]");
  }
  static EliminationConfig none() { return {}; }
};

// Template-query attention mass over search keys for one modality, averaged
// over heads and template queries and renormalized to a distribution over
// the search tokens.
template <class S>
std::vector<double> search_attention_profile(const AttnWeights<S>& attn,
                                             int n_search, int n_template) {
  if (attn.head.empty()) contract_error("search_attention_profile: no heads");
  const int n = n_search + n_template;
  for (const auto& a : attn.head)
    if (a.rows() != n || a.cols() != n)
      contract_error("search_attention_profile: attention shape mismatch");
  if (n_template < 1) contract_error("search_attention_profile: need template queries");

  std::vector<double> prof(n_search, 0.0);
  for (const auto& a : attn.head)
    for (int q = 0; q < n_template; ++q)
      for (int j = 0; j < n_search; ++j)
        prof[j] += static_cast<double>(a(n_search + q, j));
  double sum = std::accumulate(prof.begin(), prof.end(), 0.0);
  if (sum <= 0) contract_error("search_attention_profile: degenerate attention");
  for (auto& v : prof) v /= sum;
  return prof;
}

// Joint candidate score: elementwise max of the two modality distributions,
// so a token survives if either modality finds it relevant.
template <class S>
std::vector<double> candidate_scores(const AttnWeights<S>& attn_rgb,
                                     const AttnWeights<S>& attn_tir,
                                     int n_search, int n_template) {
  auto r = search_attention_profile(attn_rgb, n_search, n_template);
  auto t = search_attention_profile(attn_tir, n_search, n_template);
  for (size_t i = 0; i < r.size(); ++i) r[i] = std::max(r[i], t[i]);
  return r;
}

// Indices of the k = ceil(keep_ratio * n) largest scores, ties broken toward
// the smaller index, returned ascending.
inline std::vector<int> top_k_keep(const std::vector<double>& h, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
    contract_error("top_k_keep: keep_ratio must be in (0, 1]");
  const int n = static_cast<int>(h.size());
  const int k = static_cast<int>(std::ceil(keep_ratio * n));
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return h[a] > h[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Drops search tokens not in `kept` (indices into the CURRENT search block)
// and composes the running map back to the original search grid.
template <class S>
TokenSeq<S> filter_and_record(const TokenSeq<S>& seq, const std::vector<int>& kept,
                              std::vector<int>& global_kept) {
  if (static_cast<int>(global_kept.size()) != seq.n_search)
    contract_error("filter_and_record: stale global index map");
  TokenSeq<S> out;
  out.n_search = static_cast<int>(kept.size());
  out.n_template = seq.n_template;
  out.tokens.resize(out.total(), seq.tokens.cols());
  std::vector<int> composed(kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] < 0 || kept[i] >= seq.n_search)
      contract_error("filter_and_record: kept index out of range");
    out.tokens.row(static_cast<Eigen::Index>(i)) = seq.tokens.row(kept[i]);
    composed[i] = global_kept[kept[i]];
  }
  out.tokens.bottomRows(seq.n_template) = seq.tokens.bottomRows(seq.n_template);
  global_kept = std::move(composed);
  return out;
}

// Places surviving search tokens back on the dense original grid; dropped
// positions stay zero so the head sees a full map.
template <class S>
Mat<S> scatter_back(const Mat<S>& search_tokens, const std::vector<int>& global_kept,
                    int n_search_original) {
  if (search_tokens.rows() != static_cast<Eigen::Index>(global_kept.size()))
    contract_error("scatter_back: token/index count mismatch");
  Mat<S> dense = Mat<S>::Zero(n_search_original, search_tokens.cols());
  int prev = -1;
  for (size_t i = 0; i < global_kept.size(); ++i) {
    const int g = global_kept[i];
    if (g < 0 || g >= n_search_original)
      contract_error("scatter_back: index out of range");
    if (g <= prev) contract_error("scatter_back: indices must be unique ascending");
    prev = g;
    dense.row(g) = search_tokens.row(static_cast<Eigen::Index>(i));
  }
  return dense;
}

}  // namespace ckd
