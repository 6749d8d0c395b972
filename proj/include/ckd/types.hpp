#pragma once

#include <cstdint>
#include <vector>

#include "ckd/matrix.hpp"
#include "ckd/rng.hpp"

namespace ckd {

// Desk-scale transformer geometry.
struct ModelConfig {
  int layers = 4;
  int channels = 64;
  int heads = 4;
  int patch = 8;

  void validate() const {
    if (layers < 1 || channels < 1 || heads < 1 || patch < 1)
      contract_error("ModelConfig: all fields must be positive");
    if (channels % heads != 0)
      contract_error("ModelConfig: channels must be divisible by heads");
  }
  int head_dim() const { return channels / heads; }
};

// Token rows, search tokens first then template tokens.
template <class S>
struct TokenSeq {
  Mat<S> tokens;  // N x D
  int n_search = 0;
  int n_template = 0;

  int total() const { return n_search + n_template; }
};

// Features recorded after every transformer block of one branch.
template <class S>
struct LayerFeatures {
  std::vector<Mat<S>> layers;  // L entries, each N x D

  int layer_count() const { return static_cast<int>(layers.size()); }
};

// Per-head attention matrices of one block (rows: queries, cols: keys).
template <class S>
struct AttnWeights {
  std::vector<Mat<S>> head;
};

// Search-token mask; 1 = replaced by the learnable mask embedding.
struct Mask {
  std::vector<std::uint8_t> bits;

  int count() const {
    int n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  bool empty() const { return bits.empty(); }
};

// Exactly floor(ratio * n_search) positions, uniform without replacement.
inline Mask sample_mask(int n_search, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio >= 1.0)
    contract_error("sample_mask: ratio must be in [0, 1)");
  const int k = static_cast<int>(std::floor(ratio * n_search));
  Mask m;
  m.bits.assign(n_search, 0);
  for (int idx : rng.sample_without_replacement(n_search, k)) m.bits[idx] = 1;
  return m;
}

}  // namespace ckd
