#pragma once

#include <cmath>
#include <vector>

#include "ckd/elimination.hpp"
#include "ckd/image.hpp"
#include "ckd/types.hpp"

namespace ckd {

constexpr double kLayerNormEps = 1e-5;

inline int mlp_hidden(const ModelConfig& cfg) { return 4 * cfg.channels; }

template <class S>
struct LayerNormParams {
  Mat<S> gamma, beta;  // 1 x D
};

template <class S>
struct BlockParams {
  LayerNormParams<S> ln1, ln2;
  Mat<S> wq, bq, wk, bk, wv, bv, wo, bo;  // D x D weights, 1 x D biases
  Mat<S> w1, b1;                          // D x hidden, 1 x hidden
  Mat<S> w2, b2;                          // hidden x D, 1 x D
};

// One of the four encoder branches. Template and search patches share the
// projection; position embeddings are separate per role.
template <class S>
struct BranchParams {
  Mat<S> patch_w;       // (3 p^2) x D
  Mat<S> patch_b;       // 1 x D
  Mat<S> pos_search;    // Ns x D
  Mat<S> pos_template;  // Nt x D
  Mat<S> mask_token;    // 1 x D
  std::vector<BlockParams<S>> blocks;
};

// ---- initialization ----

template <class S>
LayerNormParams<S> init_layer_norm(int d) {
  LayerNormParams<S> p;
  p.gamma = Mat<S>::Ones(1, d);
  p.beta = Mat<S>::Zero(1, d);
  return p;
}

template <class S>
BlockParams<S> init_block(const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.channels, hid = mlp_hidden(cfg);
  BlockParams<S> b;
  b.ln1 = init_layer_norm<S>(d);
  b.ln2 = init_layer_norm<S>(d);
  auto w = [&](int r, int c) {
    Mat<S> m(r, c);
    fill_truncated_normal(m, 0.02, rng);
    return m;
  };
  b.wq = w(d, d); b.wk = w(d, d); b.wv = w(d, d); b.wo = w(d, d);
  b.bq = Mat<S>::Zero(1, d); b.bk = Mat<S>::Zero(1, d);
  b.bv = Mat<S>::Zero(1, d); b.bo = Mat<S>::Zero(1, d);
  b.w1 = w(d, hid); b.b1 = Mat<S>::Zero(1, hid);
  b.w2 = w(hid, d); b.b2 = Mat<S>::Zero(1, d);
  return b;
}

template <class S>
BranchParams<S> init_branch(const ModelConfig& cfg, int n_search, int n_template,
                            Rng& rng) {
  BranchParams<S> br;
  const int d = cfg.channels, pp = 3 * cfg.patch * cfg.patch;
  br.patch_w.resize(pp, d);
  fill_truncated_normal(br.patch_w, 0.02, rng);
  br.patch_b = Mat<S>::Zero(1, d);
  br.pos_search.resize(n_search, d);
  fill_truncated_normal(br.pos_search, 0.02, rng);
  br.pos_template.resize(n_template, d);
  fill_truncated_normal(br.pos_template, 0.02, rng);
  br.mask_token = Mat<S>::Zero(1, d);
  for (int l = 0; l < cfg.layers; ++l) br.blocks.push_back(init_block<S>(cfg, rng));
  return br;
}

// ---- patch embedding ----

enum class TokenRole { Search, Template };

// Flattens p x p patches in row-major patch order; rows are
// (y, x, channel)-interleaved pixels. Single-channel input is replicated to
// three channels so thermal crops share the projection shape.
template <class S>
Mat<S> patchify(const Image& img, int p) {
  if (img.h != img.w) contract_error("patchify: image must be square");
  if (img.h % p != 0) contract_error("patchify: image side not divisible by patch size");
  const int g = img.h / p;
  Mat<S> out(g * g, 3 * p * p);
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px) {
      const int row = py * g + px;
      int col = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int ch = 0; ch < 3; ++ch)
            out(row, col++) = static_cast<S>(
                img.at(py * p + y, px * p + x, img.c == 1 ? 0 : ch));
    }
  return out;
}

template <class S>
TokenSeq<S> patch_embed(const Image& img, const BranchParams<S>& branch,
                        const ModelConfig& cfg, TokenRole role) {
  const Mat<S> patches = patchify<S>(img, cfg.patch);
  const Mat<S>& pos =
      role == TokenRole::Search ? branch.pos_search : branch.pos_template;
  if (patches.rows() != pos.rows())
    contract_error("patch_embed: image token count does not match position table");
  TokenSeq<S> seq;
  seq.tokens.noalias() = patches * branch.patch_w;
  seq.tokens.rowwise() += branch.patch_b.row(0);
  seq.tokens += pos;
  if (role == TokenRole::Search) {
    seq.n_search = static_cast<int>(patches.rows());
  } else {
    seq.n_template = static_cast<int>(patches.rows());
  }
  return seq;
}

template <class S>
TokenSeq<S> concat_tokens(const TokenSeq<S>& search, const TokenSeq<S>& templ) {
  TokenSeq<S> seq;
  seq.n_search = search.n_search;
  seq.n_template = templ.n_template;
  seq.tokens.resize(seq.total(), search.tokens.cols());
  seq.tokens.topRows(seq.n_search) = search.tokens;
  seq.tokens.bottomRows(seq.n_template) = templ.tokens;
  return seq;
}

// Replaces masked search tokens by mask embedding + position embedding.
// Token count is unchanged, so teacher and student stay index-aligned.
template <class S>
TokenSeq<S> apply_mask(const TokenSeq<S>& seq, const Mask& mask,
                       const BranchParams<S>& branch) {
  if (static_cast<int>(mask.bits.size()) != seq.n_search)
    contract_error("apply_mask: mask length does not match search token count");
  TokenSeq<S> out = seq;
  for (int i = 0; i < seq.n_search; ++i)
    if (mask.bits[i])
      out.tokens.row(i) = branch.mask_token.row(0) + branch.pos_search.row(i);
  return out;
}

// ---- layer norm ----

template <class S>
struct LayerNormCache {
  Mat<S> xhat;  // N x D
  Mat<S> istd;  // N x 1
};

template <class S>
Mat<S> layer_norm(const Mat<S>& x, const LayerNormParams<S>& p,
                  LayerNormCache<S>* cache = nullptr) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<S> xhat(n, d), istd(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mu = x.row(i).mean();
    const S var = (x.row(i).array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    xhat.row(i) = (x.row(i).array() - mu) * is;
    istd(i, 0) = is;
  }
  Mat<S> y = xhat.array().rowwise() * p.gamma.row(0).array();
  y.array().rowwise() += p.beta.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->istd = std::move(istd);
  }
  return y;
}

template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const LayerNormParams<S>& p,
                           const LayerNormCache<S>& c, Mat<S>& dgamma,
                           Mat<S>& dbeta) {
  dgamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  const Mat<S> dxhat = dy.array().rowwise() * p.gamma.row(0).array();
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const S m1 = dxhat.row(i).mean();
    const S m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) =
        (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2) * c.istd(i, 0);
  }
  return dx;
}

// ---- GELU ----

template <class S>
Mat<S> gelu(const Mat<S>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  return x.unaryExpr([](S v) {
    return static_cast<S>(0.5 * static_cast<double>(v) *
                          (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
  });
}

template <class S>
Mat<S> gelu_grad(const Mat<S>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return x.unaryExpr([](S v) {
    const double d = static_cast<double>(v);
    return static_cast<S>(0.5 * (1.0 + std::erf(d * inv_sqrt2)) +
                          d * std::exp(-0.5 * d * d) * inv_sqrt_2pi);
  });
}

// ---- transformer block ----

template <class S>
struct BlockCache {
  Mat<S> x_in;
  LayerNormCache<S> ln1c, ln2c;
  Mat<S> y1, y2;  // LN outputs
  Mat<S> q, k, v;
  std::vector<Mat<S>> attn;  // H of N x N
  Mat<S> attn_concat;
  Mat<S> x_mid;
  Mat<S> z1, a1;
};

// Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)).
template <class S>
Mat<S> block_forward_cached(const Mat<S>& x, const BlockParams<S>& blk,
                            const ModelConfig& cfg, BlockCache<S>& c) {
  const int dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const Eigen::Index n = x.rows();

  c.x_in = x;
  c.y1 = layer_norm(x, blk.ln1, &c.ln1c);
  c.q.noalias() = c.y1 * blk.wq; c.q.rowwise() += blk.bq.row(0);
  c.k.noalias() = c.y1 * blk.wk; c.k.rowwise() += blk.bk.row(0);
  c.v.noalias() = c.y1 * blk.wv; c.v.rowwise() += blk.bv.row(0);

  c.attn.assign(cfg.heads, Mat<S>());
  c.attn_concat.resize(n, cfg.channels);
  for (int h = 0; h < cfg.heads; ++h) {
    auto qh = c.q.middleCols(h * dh, dh);
    auto kh = c.k.middleCols(h * dh, dh);
    auto vh = c.v.middleCols(h * dh, dh);
    Mat<S> a = (qh * kh.transpose()) * scale;
    softmax_rows(a);
    c.attn_concat.middleCols(h * dh, dh).noalias() = a * vh;
    c.attn[h] = std::move(a);
  }
  c.x_mid.noalias() = c.attn_concat * blk.wo;
  c.x_mid.rowwise() += blk.bo.row(0);
  c.x_mid += x;

  c.y2 = layer_norm(c.x_mid, blk.ln2, &c.ln2c);
  c.z1.noalias() = c.y2 * blk.w1;
  c.z1.rowwise() += blk.b1.row(0);
  c.a1 = gelu(c.z1);
  Mat<S> out = c.a1 * blk.w2;
  out.rowwise() += blk.b2.row(0);
  out += c.x_mid;
  return out;
}

// One full block: returns the new sequence and this block's attention.
template <class S>
std::pair<TokenSeq<S>, AttnWeights<S>> block_forward(const TokenSeq<S>& seq,
                                                     const BlockParams<S>& blk,
                                                     const ModelConfig& cfg) {
  BlockCache<S> c;
  TokenSeq<S> out = seq;
  out.tokens = block_forward_cached(seq.tokens, blk, cfg, c);
  if (!out.tokens.allFinite())
    throw std::runtime_error("block_forward: non-finite output");
  AttnWeights<S> attn;
  attn.head = std::move(c.attn);
  return {std::move(out), std::move(attn)};
}

// Accumulates parameter gradients into `g` (same shapes as BlockParams) and
// returns the gradient with respect to the block input.
template <class S>
Mat<S> block_backward(const BlockParams<S>& blk, const ModelConfig& cfg,
                      const BlockCache<S>& c, const Mat<S>& d_out,
                      BlockParams<S>& g) {
  const int dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  // MLP path.
  g.w2.noalias() += c.a1.transpose() * d_out;
  g.b2 += d_out.colwise().sum();
  Mat<S> da1 = d_out * blk.w2.transpose();
  Mat<S> dz1 = (da1.array() * gelu_grad(c.z1).array()).matrix();
  g.w1.noalias() += c.y2.transpose() * dz1;
  g.b1 += dz1.colwise().sum();
  const Mat<S> dy2 = dz1 * blk.w1.transpose();
  Mat<S> d_xmid = d_out + layer_norm_backward(dy2, blk.ln2, c.ln2c,
                                              g.ln2.gamma, g.ln2.beta);

  // Attention path.
  g.wo.noalias() += c.attn_concat.transpose() * d_xmid;
  g.bo += d_xmid.colwise().sum();
  const Mat<S> d_concat = d_xmid * blk.wo.transpose();
  Mat<S> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()),
      dv(c.v.rows(), c.v.cols());
  for (int h = 0; h < cfg.heads; ++h) {
    auto qh = c.q.middleCols(h * dh, dh);
    auto kh = c.k.middleCols(h * dh, dh);
    auto vh = c.v.middleCols(h * dh, dh);
    const auto& a = c.attn[h];
    auto doh = d_concat.middleCols(h * dh, dh);
    Mat<S> da = doh * vh.transpose();
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * doh;
    // softmax rows: ds = a .* (da - rowsum(da .* a))
    Mat<S> ds = a.array() * da.array();
    const Mat<S> rowsum = ds.rowwise().sum();
    ds = a.array() * (da.array().colwise() - rowsum.col(0).array());
    ds *= scale;
    dq.middleCols(h * dh, dh).noalias() = ds * kh;
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh;
  }
  g.wq.noalias() += c.y1.transpose() * dq;
  g.bq += dq.colwise().sum();
  g.wk.noalias() += c.y1.transpose() * dk;
  g.bk += dk.colwise().sum();
  g.wv.noalias() += c.y1.transpose() * dv;
  g.bv += dv.colwise().sum();
  Mat<S> dy1 = dq * blk.wq.transpose();
  dy1.noalias() += dk * blk.wk.transpose();
  dy1.noalias() += dv * blk.wv.transpose();
  return d_xmid + layer_norm_backward(dy1, blk.ln1, c.ln1c, g.ln1.gamma, g.ln1.beta);
}

// ---- full branch ----

template <class S>
struct BranchForward {
  LayerFeatures<S> features;           // recorded after each block
  std::vector<AttnWeights<S>> attn;    // per block, pre-elimination shape
  TokenSeq<S> final_seq;
  std::vector<int> kept_search;        // into the original search grid
};

// Inference-oriented single-branch pass. When `elim` is active, this branch
// scores candidates from its own attention profile; the joint multi-modal
// variants live in the model driver.
template <class S>
BranchForward<S> forward_branch(const TokenSeq<S>& seq, const BranchParams<S>& branch,
                                const ModelConfig& cfg,
                                const EliminationConfig& elim = EliminationConfig::none()) {
  elim.validate(cfg.layers);
  BranchForward<S> out;
  out.final_seq = seq;
  out.kept_search.resize(seq.n_search);
  for (int i = 0; i < seq.n_search; ++i) out.kept_search[i] = i;

  for (int l = 0; l < cfg.layers; ++l) {
    auto [next, attn] = block_forward(out.final_seq, branch.blocks[l], cfg);
    out.final_seq = std::move(next);
    if (elim.active_at(l + 1)) {
      const auto prof = search_attention_profile(attn, out.final_seq.n_search,
                                                 out.final_seq.n_template);
      const auto kept = top_k_keep(prof, elim.keep_ratio);
      out.final_seq = filter_and_record(out.final_seq, kept, out.kept_search);
    }
    out.features.layers.push_back(out.final_seq.tokens);
    out.attn.push_back(std::move(attn));
  }
  return out;
}

// Training-oriented pass that retains every intermediate needed by the
// backward sweep. No elimination here: distillation requires index-aligned
// features across all four branches.
template <class S>
struct BranchCache {
  Mat<S> patches;                       // N x (3 p^2)
  std::vector<std::uint8_t> mask_bits;  // empty when unmasked
  int n_search = 0, n_template = 0;
  std::vector<BlockCache<S>> blocks;
  LayerFeatures<S> features;
};

template <class S>
void forward_branch_train(const Image& search_img, const Image& template_img,
                          const BranchParams<S>& branch, const ModelConfig& cfg,
                          const Mask* mask, BranchCache<S>& cache) {
  const Mat<S> ps = patchify<S>(search_img, cfg.patch);
  const Mat<S> pt = patchify<S>(template_img, cfg.patch);
  cache.n_search = static_cast<int>(ps.rows());
  cache.n_template = static_cast<int>(pt.rows());
  if (ps.rows() != branch.pos_search.rows() || pt.rows() != branch.pos_template.rows())
    contract_error("forward_branch_train: crop geometry does not match the model");
  cache.patches.resize(cache.n_search + cache.n_template, ps.cols());
  cache.patches.topRows(cache.n_search) = ps;
  cache.patches.bottomRows(cache.n_template) = pt;

  Mat<S> x;
  x.noalias() = cache.patches * branch.patch_w;
  x.rowwise() += branch.patch_b.row(0);
  x.topRows(cache.n_search) += branch.pos_search;
  x.bottomRows(cache.n_template) += branch.pos_template;
  cache.mask_bits.clear();
  if (mask) {
    if (static_cast<int>(mask->bits.size()) != cache.n_search)
      contract_error("forward_branch_train: mask length mismatch");
    cache.mask_bits = mask->bits;
    for (int i = 0; i < cache.n_search; ++i)
      if (mask->bits[i])
        x.row(i) = branch.mask_token.row(0) + branch.pos_search.row(i);
  }

  cache.blocks.assign(cfg.layers, BlockCache<S>());
  cache.features.layers.clear();
  for (int l = 0; l < cfg.layers; ++l) {
    x = block_forward_cached(x, branch.blocks[l], cfg, cache.blocks[l]);
    cache.features.layers.push_back(x);
  }
}

// d_features[l] may be empty (no direct loss on that layer). Gradients
// accumulate into `grads`, which mirrors BranchParams shapes.
template <class S>
void branch_backward(const BranchParams<S>& branch, const ModelConfig& cfg,
                     const BranchCache<S>& cache, std::vector<Mat<S>>& d_features,
                     BranchParams<S>& grads) {
  const int n = cache.n_search + cache.n_template;
  Mat<S> g = Mat<S>::Zero(n, cfg.channels);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    if (d_features[static_cast<size_t>(l)].size() > 0)
      g += d_features[static_cast<size_t>(l)];
    g = block_backward(branch.blocks[l], cfg, cache.blocks[l], g, grads.blocks[l]);
  }

  Mat<S> g_patch = g;
  if (!cache.mask_bits.empty()) {
    for (int i = 0; i < cache.n_search; ++i)
      if (cache.mask_bits[i]) {
        grads.mask_token += g.row(i);
        g_patch.row(i).setZero();
      }
  }
  grads.patch_w.noalias() += cache.patches.transpose() * g_patch;
  grads.patch_b += g_patch.colwise().sum();
  grads.pos_search += g.topRows(cache.n_search);
  grads.pos_template += g.bottomRows(cache.n_template);
}

}  // namespace ckd
