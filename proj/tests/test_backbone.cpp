#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ckd/backbone.hpp"

using namespace ckd;
using D = double;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.patch = 8;
  return cfg;
}

Image random_image(int side, int c, Rng& rng) {
  Image img(side, side, c);
  for (auto& v : img.pix) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST_CASE("patchify flattens row-major patches with interleaved channels") {
  const int p = 8;
  Image img(16, 16, 3);
  // Patch row = py*2+px; inside a patch, col = (y*p + x)*3 + ch.
  img.at(0, 0, 0) = 0.125f;        // patch 0, col 0
  img.at(0, 8, 2) = 0.25f;         // patch 1, col 2
  img.at(8 + 3, 5, 1) = 0.5f;      // patch 2, col (3*8+5)*3+1
  img.at(8 + 7, 8 + 7, 2) = 1.0f;  // patch 3, last col
  const Mat<D> out = patchify<D>(img, p);
  REQUIRE(out.rows() == 4);
  REQUIRE(out.cols() == 3 * p * p);
  REQUIRE(out(0, 0) == 0.125);
  REQUIRE(out(1, 2) == 0.25);
  REQUIRE(out(2, (3 * p + 5) * 3 + 1) == 0.5);
  REQUIRE(out(3, 3 * p * p - 1) == 1.0);
}

TEST_CASE("patchify replicates single-channel input across rgb slots") {
  Rng rng(3);
  const Image img = random_image(16, 1, rng);
  const Mat<D> out = patchify<D>(img, 8);
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); c += 3) {
      REQUIRE(out(r, c) == out(r, c + 1));
      REQUIRE(out(r, c) == out(r, c + 2));
    }
}

TEST_CASE("patchify validates geometry") {
  REQUIRE_THROWS_AS(patchify<D>(Image(16, 24, 3), 8), std::invalid_argument);
  REQUIRE_THROWS_AS(patchify<D>(Image(20, 20, 3), 8), std::invalid_argument);
}

TEST_CASE("patch_embed of a zero image is the position table") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(5);
  const BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  const Image zero_search(24, 24, 3, 0.f);
  const TokenSeq<D> s = patch_embed(zero_search, br, cfg, TokenRole::Search);
  REQUIRE(s.n_search == 9);
  REQUIRE(s.n_template == 0);
  REQUIRE((s.tokens - br.pos_search).cwiseAbs().maxCoeff() == 0.0);

  const Image zero_templ(16, 16, 3, 0.f);
  const TokenSeq<D> t = patch_embed(zero_templ, br, cfg, TokenRole::Template);
  REQUIRE(t.n_template == 4);
  REQUIRE((t.tokens - br.pos_template).cwiseAbs().maxCoeff() == 0.0);

  REQUIRE_THROWS_AS(patch_embed(zero_templ, br, cfg, TokenRole::Search),
                    std::invalid_argument);
}

TEST_CASE("concat_tokens puts search rows first") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(7);
  const BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  const Image si = random_image(24, 3, rng), ti = random_image(16, 3, rng);
  const TokenSeq<D> s = patch_embed(si, br, cfg, TokenRole::Search);
  const TokenSeq<D> t = patch_embed(ti, br, cfg, TokenRole::Template);
  const TokenSeq<D> both = concat_tokens(s, t);
  REQUIRE(both.n_search == 9);
  REQUIRE(both.n_template == 4);
  REQUIRE(both.total() == 13);
  REQUIRE((both.tokens.topRows(9) - s.tokens).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((both.tokens.bottomRows(4) - t.tokens).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("apply_mask swaps exactly the flagged search rows") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(9);
  BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  fill_truncated_normal(br.mask_token, 0.02, rng);
  const Image si = random_image(24, 3, rng), ti = random_image(16, 3, rng);
  const TokenSeq<D> both =
      concat_tokens(patch_embed(si, br, cfg, TokenRole::Search),
                    patch_embed(ti, br, cfg, TokenRole::Template));

  Mask m;
  m.bits = {1, 0, 0, 1, 0, 0, 0, 0, 1};
  const TokenSeq<D> masked = apply_mask(both, m, br);
  REQUIRE(masked.total() == both.total());
  for (int i = 0; i < 9; ++i) {
    if (m.bits[i]) {
      const Mat<D> want = br.mask_token + br.pos_search.row(i);
      REQUIRE((masked.tokens.row(i) - want).cwiseAbs().maxCoeff() == 0.0);
    } else {
      REQUIRE((masked.tokens.row(i) - both.tokens.row(i)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  REQUIRE((masked.tokens.bottomRows(4) - both.tokens.bottomRows(4))
              .cwiseAbs()
              .maxCoeff() == 0.0);

  Mask wrong;
  wrong.bits.assign(5, 0);
  REQUIRE_THROWS_AS(apply_mask(both, wrong, br), std::invalid_argument);
}

TEST_CASE("layer_norm standardizes each row and applies the affine") {
  Rng rng(11);
  Mat<D> x(6, 16);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-3, 7);
  LayerNormParams<D> p = init_layer_norm<D>(16);
  const Mat<D> y = layer_norm(x, p);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    REQUIRE_THAT(y.row(i).mean(), Catch::Matchers::WithinAbs(0.0, 1e-12));
    const double var = (y.row(i).array() - y.row(i).mean()).square().mean();
    REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));
  }
  p.gamma.setConstant(2.0);
  p.beta.setConstant(3.0);
  const Mat<D> y2 = layer_norm(x, p);
  REQUIRE_THAT(y2.row(0).mean(), Catch::Matchers::WithinAbs(3.0, 1e-12));
}

TEST_CASE("gelu matches the exact gaussian form") {
  Mat<D> x(1, 3);
  x << 0.0, 1.0, -8.0;
  const Mat<D> y = gelu(x);
  REQUIRE(y(0, 0) == 0.0);
  REQUIRE_THAT(y(0, 1), Catch::Matchers::WithinAbs(0.8413447460685429, 1e-15));
  REQUIRE_THAT(y(0, 2), Catch::Matchers::WithinAbs(0.0, 1e-12));
  // Derivative at 0 is exactly 1/2.
  Mat<D> z(1, 1);
  z << 0.0;
  REQUIRE_THAT(gelu_grad(z)(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("attention rows are distributions") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(13);
  const BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  const Image si = random_image(24, 3, rng), ti = random_image(16, 3, rng);
  const TokenSeq<D> both =
      concat_tokens(patch_embed(si, br, cfg, TokenRole::Search),
                    patch_embed(ti, br, cfg, TokenRole::Template));
  auto [out, attn] = block_forward(both, br.blocks[0], cfg);
  REQUIRE(static_cast<int>(attn.head.size()) == cfg.heads);
  for (const auto& a : attn.head) {
    REQUIRE(a.rows() == both.total());
    REQUIRE(a.cols() == both.total());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      REQUIRE_THAT(a.row(i).sum(), Catch::Matchers::WithinAbs(1.0, 1e-12));
      REQUIRE(a.row(i).minCoeff() >= 0.0);
    }
  }
  REQUIRE(out.tokens.rows() == both.total());
}

TEST_CASE("a block with zero weights is the identity") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(17);
  BlockParams<D> blk = init_block<D>(cfg, rng);
  blk.wq.setZero(); blk.wk.setZero(); blk.wv.setZero(); blk.wo.setZero();
  blk.w1.setZero(); blk.w2.setZero();
  TokenSeq<D> seq;
  seq.n_search = 9;
  seq.n_template = 4;
  seq.tokens.resize(13, cfg.channels);
  for (Eigen::Index i = 0; i < seq.tokens.size(); ++i)
    seq.tokens.data()[i] = rng.uniform(-1, 1);
  auto [out, attn] = block_forward(seq, blk, cfg);
  REQUIRE((out.tokens - seq.tokens).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("block_forward rejects non-finite activations") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(19);
  const BlockParams<D> blk = init_block<D>(cfg, rng);
  TokenSeq<D> seq;
  seq.n_search = 9;
  seq.n_template = 4;
  seq.tokens = Mat<D>::Ones(13, cfg.channels);
  seq.tokens(0, 0) = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(block_forward(seq, blk, cfg), std::runtime_error);
}

TEST_CASE("forward_branch records one feature map per layer") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(23);
  const BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  const Image si = random_image(24, 3, rng), ti = random_image(16, 3, rng);
  const TokenSeq<D> both =
      concat_tokens(patch_embed(si, br, cfg, TokenRole::Search),
                    patch_embed(ti, br, cfg, TokenRole::Template));

  const BranchForward<D> fwd = forward_branch(both, br, cfg);
  REQUIRE(fwd.features.layer_count() == cfg.layers);
  REQUIRE(fwd.final_seq.n_search == 9);
  REQUIRE(fwd.kept_search.size() == 9);
  for (int i = 0; i < 9; ++i) REQUIRE(fwd.kept_search[i] == i);

  EliminationConfig elim;
  elim.mode = ElimMode::CeRgbOnly;
  elim.layers = {1};
  elim.keep_ratio = 0.5;
  const BranchForward<D> pruned = forward_branch(both, br, cfg, elim);
  const int expect = static_cast<int>(std::ceil(0.5 * 9));
  REQUIRE(pruned.final_seq.n_search == expect);
  REQUIRE(static_cast<int>(pruned.kept_search.size()) == expect);
  REQUIRE(pruned.features.layers[0].rows() == expect + 4);
  REQUIRE(pruned.features.layers[1].rows() == expect + 4);
  // Attention is recorded before the drop.
  REQUIRE(pruned.attn[0].head[0].rows() == 13);
}

TEST_CASE("fully masked search rows hide the search image") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(29);
  BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  fill_truncated_normal(br.mask_token, 0.02, rng);
  const Image ti = random_image(16, 3, rng);
  const Image s1 = random_image(24, 3, rng), s2 = random_image(24, 3, rng);
  Mask all;
  all.bits.assign(9, 1);

  BranchCache<D> c1, c2;
  forward_branch_train(s1, ti, br, cfg, &all, c1);
  forward_branch_train(s2, ti, br, cfg, &all, c2);
  for (int l = 0; l < cfg.layers; ++l)
    REQUIRE((c1.features.layers[l] - c2.features.layers[l]).cwiseAbs().maxCoeff() ==
            0.0);

  // Unmasked, the two search crops must separate.
  BranchCache<D> u1, u2;
  forward_branch_train(s1, ti, br, cfg, nullptr, u1);
  forward_branch_train(s2, ti, br, cfg, nullptr, u2);
  REQUIRE((u1.features.layers[0] - u2.features.layers[0]).cwiseAbs().maxCoeff() >
          0.0);
}

TEST_CASE("branch gradients match finite differences on a scalar probe") {
  const ModelConfig cfg = tiny_cfg();
  Rng rng(31);
  BranchParams<D> br = init_branch<D>(cfg, 9, 4, rng);
  const Image si = random_image(24, 3, rng), ti = random_image(16, 3, rng);
  Mask m = sample_mask(9, 0.25, rng);

  // Probe loss: weighted sum of the last layer, plus 0.5 * weighted mid layer.
  Mat<D> w_last(13, cfg.channels), w_mid(13, cfg.channels);
  for (Eigen::Index i = 0; i < w_last.size(); ++i) {
    w_last.data()[i] = rng.uniform(-1, 1);
    w_mid.data()[i] = rng.uniform(-1, 1);
  }
  auto loss_of = [&](const BranchParams<D>& p) {
    BranchCache<D> c;
    forward_branch_train(si, ti, p, cfg, &m, c);
    return (w_last.array() * c.features.layers[1].array()).sum() +
           0.5 * (w_mid.array() * c.features.layers[0].array()).sum();
  };

  BranchCache<D> cache;
  forward_branch_train(si, ti, br, cfg, &m, cache);
  BranchParams<D> grads = init_branch<D>(cfg, 9, 4, rng);
  auto zero_branch = [&](BranchParams<D>& p) {
    p.patch_w.setZero(); p.patch_b.setZero(); p.pos_search.setZero();
    p.pos_template.setZero(); p.mask_token.setZero();
    for (auto& blk : p.blocks) {
      blk.ln1.gamma.setZero(); blk.ln1.beta.setZero();
      blk.ln2.gamma.setZero(); blk.ln2.beta.setZero();
      blk.wq.setZero(); blk.bq.setZero(); blk.wk.setZero(); blk.bk.setZero();
      blk.wv.setZero(); blk.bv.setZero(); blk.wo.setZero(); blk.bo.setZero();
      blk.w1.setZero(); blk.b1.setZero(); blk.w2.setZero(); blk.b2.setZero();
    }
  };
  zero_branch(grads);
  std::vector<Mat<D>> d_features(2);
  d_features[1] = w_last;
  d_features[0] = 0.5 * w_mid;
  branch_backward(br, cfg, cache, d_features, grads);

  // Spot-check a few coordinates of several parameter tensors.
  const double eps = 1e-6;
  auto check = [&](Mat<D>& param, const Mat<D>& grad) {
    Rng pick(101);
    for (int t = 0; t < 4; ++t) {
      const Eigen::Index i = pick.uniform_int(0, param.size() - 1);
      const double keep = param.data()[i];
      param.data()[i] = keep + eps;
      const double up = loss_of(br);
      param.data()[i] = keep - eps;
      const double dn = loss_of(br);
      param.data()[i] = keep;
      const double fd = (up - dn) / (2 * eps);
      REQUIRE_THAT(grad.data()[i],
                   Catch::Matchers::WithinAbs(fd, 1e-4 * std::max(1.0, std::abs(fd))));
    }
  };
  check(br.patch_w, grads.patch_w);
  check(br.pos_search, grads.pos_search);
  check(br.mask_token, grads.mask_token);
  check(br.blocks[0].wq, grads.blocks[0].wq);
  check(br.blocks[1].w2, grads.blocks[1].w2);
  check(br.blocks[0].ln1.gamma, grads.blocks[0].ln1.gamma);
}
