#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ckd/backbone.hpp"
#include "ckd/distill.hpp"
#include "ckd/elimination.hpp"
#include "ckd/head.hpp"

namespace ckd {

// Two frozen-role teacher branches, two student branches, one fused student
// head plus two single-modal teacher heads. Inference uses only the students
// and the fused head.
template <class S>
struct FourBranchModel {
  ModelConfig cfg;
  int template_size = 32;
  int search_size = 64;
  // Instance-normalize student search features before fusion (the
  // normalization-only ablation). Changes the inference path, so it is
  // persisted with the parameters.
  bool feature_norm = false;

  BranchParams<S> teacher_rgb, teacher_tir, student_rgb, student_tir;
  HeadParams<S> head_fused, head_rgb, head_tir;

  int grid() const { return search_size / cfg.patch; }
  int n_search() const { return grid() * grid(); }
  int n_template() const {
    const int g = template_size / cfg.patch;
    return g * g;
  }
};

template <class S>
FourBranchModel<S> init_model(const ModelConfig& cfg, int template_size,
                              int search_size, std::uint64_t seed) {
  cfg.validate();
  if (template_size % cfg.patch != 0 || search_size % cfg.patch != 0)
    contract_error("init_model: crop sides must be divisible by the patch size");
  FourBranchModel<S> m;
  m.cfg = cfg;
  m.template_size = template_size;
  m.search_size = search_size;
  Rng rng(seed);
  const int ns = m.n_search(), nt = m.n_template();
  m.teacher_rgb = init_branch<S>(cfg, ns, nt, rng);
  m.teacher_tir = init_branch<S>(cfg, ns, nt, rng);
  m.student_rgb = init_branch<S>(cfg, ns, nt, rng);
  m.student_tir = init_branch<S>(cfg, ns, nt, rng);
  m.head_fused = init_head<S>(2 * cfg.channels, rng);
  m.head_rgb = init_head<S>(cfg.channels, rng);
  m.head_tir = init_head<S>(cfg.channels, rng);
  return m;
}

// Same shapes as `like`, all parameters zero. Gradient accumulator.
template <class S>
FourBranchModel<S> zero_like(const FourBranchModel<S>& like);

// ---- parameter registry ----
// Fixed traversal order shared by the optimizer, checkpoints, and gradient
// checks. `is_head` selects the learning-rate group.

template <class S, class F>
void visit_params(FourBranchModel<S>& m, F&& f) {
  auto block = [&](const std::string& bn, BlockParams<S>& b) {
    f(bn + ".ln1.gamma", b.ln1.gamma, false);
    f(bn + ".ln1.beta", b.ln1.beta, false);
    f(bn + ".wq", b.wq, false); f(bn + ".bq", b.bq, false);
    f(bn + ".wk", b.wk, false); f(bn + ".bk", b.bk, false);
    f(bn + ".wv", b.wv, false); f(bn + ".bv", b.bv, false);
    f(bn + ".wo", b.wo, false); f(bn + ".bo", b.bo, false);
    f(bn + ".ln2.gamma", b.ln2.gamma, false);
    f(bn + ".ln2.beta", b.ln2.beta, false);
    f(bn + ".w1", b.w1, false); f(bn + ".b1", b.b1, false);
    f(bn + ".w2", b.w2, false); f(bn + ".b2", b.b2, false);
  };
  auto branch = [&](const std::string& name, BranchParams<S>& b) {
    f(name + ".patch_w", b.patch_w, false);
    f(name + ".patch_b", b.patch_b, false);
    f(name + ".pos_search", b.pos_search, false);
    f(name + ".pos_template", b.pos_template, false);
    f(name + ".mask_token", b.mask_token, false);
    for (size_t l = 0; l < b.blocks.size(); ++l)
      block(name + ".blocks." + std::to_string(l), b.blocks[l]);
  };
  auto head_branch = [&](const std::string& hn, HeadBranchParams<S>& hb) {
    f(hn + ".conv_w", hb.conv_w, true);
    f(hn + ".conv_b", hb.conv_b, true);
    f(hn + ".out_w", hb.out_w, true);
    f(hn + ".out_b", hb.out_b, true);
  };
  auto head = [&](const std::string& name, HeadParams<S>& h) {
    f(name + ".proj_w", h.proj_w, true);
    f(name + ".proj_b", h.proj_b, true);
    head_branch(name + ".score", h.score);
    head_branch(name + ".offset", h.offset);
    head_branch(name + ".size", h.size);
  };
  branch("teacher_rgb", m.teacher_rgb);
  branch("teacher_tir", m.teacher_tir);
  branch("student_rgb", m.student_rgb);
  branch("student_tir", m.student_tir);
  head("head_fused", m.head_fused);
  head("head_rgb", m.head_rgb);
  head("head_tir", m.head_tir);
}

template <class S>
struct ParamRef {
  std::string name;
  Mat<S>* value = nullptr;
  bool is_head = false;
};

template <class S>
std::vector<ParamRef<S>> collect_params(FourBranchModel<S>& m) {
  std::vector<ParamRef<S>> out;
  visit_params(m, [&](const std::string& name, Mat<S>& v, bool is_head) {
    out.push_back({name, &v, is_head});
  });
  return out;
}

template <class S>
FourBranchModel<S> zero_like(const FourBranchModel<S>& like) {
  FourBranchModel<S> z = like;
  visit_params(z, [](const std::string&, Mat<S>& v, bool) { v.setZero(); });
  return z;
}

// ---- checkpoint ----

constexpr char kCheckpointMagic[8] = {'C', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) data_error(std::string("checkpoint: truncated while reading ") + what);
  return v;
}
}  // namespace detail

template <class S>
void save_checkpoint(FourBranchModel<S>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) data_error("checkpoint: cannot open for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(sizeof(S)));
  detail::write_pod(out, static_cast<std::int32_t>(model.cfg.layers));
  detail::write_pod(out, static_cast<std::int32_t>(model.cfg.channels));
  detail::write_pod(out, static_cast<std::int32_t>(model.cfg.heads));
  detail::write_pod(out, static_cast<std::int32_t>(model.cfg.patch));
  detail::write_pod(out, static_cast<std::int32_t>(model.template_size));
  detail::write_pod(out, static_cast<std::int32_t>(model.search_size));
  detail::write_pod(out, static_cast<std::uint8_t>(model.feature_norm ? 1 : 0));
  visit_params(model, [&](const std::string& name, Mat<S>& v, bool) {
    detail::write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<std::uint64_t>(v.rows()));
    detail::write_pod(out, static_cast<std::uint64_t>(v.cols()));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(sizeof(S) * v.size()));
  });
  if (!out) data_error("checkpoint: write failed: " + path);
}

template <class S>
FourBranchModel<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) data_error("checkpoint: cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    data_error("checkpoint: bad magic: " + path);
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    data_error("checkpoint: unsupported version " + std::to_string(version));
  const auto ssize = detail::read_pod<std::uint32_t>(in, "scalar size");
  if (ssize != sizeof(S))
    data_error("checkpoint: scalar width " + std::to_string(ssize) +
               " does not match this build");
  ModelConfig cfg;
  cfg.layers = detail::read_pod<std::int32_t>(in, "layers");
  cfg.channels = detail::read_pod<std::int32_t>(in, "channels");
  cfg.heads = detail::read_pod<std::int32_t>(in, "heads");
  cfg.patch = detail::read_pod<std::int32_t>(in, "patch");
  const auto tsize = detail::read_pod<std::int32_t>(in, "template size");
  const auto ssz = detail::read_pod<std::int32_t>(in, "search size");
  const auto fnorm = detail::read_pod<std::uint8_t>(in, "feature-norm flag");
  FourBranchModel<S> model = init_model<S>(cfg, tsize, ssz, 0);
  model.feature_norm = fnorm != 0;
  visit_params(model, [&](const std::string& name, Mat<S>& v, bool) {
    const auto nlen = detail::read_pod<std::uint32_t>(in, "entry name length");
    std::string stored(nlen, '\0');
    in.read(stored.data(), nlen);
    if (!in || stored != name)
      data_error("checkpoint: expected entry " + name + ", found " +
                 (in ? stored : std::string("<eof>")));
    const auto rows = detail::read_pod<std::uint64_t>(in, "rows");
    const auto cols = detail::read_pod<std::uint64_t>(in, "cols");
    if (rows != static_cast<std::uint64_t>(v.rows()) ||
        cols != static_cast<std::uint64_t>(v.cols()))
      data_error("checkpoint: shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(S) * v.size()));
    if (!in) data_error("checkpoint: truncated data for " + name);
  });
  return model;
}

// ---- student-pair inference ----

template <class S>
struct StudentForward {
  HeadOutput<S> out;
  std::vector<int> kept_search;  // surviving search indices, original grid
};

// Runs both student branches in lockstep. At elimination layers the kept
// index set is shared between modalities: MCE scores by the elementwise max
// of the two attention profiles, CE by the RGB profile alone. Survivors are
// scattered back to the dense grid before fusion so the head geometry is
// independent of keep_ratio.
template <class S>
StudentForward<S> forward_students(const FourBranchModel<S>& m,
                                   const Image& template_rgb, const Image& template_tir,
                                   const Image& search_rgb, const Image& search_tir,
                                   const EliminationConfig& elim) {
  elim.validate(m.cfg.layers);
  TokenSeq<S> seq_rgb = concat_tokens(
      patch_embed(search_rgb, m.student_rgb, m.cfg, TokenRole::Search),
      patch_embed(template_rgb, m.student_rgb, m.cfg, TokenRole::Template));
  TokenSeq<S> seq_tir = concat_tokens(
      patch_embed(search_tir, m.student_tir, m.cfg, TokenRole::Search),
      patch_embed(template_tir, m.student_tir, m.cfg, TokenRole::Template));

  StudentForward<S> res;
  res.kept_search.resize(seq_rgb.n_search);
  for (int i = 0; i < seq_rgb.n_search; ++i) res.kept_search[i] = i;

  for (int l = 0; l < m.cfg.layers; ++l) {
    auto [next_rgb, attn_rgb] = block_forward(seq_rgb, m.student_rgb.blocks[l], m.cfg);
    auto [next_tir, attn_tir] = block_forward(seq_tir, m.student_tir.blocks[l], m.cfg);
    seq_rgb = std::move(next_rgb);
    seq_tir = std::move(next_tir);
    if (elim.mode != ElimMode::None && elim.active_at(l + 1)) {
      std::vector<double> h;
      if (elim.mode == ElimMode::Mce) {
        h = candidate_scores(attn_rgb, attn_tir, seq_rgb.n_search, seq_rgb.n_template);
      } else {
        h = search_attention_profile(attn_rgb, seq_rgb.n_search, seq_rgb.n_template);
      }
      const auto kept = top_k_keep(h, elim.keep_ratio);
      std::vector<int> kept_copy = res.kept_search;
      seq_rgb = filter_and_record(seq_rgb, kept, res.kept_search);
      seq_tir = filter_and_record(seq_tir, kept, kept_copy);
    }
  }

  Mat<S> grid_rgb = scatter_back(
      Mat<S>(seq_rgb.tokens.topRows(seq_rgb.n_search)), res.kept_search, m.n_search());
  Mat<S> grid_tir = scatter_back(
      Mat<S>(seq_tir.tokens.topRows(seq_tir.n_search)), res.kept_search, m.n_search());
  if (m.feature_norm) {
    grid_rgb = instance_normalize_layer(grid_rgb, kInstanceNormEps);
    grid_tir = instance_normalize_layer(grid_tir, kInstanceNormEps);
  }
  const Mat<S> fused = fuse_student_features(grid_rgb, grid_tir);
  res.out = head_forward(fused, m.head_fused, m.grid());
  return res;
}

template <class S>
BBox track_frame(const FourBranchModel<S>& m, const FrameSample& sample,
                 const EliminationConfig& elim) {
  const auto fwd = forward_students<S>(m, sample.template_rgb, sample.template_tir,
                                       sample.search_rgb, sample.search_tir, elim);
  return decode_box(fwd.out, m.cfg.patch, m.search_size, sample.transform);
}

}  // namespace ckd
