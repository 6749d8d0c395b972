#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ckd/data.hpp"

using namespace ckd;
namespace fs = std::filesystem;

namespace {

bool images_equal(const Image& a, const Image& b) {
  return a.h == b.h && a.w == b.w && a.c == b.c && a.pix == b.pix;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) : path(fs::temp_directory_path() / tag) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("synthetic sequences are reproducible") {
  const Sequence a = generate_synthetic_sequence(7, 6, 96);
  const Sequence b = generate_synthetic_sequence(7, 6, 96);
  REQUIRE(a.name == b.name);
  REQUIRE(a.frames.size() == 6);
  for (size_t i = 0; i < a.frames.size(); ++i) {
    REQUIRE(images_equal(a.frames[i].rgb, b.frames[i].rgb));
    REQUIRE(images_equal(a.frames[i].tir, b.frames[i].tir));
    REQUIRE(a.frames[i].gt.x == b.frames[i].gt.x);
    REQUIRE(a.frames[i].gt.w == b.frames[i].gt.w);
  }
  const Sequence c = generate_synthetic_sequence(8, 6, 96);
  REQUIRE_FALSE(images_equal(a.frames[0].rgb, c.frames[0].rgb));
}

TEST_CASE("synthetic frames stay inside the canvas and move") {
  const Sequence seq = generate_synthetic_sequence(3, 12, 128);
  REQUIRE(seq.frames[0].rgb.c == 3);
  REQUIRE(seq.frames[0].tir.c == 1);
  double total_motion = 0;
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    const BBox& g = seq.frames[i].gt;
    REQUIRE_FALSE(g.degenerate());
    REQUIRE(g.x >= 0);
    REQUIRE(g.y >= 0);
    REQUIRE(g.x + g.w <= 128);
    REQUIRE(g.y + g.h <= 128);
    if (i > 0) total_motion += center_distance(g, seq.frames[i - 1].gt);
  }
  REQUIRE(total_motion > 1.0);
}

TEST_CASE("synthetic generation validates its arguments") {
  REQUIRE_THROWS_AS(generate_synthetic_sequence(1, 1, 64), std::invalid_argument);
  REQUIRE_THROWS_AS(generate_synthetic_sequence(1, 5, 16), std::invalid_argument);
  REQUIRE_THROWS_AS(style_preset("nope"), std::invalid_argument);
}

TEST_CASE("dataset save/load round trip") {
  TempDir dir("ckd_test_dataset");
  std::vector<Sequence> seqs;
  seqs.push_back(generate_synthetic_sequence(11, 4, 64));
  seqs.push_back(generate_synthetic_sequence(12, 5, 64));
  save_dataset(seqs, dir.path.string());

  const auto back = load_dataset(dir.path.string());
  REQUIRE(back.size() == 2);
  for (size_t s = 0; s < 2; ++s) {
    REQUIRE(back[s].name == seqs[s].name);
    REQUIRE(back[s].frames.size() == seqs[s].frames.size());
    for (size_t i = 0; i < back[s].frames.size(); ++i) {
      const FramePair& orig = seqs[s].frames[i];
      const FramePair& got = back[s].frames[i];
      REQUIRE(got.rgb.c == 3);
      REQUIRE(got.tir.c == 1);
      REQUIRE(got.rgb.h == orig.rgb.h);
      // 8-bit quantization on pixels, text round trip on boxes.
      for (size_t p = 0; p < orig.rgb.pix.size(); p += 97)
        REQUIRE_THAT(got.rgb.pix[p],
                     Catch::Matchers::WithinAbs(orig.rgb.pix[p], 0.51f / 255.0f));
      REQUIRE_THAT(got.gt.x, Catch::Matchers::WithinAbs(orig.gt.x, 1e-3));
      REQUIRE_THAT(got.gt.y, Catch::Matchers::WithinAbs(orig.gt.y, 1e-3));
      REQUIRE_THAT(got.gt.w, Catch::Matchers::WithinAbs(orig.gt.w, 1e-3));
      REQUIRE_THAT(got.gt.h, Catch::Matchers::WithinAbs(orig.gt.h, 1e-3));
    }
  }
}

TEST_CASE("load_dataset rejects malformed sequences") {
  REQUIRE(load_dataset("/nonexistent/ckd/root").empty());

  TempDir dir("ckd_test_dataset_bad");
  SECTION("missing annotations") {
    fs::create_directories(dir.path / "seq" / "rgb");
    REQUIRE_THROWS_AS(load_dataset(dir.path.string()), std::runtime_error);
  }
  SECTION("frame/annotation count mismatch") {
    std::vector<Sequence> seqs{generate_synthetic_sequence(13, 3, 64)};
    save_dataset(seqs, dir.path.string());
    std::ofstream gt(dir.path / seqs[0].name / "groundtruth.txt", std::ios::app);
    gt << "1,1,2,2\n";
    gt.close();
    REQUIRE_THROWS_AS(load_dataset(dir.path.string()), std::runtime_error);
  }
  SECTION("unparseable annotation line") {
    std::vector<Sequence> seqs{generate_synthetic_sequence(13, 3, 64)};
    save_dataset(seqs, dir.path.string());
    std::ofstream gt(dir.path / seqs[0].name / "groundtruth.txt");
    gt << "1,1,2,2\nfoo,bar\n1,1,2,2\n";
    gt.close();
    REQUIRE_THROWS_AS(load_dataset(dir.path.string()), std::runtime_error);
  }
}

TEST_CASE("make_sample produces crops of the configured geometry") {
  const Sequence seq = generate_synthetic_sequence(21, 3, 128);
  const CropConfig cfg;
  const FrameSample s = make_sample(seq.frames[1], seq.frames[0], seq.frames[0].gt, cfg);
  REQUIRE(s.template_rgb.h == cfg.template_size);
  REQUIRE(s.template_rgb.w == cfg.template_size);
  REQUIRE(s.template_tir.c == 1);
  REQUIRE(s.search_rgb.h == cfg.search_size);
  REQUIRE(s.search_rgb.w == cfg.search_size);
  REQUIRE(s.search_tir.h == cfg.search_size);

  // The search crop is centered on the previous box.
  const BBox prev = seq.frames[0].gt;
  const BBox prev_in_crop = s.transform.invert(prev);
  REQUIRE_THAT(prev_in_crop.cx(), Catch::Matchers::WithinAbs(cfg.search_size / 2.0, 1e-9));
  REQUIRE_THAT(prev_in_crop.cy(), Catch::Matchers::WithinAbs(cfg.search_size / 2.0, 1e-9));
}

TEST_CASE("crop transform round-trips boxes") {
  const Sequence seq = generate_synthetic_sequence(22, 3, 128);
  Rng rng(31);
  const CropConfig cfg;
  for (int i = 0; i < 100; ++i) {
    const BBox prev{rng.uniform(10, 90), rng.uniform(10, 90), rng.uniform(8, 30),
                    rng.uniform(8, 30)};
    const FrameSample s = make_sample(seq.frames[1], seq.frames[0], prev, cfg);
    const BBox gt = seq.frames[1].gt;
    const BBox back = s.transform.apply(s.gt_in_search);
    REQUIRE_THAT(back.x, Catch::Matchers::WithinAbs(gt.x, 1e-6));
    REQUIRE_THAT(back.y, Catch::Matchers::WithinAbs(gt.y, 1e-6));
    REQUIRE_THAT(back.w, Catch::Matchers::WithinAbs(gt.w, 1e-6));
    REQUIRE_THAT(back.h, Catch::Matchers::WithinAbs(gt.h, 1e-6));
  }
}

TEST_CASE("make_sample rejects degenerate boxes") {
  const Sequence seq = generate_synthetic_sequence(23, 3, 64);
  const CropConfig cfg;
  REQUIRE_THROWS_AS(make_sample(seq.frames[1], seq.frames[0], BBox{5, 5, 0, 4}, cfg),
                    std::invalid_argument);
  Sequence bad = seq;
  bad.frames[0].gt = BBox{5, 5, 3, 0};
  REQUIRE_THROWS_AS(
      make_sample(bad.frames[1], bad.frames[0], BBox{5, 5, 4, 4}, cfg),
      std::invalid_argument);
}
