#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ckd/ckd.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

void print_usage() {
  std::puts(
      "usage: ckd <command> [--config FILE] [--key value ...]\n"
      "\n"
      "commands:\n"
      "  train       optimize a model, write checkpoint + loss CSV + resolved config\n"
      "  eval        run one-pass evaluation, write metrics JSON\n"
      "  ablate      train/eval a variant grid, write comparison CSV\n"
      "  gap-report  per-layer modality statistics of a checkpoint, write CSV\n"
      "  synth       write a synthetic dataset to disk\n"
      "\n"
      "flag aliases: --seed --steps --batch --synthetic --variant --tau --elim\n"
      "              --keep-ratio --mask-ratio --data --out --ckpt --echo-gt\n"
      "              --variants --seeds\n"
      "\n"
      "config keys (defaults):");
  for (const auto& e : ckd::config_registry())
    std::printf("  %-24s %-10s %s\n", e.key, e.def[0] ? e.def : "\"\"", e.doc);
}

ckd::ConfigMap parse_args(int argc, char** argv, int start) {
  auto cfg = ckd::ConfigMap::defaults();
  // Config file first so command-line flags win regardless of order.
  for (int i = start; i < argc; ++i)
    if (std::strcmp(argv[i], "--config") == 0) {
      if (i + 1 >= argc) ckd::contract_error("missing value for --config");
      cfg.load_file(argv[i + 1]);
    }
  for (int i = start; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) ckd::contract_error("missing value for " + a);
      return argv[++i];
    };
    if (a == "--config") { ++i; continue; }
    if (a == "--synthetic") { cfg.set("data.synthetic", "true"); continue; }
    if (a == "--echo-gt") { cfg.set("eval.echo_gt", "true"); continue; }
    if (a == "--seed") { cfg.set("train.seed", value()); continue; }
    if (a == "--steps") { cfg.set("train.steps", value()); continue; }
    if (a == "--batch") { cfg.set("train.batch", value()); continue; }
    if (a == "--variant") { cfg.set("train.variant", value()); continue; }
    if (a == "--mask-ratio") { cfg.set("train.mask_ratio", value()); continue; }
    if (a == "--tau") { cfg.set("eval.tau", value()); continue; }
    if (a == "--elim") { cfg.set("elim.mode", value()); continue; }
    if (a == "--keep-ratio") { cfg.set("elim.keep_ratio", value()); continue; }
    if (a == "--data") { cfg.set("data.root", value()); continue; }
    if (a == "--out") { cfg.set("out.dir", value()); continue; }
    if (a == "--ckpt") { cfg.set("ckpt.path", value()); continue; }
    if (a == "--variants") { cfg.set("ablate.variants", value()); continue; }
    if (a == "--seeds") { cfg.set("ablate.seeds", value()); continue; }
    if (a.rfind("--", 0) == 0) { cfg.set(a.substr(2), value()); continue; }
    ckd::contract_error("unexpected argument: " + a);
  }
  return cfg;
}

// Fixed benchmark: sequence content depends only on the split index, never on
// the training seed, so seeds compare model runs on identical data.
std::vector<ckd::Sequence> synthetic_split(const ckd::RunConfig& r, bool test) {
  const auto style = ckd::style_preset(r.style);
  std::vector<ckd::Sequence> out;
  const int count = test ? r.synthetic_test : r.synthetic_train;
  const std::uint64_t base = test ? 9000 : 1000;
  for (int i = 0; i < count; ++i)
    out.push_back(ckd::generate_synthetic_sequence(
        base + static_cast<std::uint64_t>(i), r.synthetic_length,
        r.synthetic_canvas, style));
  return out;
}

std::vector<ckd::Sequence> load_split(const ckd::RunConfig& r, bool test) {
  if (r.synthetic) return synthetic_split(r, test);
  if (r.data_root.empty())
    ckd::contract_error("no data: set data.root or pass --synthetic");
  auto data = ckd::load_dataset(r.data_root);
  if (data.empty()) ckd::data_error("no sequences found under " + r.data_root);
  return data;
}

std::string fmt_csv(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_loss_csv(const std::vector<ckd::LossBreakdown>& rows,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) ckd::data_error("cannot open for writing: " + path);
  out << "step,task,cd,sd,total\n";
  for (size_t i = 0; i < rows.size(); ++i)
    out << i << ',' << fmt_csv(rows[i].task) << ',' << fmt_csv(rows[i].cd) << ','
        << fmt_csv(rows[i].sd) << ',' << fmt_csv(rows[i].total) << '\n';
  if (!out) ckd::data_error("write failed: " + path);
}

struct TrainArtifacts {
  ckd::FourBranchModel<Scalar> model;
  std::vector<ckd::LossBreakdown> losses;
};

TrainArtifacts run_training(const ckd::RunConfig& r,
                            const std::vector<ckd::Sequence>& data) {
  auto model = ckd::init_model<Scalar>(r.model, r.crop.template_size,
                                       r.crop.search_size, r.train.seed);
  ckd::Trainer<Scalar> trainer(std::move(model), r.train);
  trainer.crop = r.crop;
  std::vector<ckd::LossBreakdown> losses;
  losses.reserve(static_cast<size_t>(r.train.steps));
  for (int s = 0; s < r.train.steps; ++s) losses.push_back(trainer.step(data));
  return {std::move(trainer.model), std::move(losses)};
}

std::vector<ckd::OpeResult> evaluate_model(const ckd::FourBranchModel<Scalar>& model,
                                           const std::vector<ckd::Sequence>& data,
                                           const ckd::EliminationConfig& elim) {
  std::vector<ckd::OpeResult> out;
  for (const auto& seq : data) out.push_back(ckd::run_ope(model, seq, elim));
  return out;
}

int cmd_train(const ckd::ConfigMap& cfg) {
  const auto r = ckd::build_run_config(cfg);
  fs::create_directories(r.out_dir);
  cfg.save_file(r.out_dir + "/config.resolved");
  const auto data = load_split(r, false);
  auto art = run_training(r, data);
  write_loss_csv(art.losses, r.out_dir + "/loss.csv");
  ckd::save_checkpoint(art.model, r.out_dir + "/ckpt.bin");
  std::printf("trained %d steps (variant %s), final total loss %.6g\n", r.train.steps,
              r.train.variant.c_str(), art.losses.back().total);
  std::printf("wrote %s/loss.csv, %s/ckpt.bin, %s/config.resolved\n",
              r.out_dir.c_str(), r.out_dir.c_str(), r.out_dir.c_str());
  return 0;
}

int cmd_eval(const ckd::ConfigMap& cfg) {
  const auto r = ckd::build_run_config(cfg);
  fs::create_directories(r.out_dir);
  const auto data = load_split(r, true);
  std::vector<ckd::OpeResult> results;
  if (r.echo_gt) {
    for (const auto& seq : data) {
      ckd::OpeResult res;
      res.name = seq.name;
      for (const auto& f : seq.frames) {
        res.boxes.push_back(f.gt);
        res.frame_ms.push_back(0.0);
      }
      results.push_back(std::move(res));
    }
  } else {
    if (r.ckpt_path.empty()) ckd::contract_error("eval needs --ckpt (or --echo-gt)");
    const auto model = ckd::load_checkpoint<Scalar>(r.ckpt_path);
    results = evaluate_model(model, data, r.elim);
  }
  const auto rep = ckd::aggregate_metrics(results, data, r.tau);
  const auto j = ckd::metric_report_json(rep);
  std::ofstream out(r.out_dir + "/metrics.json");
  out << j.dump(2) << '\n';
  if (!out) ckd::data_error("write failed: " + r.out_dir + "/metrics.json");
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_ablate(const ckd::ConfigMap& cfg) {
  const auto base = ckd::build_run_config(cfg);
  fs::create_directories(base.out_dir);
  std::vector<std::string> variants;
  {
    std::istringstream ss(base.ablate_variants);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) variants.push_back(tok);
  }
  if (variants.empty()) ckd::contract_error("ablate: empty variant list");

  std::ofstream out(base.out_dir + "/ablation.csv");
  if (!out) ckd::data_error("cannot open for writing: " + base.out_dir + "/ablation.csv");
  out << "variant,seed,pr,npr,sr,final_cd,final_sd\n";
  const auto test = load_split(base, true);
  const auto train_data = load_split(base, false);
  for (const auto& v : variants) {
    // "name@P" trains with mask ratio P percent.
    std::string name = v;
    double mask_ratio = base.train.mask_ratio;
    if (const auto at = v.find('@'); at != std::string::npos) {
      name = v.substr(0, at);
      mask_ratio = std::stod(v.substr(at + 1)) / 100.0;
    }
    const ckd::Variant var = ckd::parse_variant(name);
    for (int seed = 0; seed < base.ablate_seeds; ++seed) {
      ckd::RunConfig r = base;
      r.train.variant = name;
      r.train.mask_ratio = mask_ratio;
      r.train.seed = static_cast<std::uint64_t>(seed);
      auto art = run_training(r, train_data);
      const auto rep = ckd::aggregate_metrics(
          evaluate_model(art.model, test, r.elim), test, r.tau);
      const auto& last = art.losses.back();
      out << v << ',' << seed << ',' << fmt_csv(rep.pr) << ',' << fmt_csv(rep.npr)
          << ',' << fmt_csv(rep.sr) << ','
          << ((var.cd || var.fd) ? fmt_csv(last.cd) : std::string()) << ','
          << (var.sd ? fmt_csv(last.sd) : std::string()) << '\n';
      std::printf("ablate %s seed %d: pr %.4f npr %.4f sr %.4f\n", v.c_str(), seed,
                  rep.pr, rep.npr, rep.sr);
    }
  }
  if (!out) ckd::data_error("write failed: " + base.out_dir + "/ablation.csv");
  std::printf("wrote %s/ablation.csv\n", base.out_dir.c_str());
  return 0;
}

int cmd_gap_report(const ckd::ConfigMap& cfg) {
  const auto r = ckd::build_run_config(cfg);
  fs::create_directories(r.out_dir);
  if (r.ckpt_path.empty()) ckd::contract_error("gap-report needs --ckpt");
  const auto model = ckd::load_checkpoint<Scalar>(r.ckpt_path);
  const auto data = load_split(r, true);
  ckd::CropConfig crop = r.crop;
  crop.template_size = model.template_size;
  crop.search_size = model.search_size;
  ckd::Rng rng(r.train.seed ^ 0x6761705full);
  std::vector<ckd::FrameSample> samples;
  for (int i = 0; i < 4 * r.train.batch; ++i)
    samples.push_back(ckd::sample_training_pair<Scalar>(data, crop, rng));
  const auto rep = ckd::gap_report(model, samples);
  ckd::write_gap_csv(rep, r.out_dir + "/gap.csv");
  std::printf("mean style distance %.9g over %d layers; wrote %s/gap.csv\n",
              rep.mean_style_distance, model.cfg.layers, r.out_dir.c_str());
  return 0;
}

int cmd_synth(const ckd::ConfigMap& cfg) {
  const auto r = ckd::build_run_config(cfg);
  ckd::RunConfig rr = r;
  rr.synthetic = true;
  ckd::save_dataset(synthetic_split(rr, false), r.out_dir + "/train");
  ckd::save_dataset(synthetic_split(rr, true), r.out_dir + "/test");
  std::printf("wrote %d train and %d test sequences under %s\n", r.synthetic_train,
              r.synthetic_test, r.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2 || std::strcmp(argv[1], "--help") == 0 ||
      std::strcmp(argv[1], "help") == 0) {
    print_usage();
    return argc < 2 ? 1 : 0;
  }
  const std::string cmd = argv[1];
  try {
    const auto cfg = parse_args(argc, argv, 2);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "eval") return cmd_eval(cfg);
    if (cmd == "ablate") return cmd_ablate(cfg);
    if (cmd == "gap-report") return cmd_gap_report(cfg);
    if (cmd == "synth") return cmd_synth(cfg);
    ckd::contract_error("unknown command: " + cmd);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
}
