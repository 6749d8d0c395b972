#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ckd/elimination.hpp"
#include "ckd/train.hpp"

namespace ckd {

// Flat key-value configuration with dotted namespaces. Every key carries a
// documented default; unknown keys are rejected so typos fail loudly.
struct ConfigEntry {
  const char* key;
  const char* def;
  const char* doc;
};

inline const std::vector<ConfigEntry>& config_registry() {
  static const std::vector<ConfigEntry> entries = {
      {"model.layers", "4", "encoder blocks per branch"},
      {"model.channels", "64", "token width"},
      {"model.heads", "4", "attention heads"},
      {"model.patch", "8", "patch side in pixels"},
      {"crop.template_size", "32", "template crop side"},
      {"crop.search_size", "64", "search crop side"},
      {"crop.template_factor", "2.0", "template context factor"},
      {"crop.search_factor", "4.0", "search context factor"},
      {"train.steps", "2000", "optimization steps"},
      {"train.batch", "4", "samples per step"},
      {"train.seed", "0", "rng seed"},
      {"train.mask_ratio", "0.25", "fraction of student search tokens masked"},
      {"train.lambda_cd", "1.0", "content distillation weight"},
      {"train.lambda_sd", "2.0", "style distillation weight (2x lambda_cd)"},
      {"train.lr_backbone", "0.0005", "backbone learning rate"},
      {"train.lr_head", "0.005", "head learning rate (10x backbone)"},
      {"train.weight_decay", "0.0001", "decoupled weight decay"},
      {"train.variant", "ckd",
       "one of baseline|sd|sd_cd|sd_cd_mm|ckd|in|fd"},
      {"elim.mode", "none", "token elimination: none|ce|mce"},
      {"elim.keep_ratio", "0.7", "fraction of search tokens kept"},
      {"elim.layers", "auto", "comma-separated 1-based layers, auto = L/2"},
      {"eval.tau", "20", "precision threshold in pixels (5 for small objects)"},
      {"eval.echo_gt", "false", "report ground truth as predictions (test hook)"},
      {"data.root", "", "dataset directory; empty requires data.synthetic"},
      {"data.synthetic", "false", "generate sequences instead of loading"},
      {"data.synthetic_train", "20", "synthetic training sequences"},
      {"data.synthetic_test", "5", "synthetic held-out sequences"},
      {"data.synthetic_length", "30", "frames per synthetic sequence"},
      {"data.synthetic_canvas", "128", "synthetic frame side"},
      {"data.style", "default", "synthetic style preset: default|static|lowgap"},
      {"ablate.variants", "baseline,ckd", "comma-separated variant list"},
      {"ablate.seeds", "3", "seeds per variant"},
      {"ckpt.path", "", "checkpoint to load"},
      {"out.dir", "out", "output directory"},
  };
  return entries;
}

class ConfigMap {
 public:
  static ConfigMap defaults() {
    ConfigMap c;
    for (const auto& e : config_registry()) c.kv_[e.key] = e.def;
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = kv_.find(key);
    if (it == kv_.end()) contract_error("unknown config key: " + key);
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) contract_error("unknown config key: " + key);
    return it->second;
  }

  int get_int(const std::string& key) const {
    try {
      size_t pos = 0;
      const int v = std::stoi(get(key), &pos);
      if (pos != get(key).size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      contract_error("config key " + key + " expects an integer, got '" + get(key) + "'");
    }
  }

  double get_double(const std::string& key) const {
    try {
      size_t pos = 0;
      const double v = std::stod(get(key), &pos);
      if (pos != get(key).size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      contract_error("config key " + key + " expects a number, got '" + get(key) + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    contract_error("config key " + key + " expects true/false, got '" + v + "'");
  }

  std::uint64_t get_u64(const std::string& key) const {
    try {
      size_t pos = 0;
      const auto v = std::stoull(get(key), &pos);
      if (pos != get(key).size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      contract_error("config key " + key + " expects an unsigned integer, got '" +
                     get(key) + "'");
    }
  }

  // Lines of "key value" or "key = value"; '#' starts a comment.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) data_error("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ss(line);
      std::string key, value, eq;
      if (!(ss >> key)) continue;
      if (!(ss >> value)) value.clear();
      if (value == "=" && !(ss >> value)) value.clear();
      std::string extra;
      if (ss >> extra)
        data_error("config: trailing tokens at " + path + ":" + std::to_string(lineno));
      set(key, value);
    }
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) data_error("config: cannot open for writing: " + path);
    for (const auto& [k, v] : kv_) out << k << ' ' << v << '\n';
    if (!out) data_error("config: write failed: " + path);
  }

 private:
  std::map<std::string, std::string> kv_;
};

// Structured view over the ConfigMap, validated on construction.
struct RunConfig {
  ModelConfig model;
  CropConfig crop;
  TrainConfig train;
  EliminationConfig elim;
  double tau = 20.0;
  bool echo_gt = false;
  std::string data_root;
  bool synthetic = false;
  int synthetic_train = 20, synthetic_test = 5;
  int synthetic_length = 30, synthetic_canvas = 128;
  std::string style = "default";
  std::string ablate_variants = "baseline,ckd";
  int ablate_seeds = 3;
  std::string ckpt_path;
  std::string out_dir = "out";
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      size_t pos = 0;
      out.push_back(std::stoi(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      contract_error("expected a comma-separated integer list, got '" + s + "'");
    }
  }
  return out;
}

inline RunConfig build_run_config(const ConfigMap& c) {
  RunConfig r;
  r.model.layers = c.get_int("model.layers");
  r.model.channels = c.get_int("model.channels");
  r.model.heads = c.get_int("model.heads");
  r.model.patch = c.get_int("model.patch");
  r.model.validate();

  r.crop.template_size = c.get_int("crop.template_size");
  r.crop.search_size = c.get_int("crop.search_size");
  r.crop.template_factor = c.get_double("crop.template_factor");
  r.crop.search_factor = c.get_double("crop.search_factor");

  r.train.steps = c.get_int("train.steps");
  r.train.batch = c.get_int("train.batch");
  r.train.seed = c.get_u64("train.seed");
  r.train.mask_ratio = c.get_double("train.mask_ratio");
  r.train.lambda_cd = c.get_double("train.lambda_cd");
  r.train.lambda_sd = c.get_double("train.lambda_sd");
  r.train.lr_backbone = c.get_double("train.lr_backbone");
  r.train.lr_head = c.get_double("train.lr_head");
  r.train.weight_decay = c.get_double("train.weight_decay");
  r.train.variant = c.get("train.variant");
  r.train.validate();
  parse_variant(r.train.variant);

  r.elim.mode = parse_elim_mode(c.get("elim.mode"));
  r.elim.keep_ratio = c.get_double("elim.keep_ratio");
  const std::string layers = c.get("elim.layers");
  r.elim.layers = layers == "auto" ? std::vector<int>{r.model.layers / 2}
                                   : parse_int_list(layers);
  r.elim.validate(r.model.layers);

  r.tau = c.get_double("eval.tau");
  r.echo_gt = c.get_bool("eval.echo_gt");
  r.data_root = c.get("data.root");
  r.synthetic = c.get_bool("data.synthetic");
  r.synthetic_train = c.get_int("data.synthetic_train");
  r.synthetic_test = c.get_int("data.synthetic_test");
  r.synthetic_length = c.get_int("data.synthetic_length");
  r.synthetic_canvas = c.get_int("data.synthetic_canvas");
  r.style = c.get("data.style");
  r.ablate_variants = c.get("ablate.variants");
  r.ablate_seeds = c.get_int("ablate.seeds");
  r.ckpt_path = c.get("ckpt.path");
  r.out_dir = c.get("out.dir");
  return r;
}

}  // namespace ckd
