// Line-based key=value configuration with [section] headers. Every field of
// every command's config is addressable as section.key; unknown keys are
// errors, and --set section.key=value overrides files from the command line.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dssm/model.hpp"

namespace dssm {

struct KvConfig {
  std::map<std::string, std::string> values;  // "section.key" -> raw text

  bool has(const std::string& key) const { return values.count(key) > 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key, std::vector<int64_t> fallback) const;
  std::vector<uint64_t> get_uint_list(const std::string& key, std::vector<uint64_t> fallback) const;
};

KvConfig parse_config_text(const std::string& text);
KvConfig parse_config_file(const std::string& path);
void apply_override(KvConfig& cfg, const std::string& expr);  // "section.key=value"

// [model]
struct ModelConfig {
  int64_t d_model = 64;
  int64_t depth = 2;
  int64_t vocab = 256;
  int64_t d_state = 8;
  int64_t conv_k = 4;
  int64_t heads = 0;  // 0 -> d_model/4
  int64_t expand = 2;
  std::string pattern = "mamba";  // mamba | diff-mamba | diff-s6 | alternating | comma list
  bool normalized = true;
  bool pre_sub_norm = true;
  bool post_sub_norm = true;
  std::string lambda_mode = "simple";
  bool scalar_lambda_bar = false;
  double lambda_init = -1.0;  // < 0 -> schedule
  std::string scan = "sequential";

  std::vector<BlockSpec> to_specs() const;
  ScanMode scan_mode() const { return scan_mode_by_name(scan); }
};

// [train]
struct TrainConfig {
  std::string dataset;
  double split_train = 0.8, split_valid = 0.1, split_test = 0.1;
  int64_t max_seq_len = 512;
  int64_t batch_size = 8;
  double lr = 1e-3;
  int64_t warmup_steps = 100;
  int64_t total_steps = 2000;
  double weight_decay = 0.1;
  double dropout = 0.0;
  std::vector<uint64_t> seeds{0};
  int64_t eval_interval = 200;
  int64_t eval_max_windows = 64;
  double grad_clip = 1.0;
  std::string out_dir = "out";
  std::string objective = "lm";  // lm | needle
  std::string needle_dataset;    // objective = needle
  std::string init_checkpoint;   // optional warm start

  void validate() const;
};

// [eval]
struct EvalConfig {
  std::string checkpoint;
  std::string split = "test";  // train | valid | test
  std::string mode = "lm";     // lm | needle
  std::string needle_dataset;
  std::string report_out;
  int64_t max_windows = 0;  // 0 = no cap
};

// [needle]
struct NeedleGenConfig {
  std::vector<int64_t> context_lengths{64, 128, 256, 512};
  int64_t count = 120;
  uint64_t seed = 0;
  std::string filler;
  std::string out = "needle.json";
};

// [lens]
struct LensConfig {
  std::string checkpoint;
  std::string text;  // held-out byte stream for probe training
  std::string out = "lens.bin";
  std::string lens;  // lens-eval: trained lens path
  std::string needle_dataset;
  std::string csv_out = "snr.csv";
  std::string report_out;
  int64_t steps = 150;
  double lr = 1e-3;
  int64_t positions = 512;
  int64_t window = 64;
  int64_t batch = 128;
  uint64_t seed = 0;
};

// [convert]
struct ConvertConfig {
  std::string source;
  std::string out = "converted.ckpt";
  int64_t layer_begin = 0;
  int64_t layer_end = 0;
};

// [dump]
struct DumpConfig {
  std::string checkpoint;  // empty -> fresh model from [model]
  int64_t layer = 0;
  int64_t channel = 0;
  int64_t length = 16;
  uint64_t seed = 0;
  std::string input;  // path to bytes; empty -> seeded random tokens
  std::string out_prefix = "operator";
  std::string target = "self";  // self | integer position
};

// [compare]
struct CompareConfig {
  std::string report_a, report_b;
  std::string out_prefix = "compare";
};

struct FullConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  NeedleGenConfig needle;
  LensConfig lens;
  ConvertConfig convert;
  DumpConfig dump;
  CompareConfig compare;
};

// Parses the whole tree and rejects unknown section.key names.
FullConfig load_full_config(const KvConfig& kv);

}  // namespace dssm
