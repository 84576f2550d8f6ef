// Structured run records: losses, perplexity and bits-per-byte, parameter
// counts, retrieval grids, and per-layer probe curves. Serialized as JSON,
// with plot-ready CSV emitters and the win-ratio comparison table.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dssm {

// Fixed-format double printing so emitted files are byte-stable across runs.
std::string fmt_double(double v, int precision = 6);

struct RunReport {
  std::string model_name;
  std::string dataset;
  int64_t n_layers = 0;
  int64_t param_count = 0;
  std::map<std::string, double> metrics;  // e.g. "test.ppl", "valid.bpb", "final.loss"

  struct GridCell {
    std::string task;  // needle position stratum
    int64_t context_len = 0;
    double score = 0;  // retrieval accuracy in [0,1]
  };
  std::vector<GridCell> grid;

  struct SnrPoint {
    int64_t layer = 0;
    double mean_prob = 0;
    double sem = 0;
  };
  std::vector<SnrPoint> snr;

  std::string note;

  std::string to_json_string() const;
  static RunReport from_json_string(const std::string& text);
  void save(const std::string& path) const;
  static RunReport load(const std::string& path);
};

// Final-performance table: model, dataset, layers, params, ppl, bpb.
void print_summary_table(std::ostream& os, const std::vector<RunReport>& reports,
                         const std::string& metric_prefix = "test");

struct WinRatioCell {
  std::string task;
  int64_t context_len = 0;
  double score_a = 0, score_b = 0;
  std::optional<double> ratio;  // empty = infinite-win sentinel
  char winner = 't';            // 'a', 'b', or 't' for tie
};

struct WinRatioTable {
  std::vector<WinRatioCell> cells;
  std::string name_a, name_b;
};

// Cell value: score_a/score_b when a wins, else -score_b/score_a. A zero
// loser with a nonzero winner becomes the infinite-win sentinel.
WinRatioTable win_ratio_table(const RunReport& a, const RunReport& b);

void write_win_ratio_csv(std::ostream& os, const WinRatioTable& t);
std::string win_ratio_json(const WinRatioTable& t);

}  // namespace dssm
