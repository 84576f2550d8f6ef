// Synthetic single-fact retrieval task. Each example plants one needle
// sentence holding a designated answer byte inside filler text and asks for
// it back; prompts follow the exact template
//   <context>{input}</context>Question:{question} Answer:
// and the answer token appears exactly once inside the context.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dssm/checkpoint.hpp"
#include "dssm/config.hpp"
#include "dssm/report.hpp"

namespace dssm {

struct NeedleExample {
  std::string prompt;          // full prompt text, answer not included
  int32_t answer_id = 0;       // byte value of the answer token
  int64_t answer_pos = 0;      // position the answer token would occupy (= prompt size)
  int64_t context_len = 0;     // bytes inside <context>...</context>
  std::string position_class;  // begin | middle | end
};

// Deterministic given cfg.seed; needle positions are assigned round-robin
// across {begin, middle, end} and context lengths, so per-stratum counts
// differ by at most one.
std::vector<NeedleExample> generate_needle_dataset(const NeedleGenConfig& cfg,
                                                   std::span<const uint8_t> filler);

void save_needle_dataset(const std::string& path, const std::vector<NeedleExample>& data);
std::vector<NeedleExample> load_needle_dataset(const std::string& path);

// Greedy retrieval accuracy per (position stratum x context length) cell,
// plus the mean answer probability, written into a RunReport grid.
RunReport evaluate_needle(ModelF& model, const std::vector<NeedleExample>& data, ScanMode mode,
                          const std::string& model_name);

}  // namespace dssm
