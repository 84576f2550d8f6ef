// Optimization loop: AdamW with decoupled weight decay (norm gains, lambda
// parameters, and biases take pure Adam steps), linear warmup with cosine
// decay to 10% of peak, global-norm gradient clipping, per-step CSV logging,
// periodic evaluation and checkpointing, and non-finite-loss abort.

#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dssm/checkpoint.hpp"
#include "dssm/config.hpp"
#include "dssm/corpus.hpp"
#include "dssm/needle.hpp"
#include "dssm/report.hpp"

namespace dssm {

struct ParamRef {
  std::string name;
  Tensor<float> tensor;
  bool decay = false;
};

std::vector<ParamRef> collect_params(ModelF& model);

class AdamW {
 public:
  explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<ParamRef>& params, double lr);
  int64_t steps_taken() const { return t_; }

  void export_state(std::map<std::string, Tensor<float>>& out) const;
  void import_state(const std::map<std::string, Tensor<float>>& in);

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> slots_;
};

// Linear warmup to peak, then cosine decay to 10% of peak at total_steps.
double lr_at_step(int64_t step, double peak, int64_t warmup_steps, int64_t total_steps);

// Scales all gradients so their global norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(std::vector<ParamRef>& params, double max_norm);

struct EvalResult {
  double nll = 0, ppl = 0, bpb = 0;
  int64_t positions = 0;
};

// Non-overlapping next-byte windows tiling the split exactly once; every byte
// after the first is predicted exactly once. max_windows = 0 means no cap.
EvalResult evaluate_lm(ModelF& model, std::span<const uint8_t> bytes, int64_t max_len, ScanMode mode,
                       int64_t max_windows = 0);

struct TrainResult {
  RunReport report;
  std::string final_checkpoint;
  std::string last_good_checkpoint;
  std::string log_path;
  double first_train_loss = 0;
  double final_smoothed_loss = 0;  // mean train loss over the last 100 steps
  double initial_test_loss = 0;
  double final_test_loss = 0;
};

TrainResult train_loop(ModelF& model, const ModelConfig& mc, const TrainConfig& tc, const ByteCorpus& corpus,
                       uint64_t seed, std::ostream* console = nullptr);

}  // namespace dssm
