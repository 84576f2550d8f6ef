#include "dssm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dssm/ops.hpp"

namespace dssm {

namespace {
constexpr double kLn2 = 0.6931471805599453;
}

std::vector<ParamRef> collect_params(ModelF& model) {
  std::vector<ParamRef> out;
  model.named_tensors([&](const std::string& name, Tensor<float>& t, bool decay) {
    t.set_requires_grad(true);
    out.push_back(ParamRef{name, t, decay});
  });
  return out;
}

void AdamW::step(std::vector<ParamRef>& params, double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& p : params) {
    auto& slot = slots_[p.name];
    if (slot.first.size() != static_cast<size_t>(p.tensor.size())) {
      slot.first.assign(static_cast<size_t>(p.tensor.size()), 0.0f);
      slot.second.assign(static_cast<size_t>(p.tensor.size()), 0.0f);
    }
    float* w = p.tensor.data();
    float* g = p.tensor.grad();
    float* m = slot.first.data();
    float* v = slot.second.data();
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    for (int64_t i = 0; i < p.tensor.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      double mhat = static_cast<double>(m[i]) / bc1;
      double vhat = static_cast<double>(v[i]) / bc2;
      double upd = lr * mhat / (std::sqrt(vhat) + eps_);
      if (p.decay && weight_decay_ > 0) upd += lr * weight_decay_ * static_cast<double>(w[i]);
      w[i] = static_cast<float>(static_cast<double>(w[i]) - upd);
    }
  }
}

void AdamW::export_state(std::map<std::string, Tensor<float>>& out) const {
  for (const auto& [name, slot] : slots_) {
    Tensor<float> m(Shape{static_cast<int64_t>(slot.first.size())});
    Tensor<float> v(Shape{static_cast<int64_t>(slot.second.size())});
    std::memcpy(m.data(), slot.first.data(), sizeof(float) * slot.first.size());
    std::memcpy(v.data(), slot.second.data(), sizeof(float) * slot.second.size());
    out.emplace("adam.m." + name, std::move(m));
    out.emplace("adam.v." + name, std::move(v));
  }
  Tensor<float> t(Shape{1});
  t.data()[0] = static_cast<float>(t_);
  out.emplace("adam.t", std::move(t));
}

void AdamW::import_state(const std::map<std::string, Tensor<float>>& in) {
  slots_.clear();
  t_ = 0;
  auto it = in.find("adam.t");
  if (it != in.end()) t_ = static_cast<int64_t>(it->second.data()[0]);
  for (const auto& [key, tensor] : in) {
    if (key.rfind("adam.m.", 0) == 0) {
      auto& slot = slots_[key.substr(7)];
      slot.first.assign(tensor.data(), tensor.data() + tensor.size());
    } else if (key.rfind("adam.v.", 0) == 0) {
      auto& slot = slots_[key.substr(7)];
      slot.second.assign(tensor.data(), tensor.data() + tensor.size());
    }
  }
}

double lr_at_step(int64_t step, double peak, int64_t warmup_steps, int64_t total_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return peak;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  progress = std::min(1.0, std::max(0.0, progress));
  double floor = 0.1 * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

double clip_grad_norm(std::vector<ParamRef>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params) {
    const float* g = p.tensor.grad();
    for (int64_t i = 0; i < p.tensor.size(); ++i) sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    float scale = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      float* g = p.tensor.grad();
      for (int64_t i = 0; i < p.tensor.size(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

EvalResult evaluate_lm(ModelF& model, std::span<const uint8_t> bytes, int64_t max_len, ScanMode mode,
                       int64_t max_windows) {
  if (bytes.size() < 2) throw DataError("evaluate: split holds fewer than two bytes");
  EvalResult res;
  double total_nll = 0;
  int64_t positions = 0;
  int64_t n = static_cast<int64_t>(bytes.size());
  int64_t window = 0;
  // windows advance by max_len predicted positions and overlap by one byte,
  // so every byte after the first is scored exactly once
  for (int64_t start = 0; start + 1 < n; start += max_len) {
    if (max_windows > 0 && window >= max_windows) break;
    int64_t len = std::min(max_len + 1, n - start);
    std::vector<int32_t> tokens(static_cast<size_t>(len - 1));
    std::vector<int32_t> targets(static_cast<size_t>(len - 1));
    for (int64_t i = 0; i + 1 < len; ++i) {
      tokens[static_cast<size_t>(i)] = static_cast<int32_t>(bytes[static_cast<size_t>(start + i)]);
      targets[static_cast<size_t>(i)] = static_cast<int32_t>(bytes[static_cast<size_t>(start + i + 1)]);
    }
    ForwardOptions<float> opt;
    opt.mode = mode;
    Tensor<float> logits = model_forward(model, std::span<const int32_t>(tokens), nullptr, opt);
    int64_t v = logits.dim(1);
    for (int64_t t = 0; t < logits.dim(0); ++t) {
      const float* row = logits.data() + t * v;
      double mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      total_nll += std::log(z) + mx - static_cast<double>(row[targets[static_cast<size_t>(t)]]);
      ++positions;
    }
    ++window;
  }
  res.positions = positions;
  res.nll = total_nll / static_cast<double>(positions);
  res.ppl = std::exp(res.nll);
  res.bpb = res.nll / kLn2;
  return res;
}

namespace {

struct Sample {
  std::vector<int32_t> tokens, targets;
  std::vector<uint8_t> mask;  // empty = all positions
};

Sample lm_sample(const std::vector<uint8_t>& train, int64_t max_len, Rng& rng) {
  int64_t span = std::min<int64_t>(max_len, static_cast<int64_t>(train.size()) - 1);
  int64_t start = rng.uniform_int(0, static_cast<int64_t>(train.size()) - span - 1);
  Sample s;
  s.tokens.resize(static_cast<size_t>(span));
  s.targets.resize(static_cast<size_t>(span));
  for (int64_t i = 0; i < span; ++i) {
    s.tokens[static_cast<size_t>(i)] = static_cast<int32_t>(train[static_cast<size_t>(start + i)]);
    s.targets[static_cast<size_t>(i)] = static_cast<int32_t>(train[static_cast<size_t>(start + i + 1)]);
  }
  return s;
}

// prompt plus answer byte; the loss mask selects the answer position only
Sample needle_sample(const NeedleExample& ex, int64_t max_len) {
  if (static_cast<int64_t>(ex.prompt.size()) + 1 > max_len)
    throw DataError("needle training: prompt longer than train.max_seq_len");
  Sample s;
  for (unsigned char c : ex.prompt) s.tokens.push_back(static_cast<int32_t>(c));
  s.tokens.push_back(ex.answer_id);
  size_t l = s.tokens.size() - 1;  // predict each next token
  s.targets.assign(s.tokens.begin() + 1, s.tokens.end());
  s.tokens.pop_back();
  s.mask.assign(l, 0);
  s.mask[l - 1] = 1;  // answer label only
  return s;
}

}  // namespace

TrainResult train_loop(ModelF& model, const ModelConfig& mc, const TrainConfig& tc, const ByteCorpus& corpus,
                       uint64_t seed, std::ostream* console) {
  tc.validate();
  std::filesystem::create_directories(tc.out_dir);
  ScanMode mode = mc.scan_mode();

  std::vector<ParamRef> params = collect_params(model);
  AdamW opt(tc.weight_decay);
  Rng data_rng = Rng::seeded(seed).derive(0xda7a);
  Rng drop_rng = Rng::seeded(seed).derive(0xd409);

  std::vector<NeedleExample> needle_train;
  if (tc.objective == "needle") needle_train = load_needle_dataset(tc.needle_dataset);

  TrainResult result;
  result.log_path = tc.out_dir + "/train_log.csv";
  result.last_good_checkpoint = tc.out_dir + "/last_good.ckpt";
  result.final_checkpoint = tc.out_dir + "/final.ckpt";
  std::ofstream log(result.log_path, std::ios::binary);
  if (!log) throw DataError("train: cannot write log '" + result.log_path + "'");
  log << "step,split,loss,ppl,bpb,lr,elapsed_s\n";

  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto log_row = [&](int64_t step, const std::string& split, double loss, double lr) {
    log << step << "," << split << "," << fmt_double(loss, 9) << "," << fmt_double(std::exp(loss), 9) << ","
        << fmt_double(loss / kLn2, 9) << "," << fmt_double(lr, 9) << "," << fmt_double(elapsed(), 4) << "\n";
  };

  auto check_lambda_bounds = [&](int64_t step) {
    for (size_t i = 0; i < model.blocks.size(); ++i) {
      const DiffLambda<float>* lam = nullptr;
      if (model.blocks[i].ds6) lam = &model.blocks[i].ds6->lambda;
      if (model.blocks[i].dmamba) lam = &model.blocks[i].dmamba->lambda;
      if (!lam || lam->mode != LambdaMode::Simple || lam->forced) continue;
      double v = static_cast<double>(lambda_value(*lam));
      double lo = static_cast<double>(lam->lambda_init);
      if (!(v > lo && v < 1.0 + lo))
        throw NumericalError("train: lambda " + std::to_string(v) + " escaped (" + std::to_string(lo) + ", " +
                             std::to_string(1.0 + lo) + ") at layer " + std::to_string(i) + ", step " +
                             std::to_string(step));
    }
  };

  bool have_checkpoint = false;
  double smoothed_accum = 0;
  int64_t smoothed_count = 0;
  std::vector<double> recent;

  auto run_eval = [&](int64_t step, double lr) {
    if (tc.objective == "lm") {
      if (!corpus.valid.empty()) {
        EvalResult ev = evaluate_lm(model, corpus.valid, tc.max_seq_len, mode, tc.eval_max_windows);
        log_row(step, "valid", ev.nll, lr);
        result.report.metrics["valid.ppl"] = ev.ppl;
        result.report.metrics["valid.bpb"] = ev.bpb;
        result.report.metrics["valid.loss"] = ev.nll;
      }
      if (!corpus.test.empty()) {
        EvalResult ev = evaluate_lm(model, corpus.test, tc.max_seq_len, mode, tc.eval_max_windows);
        log_row(step, "test", ev.nll, lr);
        result.report.metrics["test.ppl"] = ev.ppl;
        result.report.metrics["test.bpb"] = ev.bpb;
        result.report.metrics["test.loss"] = ev.nll;
        if (result.initial_test_loss == 0) result.initial_test_loss = ev.nll;
        result.final_test_loss = ev.nll;
      }
    }
    CheckpointData ck = checkpoint_from_model(model, step, data_rng.state_string());
    std::map<std::string, Tensor<float>> opt_state;
    opt.export_state(opt_state);
    ck.opt_state = std::move(opt_state);
    save_checkpoint(result.last_good_checkpoint, ck);
    have_checkpoint = true;
  };

  run_eval(0, lr_at_step(0, tc.lr, tc.warmup_steps, tc.total_steps));

  for (int64_t step = 0; step < tc.total_steps; ++step) {
    double lr = lr_at_step(step, tc.lr, tc.warmup_steps, tc.total_steps);

    Tape<float> tape;
    Tensor<float> total_loss;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
      Sample s = tc.objective == "lm"
                     ? lm_sample(corpus.train, tc.max_seq_len, data_rng)
                     : needle_sample(needle_train[static_cast<size_t>(data_rng.uniform_int(
                                         0, static_cast<int64_t>(needle_train.size()) - 1))],
                                     tc.max_seq_len);
      ForwardOptions<float> opt_fwd;
      opt_fwd.mode = mode;
      opt_fwd.dropout = tc.dropout;
      opt_fwd.rng = &drop_rng;
      Tensor<float> logits = model_forward(model, std::span<const int32_t>(s.tokens), &tape, opt_fwd);
      Tensor<float> loss = cross_entropy(logits, std::span<const int32_t>(s.targets), &tape,
                                         std::span<const uint8_t>(s.mask));
      total_loss = (b == 0) ? loss : add(total_loss, loss, &tape);
    }
    Tensor<float> mean_loss = scale_const(total_loss, 1.0f / static_cast<float>(tc.batch_size), &tape);
    double loss_value = static_cast<double>(mean_loss.item());
    if (!std::isfinite(loss_value))
      throw NumericalError("train: loss is non-finite at step " + std::to_string(step) +
                           (have_checkpoint ? "; last good checkpoint: " + result.last_good_checkpoint
                                            : "; no checkpoint written yet"));

    tape.backward(mean_loss);
    clip_grad_norm(params, tc.grad_clip);
    opt.step(params, lr);
    for (auto& p : params) p.tensor.zero_grad();
    check_lambda_bounds(step);

    if (step == 0) result.first_train_loss = loss_value;
    recent.push_back(loss_value);
    if (recent.size() > 100) recent.erase(recent.begin());
    log_row(step + 1, "train", loss_value, lr);

    if ((step + 1) % tc.eval_interval == 0 || step + 1 == tc.total_steps) {
      run_eval(step + 1, lr);
      if (console)
        *console << "step " << (step + 1) << " loss " << fmt_double(loss_value) << " lr " << fmt_double(lr)
                 << "\n";
    }
  }

  smoothed_accum = 0;
  smoothed_count = 0;
  for (double v : recent) {
    smoothed_accum += v;
    ++smoothed_count;
  }
  result.final_smoothed_loss = smoothed_count ? smoothed_accum / static_cast<double>(smoothed_count) : 0;

  CheckpointData final_ck = checkpoint_from_model(model, tc.total_steps, data_rng.state_string());
  std::map<std::string, Tensor<float>> opt_state;
  opt.export_state(opt_state);
  final_ck.opt_state = std::move(opt_state);
  save_checkpoint(result.final_checkpoint, final_ck);

  result.report.model_name = mc.pattern;
  result.report.dataset = tc.dataset;
  result.report.n_layers = model.depth();
  result.report.param_count = model.param_count();
  result.report.metrics["final.train_loss"] = result.final_smoothed_loss;
  result.report.metrics["params"] = static_cast<double>(result.report.param_count);
  return result;
}

}  // namespace dssm
