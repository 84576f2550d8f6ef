#include "dssm/lens.hpp"

#include <cstring>
#include <fstream>
#include <ostream>

#include "dssm/ops.hpp"
#include "dssm/train.hpp"

namespace dssm {

namespace {

// forward a window, returning per-layer residual taps and final log-probs
struct WindowActivations {
  std::vector<Tensor<float>> taps;  // depth entries, each [L, D]
  Tensor<float> logp;               // [L, V]
};

WindowActivations collect_window(ModelF& model, std::span<const int32_t> tokens, ScanMode mode) {
  WindowActivations wa;
  ForwardOptions<float> opt;
  opt.mode = mode;
  opt.layer_taps = &wa.taps;
  Tensor<float> logits = model_forward(model, tokens, nullptr, opt);
  int64_t l = logits.dim(0), v = logits.dim(1);
  wa.logp = Tensor<float>(Shape{l, v});
  for (int64_t t = 0; t < l; ++t) {
    const float* row = logits.data() + t * v;
    float mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    float lse = mx + static_cast<float>(std::log(z));
    for (int64_t j = 0; j < v; ++j) wa.logp.data()[t * v + j] = row[j] - lse;
  }
  return wa;
}

Tensor<float> probe_logits(ModelF& model, const LensProbe& probe, const Tensor<float>& h, Tape<float>* tape) {
  Tensor<float> a = linear(h, probe.w, tape, &probe.b);
  Tensor<float> n = rmsnorm(a, model.final_norm_gain, model.norm_eps, tape);
  return linear(n, model.unembed, tape);
}

}  // namespace

LensSet train_lens(ModelF& model, std::span<const uint8_t> text, const LensConfig& cfg, ScanMode mode) {
  int64_t depth = model.depth();
  int64_t d = model.d_model;
  int64_t window = std::max<int64_t>(2, cfg.window);
  if (static_cast<int64_t>(text.size()) < window + 1) throw DataError("lens: text stream shorter than one window");

  LensSet lens;
  lens.d_model = d;
  lens.model_hash = model_hash(model);
  for (int64_t l = 0; l < depth; ++l) {
    LensProbe p;
    p.w = Tensor<float>(Shape{d, d});
    for (int64_t i = 0; i < d; ++i) p.w.data()[i * d + i] = 1.0f;
    p.b = Tensor<float>(Shape{d});
    lens.probes.push_back(std::move(p));
  }
  if (depth == 0) return lens;

  // gather activations once; the model stays frozen
  Rng rng = Rng::seeded(cfg.seed);
  int64_t positions = std::max<int64_t>(1, cfg.positions);
  int64_t windows = (positions + window - 1) / window;
  std::vector<Tensor<float>> layer_rows(static_cast<size_t>(depth));
  for (auto& t : layer_rows) t = Tensor<float>(Shape{windows * window, d});
  Tensor<float> target_logp(Shape{windows * window, static_cast<int64_t>(model.vocab)});
  int64_t row = 0;
  for (int64_t w = 0; w < windows; ++w) {
    int64_t start = rng.uniform_int(0, static_cast<int64_t>(text.size()) - window - 1);
    std::vector<int32_t> tokens;
    tokens.reserve(static_cast<size_t>(window));
    for (int64_t i = 0; i < window; ++i) tokens.push_back(static_cast<int32_t>(text[static_cast<size_t>(start + i)]));
    auto wa = collect_window(model, std::span<const int32_t>(tokens), mode);
    for (int64_t t = 0; t < window; ++t) {
      for (int64_t l = 0; l < depth; ++l)
        std::memcpy(layer_rows[static_cast<size_t>(l)].data() + (row + t) * d,
                    wa.taps[static_cast<size_t>(l)].data() + t * d, sizeof(float) * static_cast<size_t>(d));
      std::memcpy(target_logp.data() + (row + t) * model.vocab, wa.logp.data() + t * model.vocab,
                  sizeof(float) * static_cast<size_t>(model.vocab));
    }
    row += window;
  }
  int64_t total_rows = row;
  Tensor<float> target_probs(target_logp.shape());
  for (int64_t i = 0; i < target_logp.size(); ++i) target_probs.data()[i] = std::exp(target_logp.data()[i]);

  // per-layer probe training; probes are independent
  lens.final_kl.assign(static_cast<size_t>(depth), 0.0);
  int64_t batch = std::min<int64_t>(std::max<int64_t>(1, cfg.batch), total_rows);
  for (int64_t l = 0; l < depth; ++l) {
    LensProbe& probe = lens.probes[static_cast<size_t>(l)];
    if (l == depth - 1) continue;  // the identity probe on the last layer IS the head
    probe.w.set_requires_grad(true);
    probe.b.set_requires_grad(true);
    std::vector<ParamRef> params{{"lens.w", probe.w, false}, {"lens.b", probe.b, false}};
    AdamW opt(0.0);
    Rng lrng = Rng::seeded(cfg.seed).derive(0x1e05 + static_cast<uint64_t>(l));

    double initial_loss = -1;
    for (int64_t step = 0; step < cfg.steps; ++step) {
      // deterministic minibatch of activation rows
      Tensor<float> h(Shape{batch, d}), tp(Shape{batch, static_cast<int64_t>(model.vocab)}),
          tl(Shape{batch, static_cast<int64_t>(model.vocab)});
      for (int64_t bi = 0; bi < batch; ++bi) {
        int64_t r = lrng.uniform_int(0, total_rows - 1);
        std::memcpy(h.data() + bi * d, layer_rows[static_cast<size_t>(l)].data() + r * d,
                    sizeof(float) * static_cast<size_t>(d));
        std::memcpy(tp.data() + bi * model.vocab, target_probs.data() + r * model.vocab,
                    sizeof(float) * static_cast<size_t>(model.vocab));
        std::memcpy(tl.data() + bi * model.vocab, target_logp.data() + r * model.vocab,
                    sizeof(float) * static_cast<size_t>(model.vocab));
      }
      Tape<float> tape;
      Tensor<float> logits = probe_logits(model, probe, h, &tape);
      Tensor<float> loss = kl_from_logits(tp, tl, logits, &tape);
      double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericalError("lens: non-finite loss at layer " + std::to_string(l));
      if (initial_loss < 0) initial_loss = lv;
      // the x10 rule only fires above an absolute floor, so near-zero initial
      // losses do not trip it on benign optimizer noise
      if (lv > initial_loss * 10.0 && lv > 1e-2)
        throw NumericalError("lens: probe training diverged at layer " + std::to_string(l));
      tape.backward(loss);
      opt.step(params, cfg.lr);
      for (auto& pr : params) pr.tensor.zero_grad();
      lens.final_kl[static_cast<size_t>(l)] = lv;
    }
  }
  return lens;
}

// lens container: magic, model hash, dims, then per-probe blobs
void save_lens(const std::string& path, const LensSet& lens) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("lens: cannot write '" + path + "'");
  const char magic[8] = {'D', 'I', 'F', 'F', 'L', 'N', 'S', '1'};
  out.write(magic, 8);
  uint64_t h = lens.model_hash;
  int64_t d = lens.d_model, n = static_cast<int64_t>(lens.probes.size());
  out.write(reinterpret_cast<const char*>(&h), 8);
  out.write(reinterpret_cast<const char*>(&d), 8);
  out.write(reinterpret_cast<const char*>(&n), 8);
  for (const auto& p : lens.probes) {
    out.write(reinterpret_cast<const char*>(p.w.data()), sizeof(float) * static_cast<size_t>(p.w.size()));
    out.write(reinterpret_cast<const char*>(p.b.data()), sizeof(float) * static_cast<size_t>(p.b.size()));
  }
  if (!out) throw DataError("lens: write failed for '" + path + "'");
}

LensSet load_lens(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("lens: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "DIFFLNS1", 8) != 0) throw IntegrityError("lens: bad magic");
  LensSet lens;
  int64_t n = 0;
  in.read(reinterpret_cast<char*>(&lens.model_hash), 8);
  in.read(reinterpret_cast<char*>(&lens.d_model), 8);
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || n < 0 || lens.d_model <= 0) throw IntegrityError("lens: corrupt header");
  for (int64_t i = 0; i < n; ++i) {
    LensProbe p;
    p.w = Tensor<float>(Shape{lens.d_model, lens.d_model});
    p.b = Tensor<float>(Shape{lens.d_model});
    in.read(reinterpret_cast<char*>(p.w.data()), sizeof(float) * static_cast<size_t>(p.w.size()));
    in.read(reinterpret_cast<char*>(p.b.data()), sizeof(float) * static_cast<size_t>(p.b.size()));
    if (!in) throw IntegrityError("lens: truncated probe table");
    lens.probes.push_back(std::move(p));
  }
  return lens;
}

std::vector<float> probe_distribution(ModelF& model, const LensProbe& probe, const Tensor<float>& h_row) {
  Tensor<float> logits = probe_logits(model, probe, h_row, nullptr);
  int64_t v = logits.size();
  std::vector<float> p(static_cast<size_t>(v));
  float mx = logits.data()[0];
  for (int64_t j = 1; j < v; ++j) mx = std::max(mx, logits.data()[j]);
  double z = 0;
  for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(logits.data()[j] - mx));
  for (int64_t j = 0; j < v; ++j)
    p[static_cast<size_t>(j)] = static_cast<float>(std::exp(static_cast<double>(logits.data()[j] - mx)) / z);
  return p;
}

double lens_kl_to_head(ModelF& model, const LensProbe& probe, int64_t layer, std::span<const uint8_t> text,
                       int64_t window, ScanMode mode) {
  std::vector<int32_t> tokens;
  for (int64_t i = 0; i < window && i < static_cast<int64_t>(text.size()); ++i)
    tokens.push_back(static_cast<int32_t>(text[static_cast<size_t>(i)]));
  auto wa = collect_window(model, std::span<const int32_t>(tokens), mode);
  const Tensor<float>& h = wa.taps.at(static_cast<size_t>(layer));
  int64_t l = h.dim(0), v = model.vocab;
  double total = 0;
  for (int64_t t = 0; t < l; ++t) {
    Tensor<float> row(Shape{1, model.d_model});
    std::memcpy(row.data(), h.data() + t * model.d_model, sizeof(float) * static_cast<size_t>(model.d_model));
    auto q = probe_distribution(model, probe, row);
    for (int64_t j = 0; j < v; ++j) {
      double p = std::exp(static_cast<double>(wa.logp.data()[t * v + j]));
      if (p > 0) total += p * (static_cast<double>(wa.logp.data()[t * v + j]) - std::log(std::max(1e-30, static_cast<double>(q[static_cast<size_t>(j)]))));
    }
  }
  return total / static_cast<double>(l);
}

std::vector<SnrPointRaw> needle_snr(ModelF& model, const LensSet& lens, const std::vector<NeedleExample>& data,
                                    ScanMode mode) {
  if (lens.model_hash != model_hash(model))
    throw DataError("needle_snr: lens was trained for a different model (hash mismatch)");
  if (data.empty()) throw DataError("needle_snr: empty dataset");
  int64_t depth = model.depth();
  std::vector<double> sum(static_cast<size_t>(depth), 0.0), sumsq(static_cast<size_t>(depth), 0.0);

  for (const auto& ex : data) {
    std::vector<int32_t> tokens;
    tokens.reserve(ex.prompt.size());
    for (unsigned char c : ex.prompt) tokens.push_back(static_cast<int32_t>(c));
    std::vector<Tensor<float>> taps;
    ForwardOptions<float> opt;
    opt.mode = mode;
    opt.layer_taps = &taps;
    model_forward(model, std::span<const int32_t>(tokens), nullptr, opt);
    int64_t pos = ex.answer_pos - 1;  // prediction slot for the answer token
    for (int64_t l = 0; l < depth; ++l) {
      Tensor<float> row(Shape{1, model.d_model});
      std::memcpy(row.data(), taps[static_cast<size_t>(l)].data() + pos * model.d_model,
                  sizeof(float) * static_cast<size_t>(model.d_model));
      auto p = probe_distribution(model, lens.probes[static_cast<size_t>(l)], row);
      double prob = p[static_cast<size_t>(ex.answer_id)];
      sum[static_cast<size_t>(l)] += prob;
      sumsq[static_cast<size_t>(l)] += prob * prob;
    }
  }

  std::vector<SnrPointRaw> curve;
  double n = static_cast<double>(data.size());
  for (int64_t l = 0; l < depth; ++l) {
    SnrPointRaw pt;
    pt.layer = l + 1;
    pt.mean_prob = sum[static_cast<size_t>(l)] / n;
    double var = std::max(0.0, sumsq[static_cast<size_t>(l)] / n - pt.mean_prob * pt.mean_prob);
    pt.sem = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
    curve.push_back(pt);
  }
  return curve;
}

void write_snr_csv(std::ostream& os, const std::vector<SnrPointRaw>& curve) {
  os << "layer,mean_prob,sem\n";
  for (const auto& pt : curve)
    os << pt.layer << "," << fmt_double(pt.mean_prob, 9) << "," << fmt_double(pt.sem, 9) << "\n";
}

}  // namespace dssm
