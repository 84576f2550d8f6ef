// Decoder stack: embedding -> [pre-norm, mixing block, residual] x depth ->
// final norm -> unembedding. Blocks are plain Mamba, Diff-S6, or Diff-Mamba
// per layer, so all-of-one-kind and alternating stacks are both spellable.

#pragma once

#include <type_traits>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dssm/diff.hpp"
#include "dssm/mamba.hpp"
#include "dssm/ops.hpp"

namespace dssm {

enum class BlockKind { Mamba, DiffS6, DiffMamba };

inline std::string block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Mamba: return "mamba";
    case BlockKind::DiffS6: return "diff-s6";
    case BlockKind::DiffMamba: return "diff-mamba";
  }
  return "?";
}

inline BlockKind block_kind_by_name(const std::string& name) {
  if (name == "mamba") return BlockKind::Mamba;
  if (name == "diff-s6") return BlockKind::DiffS6;
  if (name == "diff-mamba") return BlockKind::DiffMamba;
  throw ConfigError("unknown block kind '" + name + "' (expected mamba | diff-s6 | diff-mamba)");
}

struct BlockSpec {
  BlockKind kind = BlockKind::Mamba;
  bool normalized = true;        // differential variants: apply the norm steps
  bool pre_sub_norm = true;      // diff-mamba: norm each path before subtracting
  bool post_sub_norm = true;     // diff-mamba: norm the difference
  LambdaMode lambda_mode = LambdaMode::Simple;
  bool scalar_lambda_bar = false;
  int64_t expand = 2;            // mamba / diff-s6 expansion (diff-mamba paths are fixed at 1)
  int64_t d_state = 16;
  int64_t heads = 0;             // 0 -> d_model / 4, min 1
  int64_t conv_k = 4;
  double lambda_init = -1.0;     // < 0 -> per-layer schedule default
};

// Per-layer default: 0.8 - 0.6 * exp(-0.3 * layer)
inline double lambda_init_schedule(int64_t layer) { return 0.8 - 0.6 * std::exp(-0.3 * static_cast<double>(layer)); }

inline int64_t default_heads(int64_t d_model) { return std::max<int64_t>(1, d_model / 4); }

template <typename T>
struct Block {
  BlockKind kind = BlockKind::Mamba;
  Tensor<T> pre_norm_gain;
  std::optional<MambaBlockParams<T>> mamba;
  std::optional<DiffS6BlockParams<T>> ds6;
  std::optional<DiffMambaBlockParams<T>> dmamba;
};

template <typename T>
struct Model {
  int64_t d_model = 0;
  int64_t vocab = 0;
  T norm_eps = T(1e-5);
  Tensor<T> embed;    // [V, D]
  Tensor<T> unembed;  // [V, D]
  Tensor<T> final_norm_gain;
  std::vector<Block<T>> blocks;
  std::vector<BlockSpec> specs;

  int64_t depth() const { return static_cast<int64_t>(blocks.size()); }

  void set_requires_grad(bool v = true) {
    embed.set_requires_grad(v);
    unembed.set_requires_grad(v);
    final_norm_gain.set_requires_grad(v);
    for (auto& b : blocks) {
      b.pre_norm_gain.set_requires_grad(v);
      if (b.mamba) b.mamba->set_requires_grad(v);
      if (b.ds6) b.ds6->set_requires_grad(v);
      if (b.dmamba) b.dmamba->set_requires_grad(v);
    }
  }

  void named_tensors(const std::function<void(const std::string&, Tensor<T>&, bool)>& visit) {
    visit("embed", embed, true);
    visit("unembed", unembed, true);
    for (size_t i = 0; i < blocks.size(); ++i) {
      std::string prefix = "blocks." + std::to_string(i);
      visit(prefix + ".pre_norm", blocks[i].pre_norm_gain, false);
      if (blocks[i].mamba) blocks[i].mamba->named_tensors(prefix, visit);
      if (blocks[i].ds6) blocks[i].ds6->named_tensors(prefix, visit);
      if (blocks[i].dmamba) blocks[i].dmamba->named_tensors(prefix, visit);
    }
    visit("final_norm", final_norm_gain, false);
  }

  int64_t param_count() {
    int64_t total = 0;
    named_tensors([&](const std::string&, Tensor<T>& t, bool) { total += t.size(); });
    return total;
  }

  // Current subtraction weights, one entry per differential layer.
  std::vector<std::pair<int64_t, double>> lambda_values() const {
    std::vector<std::pair<int64_t, double>> out;
    for (size_t i = 0; i < blocks.size(); ++i) {
      if (blocks[i].ds6) out.emplace_back(static_cast<int64_t>(i), static_cast<double>(lambda_value(blocks[i].ds6->lambda)));
      if (blocks[i].dmamba)
        out.emplace_back(static_cast<int64_t>(i), static_cast<double>(lambda_value(blocks[i].dmamba->lambda)));
    }
    return out;
  }
};

template <typename T>
Model<T> build_model(const std::vector<BlockSpec>& specs, int64_t d_model, int64_t vocab, uint64_t seed) {
  if (d_model < 1 || vocab < 1) throw ConfigError("build_model: d_model and vocab must be positive");
  Model<T> m;
  m.d_model = d_model;
  m.vocab = vocab;
  m.specs = specs;
  Rng root = Rng::seeded(seed);
  Rng r_embed = root.derive(0xe0);
  m.embed = Tensor<T>(Shape{vocab, d_model});
  m.unembed = Tensor<T>(Shape{vocab, d_model});
  r_embed.fill_normal(m.embed, 0.0, 0.02);
  r_embed.fill_normal(m.unembed, 0.0, 0.02);
  m.final_norm_gain = Tensor<T>(Shape{d_model}, T(1));

  for (size_t i = 0; i < specs.size(); ++i) {
    BlockSpec s = specs[i];
    if (s.heads <= 0) s.heads = default_heads(d_model);
    double linit = s.lambda_init >= 0 ? s.lambda_init : lambda_init_schedule(static_cast<int64_t>(i));
    Rng r = root.derive(0x100 + i);
    Block<T> b;
    b.kind = s.kind;
    b.pre_norm_gain = Tensor<T>(Shape{d_model}, T(1));
    switch (s.kind) {
      case BlockKind::Mamba:
        b.mamba = MambaBlockParams<T>::init(d_model, s.expand, s.d_state, s.heads, s.conv_k, r);
        break;
      case BlockKind::DiffS6:
        b.ds6 = DiffS6BlockParams<T>::init(d_model, s.expand, s.d_state, s.heads, s.conv_k, s.lambda_mode,
                                           static_cast<T>(linit), s.normalized, r, s.scalar_lambda_bar);
        break;
      case BlockKind::DiffMamba: {
        auto dm = DiffMambaBlockParams<T>::init(d_model, s.d_state, s.heads, s.conv_k, s.lambda_mode,
                                                static_cast<T>(linit), r, s.scalar_lambda_bar);
        dm.pre_sub_norm = s.normalized && s.pre_sub_norm;
        dm.post_sub_norm = s.normalized && s.post_sub_norm;
        b.dmamba = dm;
        break;
      }
    }
    m.blocks.push_back(std::move(b));
    // keep the resolved values visible in the stored spec
    m.specs[i].heads = s.heads;
    m.specs[i].lambda_init = linit;
  }
  return m;
}

template <typename T>
struct ForwardOptions {
  ScanMode mode = ScanMode::Sequential;
  double dropout = 0.0;                          // applied to block outputs pre-residual
  Rng* rng = nullptr;                            // required when dropout > 0
  bool fused_diff = true;                        // diff-mamba: fused vs two-pass route
  std::vector<Tensor<T>>* layer_taps = nullptr;  // residual stream after each block
};

template <typename T>
Tensor<T> block_forward(const Block<T>& b, const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape, const ForwardOptions<T>& opt,
                        T eps) {
  switch (b.kind) {
    case BlockKind::Mamba:
      return mamba_forward(x, *b.mamba, opt.mode, tape);
    case BlockKind::DiffS6:
      return diff_s6_block_forward(x, *b.ds6, opt.mode, tape, eps);
    case BlockKind::DiffMamba:
      if (opt.fused_diff) return fused_diff_mamba_forward(x, *b.dmamba, opt.mode, tape, eps);
      return diff_mamba_forward(x, *b.dmamba, opt.mode, tape, true, eps);
  }
  throw ConfigError("block_forward: unknown block kind");
}

template <typename T>
Tensor<T> model_forward(Model<T>& m, std::span<const int32_t> tokens, std::type_identity_t<Tape<T>*> tape = nullptr,
                        const ForwardOptions<T>& opt = {}) {
  if (opt.dropout > 0 && !opt.rng) throw ConfigError("model_forward: dropout needs an rng");
  Tensor<T> h = embedding(m.embed, tokens, tape);
  for (auto& b : m.blocks) {
    Tensor<T> normed = rmsnorm(h, b.pre_norm_gain, m.norm_eps, tape);
    Tensor<T> out = block_forward(b, normed, tape, opt, m.norm_eps);
    if (opt.dropout > 0) out = dropout(out, opt.dropout, *opt.rng, tape);
    h = add(h, out, tape);
    if (opt.layer_taps) opt.layer_taps->push_back(h);
  }
  Tensor<T> hn = rmsnorm(h, m.final_norm_gain, m.norm_eps, tape);
  return linear(hn, m.unembed, tape);
}

}  // namespace dssm
