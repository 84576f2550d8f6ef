// Layerwise affine probes over a frozen model: each probe maps the residual
// stream after its layer through the model's final norm and unembedding, and
// is trained to minimize KL(final distribution || probe distribution).
// Probes never touch model parameters. The final layer's probe starts at the
// identity and therefore at zero KL.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dssm/checkpoint.hpp"
#include "dssm/config.hpp"
#include "dssm/needle.hpp"

namespace dssm {

struct LensProbe {
  Tensor<float> w;  // [D, D], identity at init
  Tensor<float> b;  // [D], zero at init
};

struct LensSet {
  std::vector<LensProbe> probes;  // one per layer, index = layer (post-block residual)
  uint64_t model_hash = 0;
  int64_t d_model = 0;
  std::vector<double> final_kl;  // training loss reached per layer
};

LensSet train_lens(ModelF& model, std::span<const uint8_t> text, const LensConfig& cfg, ScanMode mode);

void save_lens(const std::string& path, const LensSet& lens);
LensSet load_lens(const std::string& path);

// Distribution the probe assigns at one activation row.
std::vector<float> probe_distribution(ModelF& model, const LensProbe& probe, const Tensor<float>& h_row);

// KL(model head || probe) averaged over positions of a text sample; the
// identity-initialized final-layer probe must give ~0.
double lens_kl_to_head(ModelF& model, const LensProbe& probe, int64_t layer, std::span<const uint8_t> text,
                       int64_t window, ScanMode mode);

struct SnrPointRaw {
  int64_t layer = 0;
  double mean_prob = 0;
  double sem = 0;
};

// Mean probability the per-layer probes assign to the answer token at the
// answer position, with standard errors; layer indices are 1-based post-block
// residuals. Checks the probe/model hash pairing.
std::vector<SnrPointRaw> needle_snr(ModelF& model, const LensSet& lens, const std::vector<NeedleExample>& data,
                                    ScanMode mode);

void write_snr_csv(std::ostream& os, const std::vector<SnrPointRaw>& curve);

}  // namespace dssm
