// Versioned binary checkpoints: magic "DIFFSSM1", little-endian lengths, a
// JSON metadata header (architecture, step counter, RNG state), name-indexed
// f32 blobs for parameters and optimizer moments, and a trailing 64-bit
// FNV-1a checksum over everything before it.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dssm/model.hpp"

namespace dssm {

using ModelF = Model<float>;

struct CheckpointData {
  uint32_t version = 1;
  std::string meta_json;  // arch specs, d_model, vocab, step, rng_state, lambda inits
  std::map<std::string, Tensor<float>> params;
  std::map<std::string, Tensor<float>> opt_state;

  int64_t step() const;
  void set_step(int64_t s);
  std::string rng_state() const;
  void set_rng_state(const std::string& s);
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

uint64_t fnv1a(const uint8_t* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL);

// architecture (de)serialization used inside meta_json
std::string specs_to_json(const std::vector<BlockSpec>& specs, int64_t d_model, int64_t vocab);
void specs_from_meta(const std::string& meta_json, std::vector<BlockSpec>& specs, int64_t& d_model,
                     int64_t& vocab);

CheckpointData checkpoint_from_model(ModelF& model, int64_t step = 0, const std::string& rng_state = "");
ModelF model_from_checkpoint(const CheckpointData& data);

// FNV hash of all parameter bytes in named order; identifies a model state.
uint64_t model_hash(ModelF& model);

}  // namespace dssm
