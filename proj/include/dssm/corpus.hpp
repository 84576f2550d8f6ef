// Byte-level corpus handling: raw files split contiguously into train/valid/
// test streams. Token ids are the byte values themselves (vocab = 256).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dssm {

inline constexpr int64_t kByteVocab = 256;

struct ByteCorpus {
  std::vector<uint8_t> train, valid, test;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);

// Fractions must sum to 1 (within 1e-9); splits are contiguous in file order.
ByteCorpus load_corpus(const std::string& path, double f_train, double f_valid, double f_test);
ByteCorpus split_bytes(const std::vector<uint8_t>& bytes, double f_train, double f_valid, double f_test);

// Deterministic synthetic word-soup corpus for smoke runs: learnable,
// low-entropy byte text of exactly `size` bytes.
std::vector<uint8_t> synth_corpus(int64_t size, uint64_t seed);

}  // namespace dssm
