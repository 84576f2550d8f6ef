#include "dssm/corpus.hpp"

#include <cmath>
#include <fstream>

#include "dssm/random.hpp"
#include "dssm/tensor.hpp"

namespace dssm {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("corpus: cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError("corpus: '" + path + "' is empty");
  return bytes;
}

ByteCorpus split_bytes(const std::vector<uint8_t>& bytes, double f_train, double f_valid, double f_test) {
  if (std::fabs(f_train + f_valid + f_test - 1.0) > 1e-9)
    throw ConfigError("corpus: split fractions must sum to 1, got " + std::to_string(f_train) + " + " +
                      std::to_string(f_valid) + " + " + std::to_string(f_test));
  if (f_train <= 0 || f_valid < 0 || f_test < 0) throw ConfigError("corpus: split fractions must be non-negative");
  int64_t n = static_cast<int64_t>(bytes.size());
  int64_t n_train = static_cast<int64_t>(std::llround(f_train * static_cast<double>(n)));
  int64_t n_valid = static_cast<int64_t>(std::llround(f_valid * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_valid = std::min(n_valid, n - n_train);
  ByteCorpus c;
  c.train.assign(bytes.begin(), bytes.begin() + n_train);
  c.valid.assign(bytes.begin() + n_train, bytes.begin() + n_train + n_valid);
  c.test.assign(bytes.begin() + n_train + n_valid, bytes.end());
  return c;
}

ByteCorpus load_corpus(const std::string& path, double f_train, double f_valid, double f_test) {
  return split_bytes(read_file_bytes(path), f_train, f_valid, f_test);
}

std::vector<uint8_t> synth_corpus(int64_t size, uint64_t seed) {
  static const char* kWords[] = {"state",  "space",  "signal", "stream", "memory", "filter", "select",
                                 "gate",   "scan",   "layer",  "token",  "model",  "noise",  "clean",
                                 "probe",  "depth",  "width",  "decay",  "input",  "output"};
  static const char* kPunct[] = {". ", ", ", "; ", " and ", " of ", " the ", " over ", " into "};
  Rng rng = Rng::seeded(seed);
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(size));
  while (static_cast<int64_t>(out.size()) < size) {
    const char* w = kWords[rng.uniform_int(0, 19)];
    for (const char* p = w; *p; ++p) out.push_back(static_cast<uint8_t>(*p));
    const char* sep = kPunct[rng.uniform_int(0, 7)];
    for (const char* p = sep; *p; ++p) out.push_back(static_cast<uint8_t>(*p));
  }
  out.resize(static_cast<size_t>(size));
  return out;
}

}  // namespace dssm
