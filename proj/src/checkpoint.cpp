#include "dssm/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace dssm {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'I', 'F', 'F', 'S', 'S', 'M', '1'};

void put_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
  const uint8_t* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

struct Reader {
  const uint8_t* p;
  size_t n;
  size_t pos = 0;

  void need(size_t k, const char* what) {
    if (pos + k > n) throw IntegrityError(std::string("checkpoint: truncated file while reading ") + what);
  }
  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(v);
  }
  void get_bytes(void* dst, size_t k, const char* what) {
    need(k, what);
    std::memcpy(dst, p + pos, k);
    pos += k;
  }
};

void put_tensor_table(std::vector<uint8_t>& buf, const std::map<std::string, Tensor<float>>& table) {
  put_le<uint32_t>(buf, static_cast<uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    put_le<uint16_t>(buf, static_cast<uint16_t>(name.size()));
    put_bytes(buf, name.data(), name.size());
    put_le<uint8_t>(buf, static_cast<uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_le<uint64_t>(buf, static_cast<uint64_t>(t.dim(i)));
    put_bytes(buf, t.data(), sizeof(float) * static_cast<size_t>(t.size()));
  }
}

std::map<std::string, Tensor<float>> get_tensor_table(Reader& r, const char* what) {
  std::map<std::string, Tensor<float>> table;
  uint32_t count = r.get_le<uint32_t>(what);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = r.get_le<uint16_t>("blob name length");
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "blob name");
    uint8_t rank = r.get_le<uint8_t>("blob rank");
    Shape shape;
    for (uint8_t k = 0; k < rank; ++k) shape.push_back(static_cast<int64_t>(r.get_le<uint64_t>("blob dims")));
    Tensor<float> t(shape);
    r.get_bytes(t.data(), sizeof(float) * static_cast<size_t>(t.size()), "blob data");
    table.emplace(std::move(name), std::move(t));
  }
  return table;
}

}  // namespace

uint64_t fnv1a(const uint8_t* data, size_t n, uint64_t seed) {
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

int64_t CheckpointData::step() const {
  json j = json::parse(meta_json, nullptr, false);
  return j.is_discarded() ? 0 : j.value("step", int64_t{0});
}
void CheckpointData::set_step(int64_t s) {
  json j = meta_json.empty() ? json::object() : json::parse(meta_json);
  j["step"] = s;
  meta_json = j.dump();
}
std::string CheckpointData::rng_state() const {
  json j = json::parse(meta_json, nullptr, false);
  return j.is_discarded() ? "" : j.value("rng_state", "");
}
void CheckpointData::set_rng_state(const std::string& s) {
  json j = meta_json.empty() ? json::object() : json::parse(meta_json);
  j["rng_state"] = s;
  meta_json = j.dump();
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::vector<uint8_t> buf;
  put_bytes(buf, kMagic, sizeof(kMagic));
  put_le<uint32_t>(buf, data.version);
  put_le<uint64_t>(buf, data.meta_json.size());
  put_bytes(buf, data.meta_json.data(), data.meta_json.size());
  put_tensor_table(buf, data.params);
  put_tensor_table(buf, data.opt_state);
  uint64_t checksum = fnv1a(buf.data(), buf.size());
  put_le<uint64_t>(buf, checksum);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t))
    throw IntegrityError("checkpoint: file too short");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw IntegrityError("checkpoint: bad magic (not a checkpoint file)");

  uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof(uint64_t), sizeof(uint64_t));
  uint64_t computed = fnv1a(buf.data(), buf.size() - sizeof(uint64_t));
  if (stored != computed) throw IntegrityError("checkpoint: checksum mismatch (corrupt or truncated file)");

  Reader r{buf.data(), buf.size() - sizeof(uint64_t)};
  r.pos = sizeof(kMagic);
  CheckpointData data;
  data.version = r.get_le<uint32_t>("version");
  if (data.version != 1)
    throw IntegrityError("checkpoint: unsupported format version " + std::to_string(data.version));
  uint64_t meta_len = r.get_le<uint64_t>("meta length");
  data.meta_json.resize(meta_len);
  r.get_bytes(data.meta_json.data(), meta_len, "meta json");
  data.params = get_tensor_table(r, "parameter table");
  data.opt_state = get_tensor_table(r, "optimizer table");
  if (r.pos != r.n) throw IntegrityError("checkpoint: trailing bytes after tables");
  return data;
}

std::string specs_to_json(const std::vector<BlockSpec>& specs, int64_t d_model, int64_t vocab) {
  json j;
  j["d_model"] = d_model;
  j["vocab"] = vocab;
  j["blocks"] = json::array();
  for (const auto& s : specs) {
    json b;
    b["kind"] = block_kind_name(s.kind);
    b["normalized"] = s.normalized;
    b["pre_sub_norm"] = s.pre_sub_norm;
    b["post_sub_norm"] = s.post_sub_norm;
    b["lambda_mode"] = s.lambda_mode == LambdaMode::Simple ? "simple" : "reparam";
    b["scalar_lambda_bar"] = s.scalar_lambda_bar;
    b["expand"] = s.expand;
    b["d_state"] = s.d_state;
    b["heads"] = s.heads;
    b["conv_k"] = s.conv_k;
    b["lambda_init"] = s.lambda_init;
    j["blocks"].push_back(b);
  }
  return j.dump();
}

void specs_from_meta(const std::string& meta_json, std::vector<BlockSpec>& specs, int64_t& d_model,
                     int64_t& vocab) {
  json j = json::parse(meta_json, nullptr, false);
  if (j.is_discarded() || !j.contains("arch")) throw IntegrityError("checkpoint: metadata lacks architecture");
  json a = json::parse(j["arch"].get<std::string>());
  d_model = a["d_model"].get<int64_t>();
  vocab = a["vocab"].get<int64_t>();
  specs.clear();
  for (auto& b : a["blocks"]) {
    BlockSpec s;
    s.kind = block_kind_by_name(b["kind"].get<std::string>());
    s.normalized = b["normalized"].get<bool>();
    s.pre_sub_norm = b["pre_sub_norm"].get<bool>();
    s.post_sub_norm = b["post_sub_norm"].get<bool>();
    s.lambda_mode = lambda_mode_by_name(b["lambda_mode"].get<std::string>());
    s.scalar_lambda_bar = b["scalar_lambda_bar"].get<bool>();
    s.expand = b["expand"].get<int64_t>();
    s.d_state = b["d_state"].get<int64_t>();
    s.heads = b["heads"].get<int64_t>();
    s.conv_k = b["conv_k"].get<int64_t>();
    s.lambda_init = b["lambda_init"].get<double>();
    specs.push_back(s);
  }
}

CheckpointData checkpoint_from_model(ModelF& model, int64_t step, const std::string& rng_state) {
  CheckpointData data;
  json meta;
  meta["arch"] = specs_to_json(model.specs, model.d_model, model.vocab);
  meta["step"] = step;
  meta["rng_state"] = rng_state;
  data.meta_json = meta.dump();
  model.named_tensors([&](const std::string& name, Tensor<float>& t, bool) {
    data.params.emplace(name, t.clone());
  });
  return data;
}

ModelF model_from_checkpoint(const CheckpointData& data) {
  std::vector<BlockSpec> specs;
  int64_t d_model = 0, vocab = 0;
  specs_from_meta(data.meta_json, specs, d_model, vocab);
  ModelF model = build_model<float>(specs, d_model, vocab, /*seed=*/0);
  size_t used = 0;
  model.named_tensors([&](const std::string& name, Tensor<float>& t, bool) {
    auto it = data.params.find(name);
    if (it == data.params.end()) throw IntegrityError("checkpoint: missing parameter '" + name + "'");
    if (it->second.shape() != t.shape())
      throw IntegrityError("checkpoint: parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                           ", model expects " + shape_str(t.shape()));
    std::memcpy(t.data(), it->second.data(), sizeof(float) * static_cast<size_t>(t.size()));
    ++used;
  });
  if (used != data.params.size())
    throw IntegrityError("checkpoint: " + std::to_string(data.params.size() - used) + " unused parameter blobs");
  return model;
}

uint64_t model_hash(ModelF& model) {
  uint64_t h = 0xcbf29ce484222325ULL;
  model.named_tensors([&](const std::string& name, Tensor<float>& t, bool) {
    h = fnv1a(reinterpret_cast<const uint8_t*>(name.data()), name.size(), h);
    h = fnv1a(reinterpret_cast<const uint8_t*>(t.data()), sizeof(float) * static_cast<size_t>(t.size()), h);
  });
  return h;
}

}  // namespace dssm
