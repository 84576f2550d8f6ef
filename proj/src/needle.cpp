#include "dssm/needle.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dssm/random.hpp"

namespace dssm {

using nlohmann::json;

namespace {

constexpr char kAnswerPool[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const char* kPositionClasses[3] = {"begin", "middle", "end"};

// all lowercase except the answer byte, which stays unique in the context
std::string needle_sentence(char answer) { return std::string("the secret token is ") + answer + "."; }
const char* kQuestion = "What is the secret token?";

// filler slice with every answer-pool character squashed so the planted
// answer byte stays unique inside the context
std::string clean_filler(std::span<const uint8_t> filler, int64_t offset, int64_t len) {
  std::string out;
  out.reserve(static_cast<size_t>(len));
  int64_t n = static_cast<int64_t>(filler.size());
  for (int64_t i = 0; i < len; ++i) {
    char c = static_cast<char>(filler[static_cast<size_t>((offset + i) % n)]);
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
    out.push_back(c);
  }
  return out;
}

}  // namespace

std::vector<NeedleExample> generate_needle_dataset(const NeedleGenConfig& cfg,
                                                   std::span<const uint8_t> filler) {
  if (cfg.count < 0) throw ConfigError("needle: count must be >= 0");
  if (cfg.context_lengths.empty()) throw ConfigError("needle: at least one context length is required");
  if (filler.empty() && cfg.count > 0) throw DataError("needle: filler corpus is empty");
  Rng rng = Rng::seeded(cfg.seed);

  std::vector<NeedleExample> out;
  out.reserve(static_cast<size_t>(cfg.count));
  for (int64_t i = 0; i < cfg.count; ++i) {
    // round-robin over the (length x position) grid keeps strata balanced
    int64_t li = i % static_cast<int64_t>(cfg.context_lengths.size());
    int64_t pi = (i / static_cast<int64_t>(cfg.context_lengths.size())) % 3;
    int64_t context_len = cfg.context_lengths[static_cast<size_t>(li)];

    char answer = kAnswerPool[rng.uniform_int(0, 25)];
    std::string needle = needle_sentence(answer);
    int64_t needle_len = static_cast<int64_t>(needle.size());
    if (context_len < needle_len)
      throw DataError("needle: context length " + std::to_string(context_len) +
                      " is shorter than the needle sentence (" + std::to_string(needle_len) + " bytes)");

    int64_t filler_len = context_len - needle_len;
    int64_t insert_at = 0;
    if (std::string(kPositionClasses[pi]) == "begin")
      insert_at = 0;
    else if (std::string(kPositionClasses[pi]) == "middle")
      insert_at = filler_len / 2;
    else
      insert_at = filler_len;

    std::string fill = filler_len > 0
                           ? clean_filler(filler, rng.uniform_int(0, static_cast<int64_t>(filler.size()) - 1),
                                          filler_len)
                           : std::string();
    std::string context = fill.substr(0, static_cast<size_t>(insert_at)) + needle +
                          fill.substr(static_cast<size_t>(insert_at));

    NeedleExample ex;
    ex.prompt = "<context>" + context + "</context>Question:" + kQuestion + " Answer:";
    ex.answer_id = static_cast<int32_t>(static_cast<unsigned char>(answer));
    ex.answer_pos = static_cast<int64_t>(ex.prompt.size());
    ex.context_len = context_len;
    ex.position_class = kPositionClasses[pi];

    if (std::count(context.begin(), context.end(), answer) != 1)
      throw DataError("needle: answer token is not unique in the context");
    out.push_back(std::move(ex));
  }
  return out;
}

void save_needle_dataset(const std::string& path, const std::vector<NeedleExample>& data) {
  json j;
  j["note"] =
      "synthetic single-fact retrieval; prompts follow the <context>...</context>Question:... Answer: template";
  j["examples"] = json::array();
  for (const auto& ex : data) {
    json e;
    e["prompt"] = ex.prompt;
    e["answer_id"] = ex.answer_id;
    e["answer_pos"] = ex.answer_pos;
    e["context_len"] = ex.context_len;
    e["position_class"] = ex.position_class;
    j["examples"].push_back(e);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("needle: cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

std::vector<NeedleExample> load_needle_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("needle: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str(), nullptr, false);
  if (j.is_discarded() || !j.contains("examples")) throw DataError("needle: malformed dataset file '" + path + "'");
  std::vector<NeedleExample> out;
  for (auto& e : j["examples"]) {
    NeedleExample ex;
    ex.prompt = e["prompt"].get<std::string>();
    ex.answer_id = e["answer_id"].get<int32_t>();
    ex.answer_pos = e["answer_pos"].get<int64_t>();
    ex.context_len = e["context_len"].get<int64_t>();
    ex.position_class = e["position_class"].get<std::string>();
    out.push_back(std::move(ex));
  }
  return out;
}

RunReport evaluate_needle(ModelF& model, const std::vector<NeedleExample>& data, ScanMode mode,
                          const std::string& model_name) {
  struct CellAcc {
    int64_t correct = 0, total = 0;
    double prob_sum = 0;
  };
  std::map<std::pair<std::string, int64_t>, CellAcc> cells;

  for (const auto& ex : data) {
    std::vector<int32_t> tokens;
    tokens.reserve(ex.prompt.size());
    for (unsigned char c : ex.prompt) tokens.push_back(static_cast<int32_t>(c));
    ForwardOptions<float> opt;
    opt.mode = mode;
    auto logits = model_forward(model, std::span<const int32_t>(tokens), nullptr, opt);
    int64_t v = logits.dim(1);
    const float* row = logits.data() + (ex.answer_pos - 1) * v;
    int32_t argmax = 0;
    float best = row[0];
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) {
      if (row[j] > best) {
        best = row[j];
        argmax = static_cast<int32_t>(j);
      }
      mx = std::max(mx, static_cast<double>(row[j]));
    }
    double z = 0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    double prob = std::exp(static_cast<double>(row[ex.answer_id]) - mx) / z;

    auto& cell = cells[{ex.position_class, ex.context_len}];
    cell.total += 1;
    cell.correct += (argmax == ex.answer_id) ? 1 : 0;
    cell.prob_sum += prob;
  }

  RunReport r;
  r.model_name = model_name;
  r.dataset = "needle";
  r.n_layers = model.depth();
  r.param_count = model.param_count();
  r.note = "synthetic single-fact retrieval; prompts follow the <context>...</context>Question:... Answer: template";
  double correct = 0, total = 0;
  for (const auto& [key, acc] : cells) {
    RunReport::GridCell c;
    c.task = key.first;
    c.context_len = key.second;
    c.score = acc.total ? static_cast<double>(acc.correct) / static_cast<double>(acc.total) : 0.0;
    r.grid.push_back(c);
    correct += static_cast<double>(acc.correct);
    total += static_cast<double>(acc.total);
  }
  r.metrics["needle.accuracy"] = total > 0 ? correct / total : 0.0;
  return r;
}

}  // namespace dssm
