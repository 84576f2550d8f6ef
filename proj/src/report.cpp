#include "dssm/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dssm/tensor.hpp"

namespace dssm {

using nlohmann::json;

std::string fmt_double(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

std::string RunReport::to_json_string() const {
  json j;
  j["model_name"] = model_name;
  j["dataset"] = dataset;
  j["n_layers"] = n_layers;
  j["param_count"] = param_count;
  j["metrics"] = metrics;
  j["grid"] = json::array();
  for (const auto& c : grid) j["grid"].push_back({{"task", c.task}, {"context_len", c.context_len}, {"score", c.score}});
  j["snr"] = json::array();
  for (const auto& p : snr) j["snr"].push_back({{"layer", p.layer}, {"mean_prob", p.mean_prob}, {"sem", p.sem}});
  j["note"] = note;
  return j.dump(2);
}

RunReport RunReport::from_json_string(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw DataError("report: malformed JSON");
  RunReport r;
  r.model_name = j.value("model_name", "");
  r.dataset = j.value("dataset", "");
  r.n_layers = j.value("n_layers", int64_t{0});
  r.param_count = j.value("param_count", int64_t{0});
  if (j.contains("metrics"))
    for (auto& [k, v] : j["metrics"].items()) r.metrics[k] = v.get<double>();
  if (j.contains("grid"))
    for (auto& c : j["grid"])
      r.grid.push_back({c.value("task", ""), c.value("context_len", int64_t{0}), c.value("score", 0.0)});
  if (j.contains("snr"))
    for (auto& p : j["snr"])
      r.snr.push_back({p.value("layer", int64_t{0}), p.value("mean_prob", 0.0), p.value("sem", 0.0)});
  r.note = j.value("note", "");
  return r;
}

void RunReport::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("report: cannot write '" + path + "'");
  out << to_json_string() << "\n";
}

RunReport RunReport::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("report: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

void print_summary_table(std::ostream& os, const std::vector<RunReport>& reports,
                         const std::string& metric_prefix) {
  os << "Model | Dataset | # Layers | # Params | PPL | bpb\n";
  os << "----- | ------- | -------- | -------- | --- | ---\n";
  for (const auto& r : reports) {
    auto ppl = r.metrics.find(metric_prefix + ".ppl");
    auto bpb = r.metrics.find(metric_prefix + ".bpb");
    os << r.model_name << " | " << r.dataset << " | " << r.n_layers << " | " << r.param_count << " | "
       << (ppl != r.metrics.end() ? fmt_double(ppl->second) : "-") << " | "
       << (bpb != r.metrics.end() ? fmt_double(bpb->second) : "-") << "\n";
  }
}

WinRatioTable win_ratio_table(const RunReport& a, const RunReport& b) {
  if (a.grid.size() != b.grid.size())
    throw DataError("win_ratio: evaluation grids differ in size (" + std::to_string(a.grid.size()) + " vs " +
                    std::to_string(b.grid.size()) + ")");
  WinRatioTable t;
  t.name_a = a.model_name;
  t.name_b = b.model_name;
  for (size_t i = 0; i < a.grid.size(); ++i) {
    const auto& ca = a.grid[i];
    const auto& cb = b.grid[i];
    if (ca.task != cb.task || ca.context_len != cb.context_len)
      throw DataError("win_ratio: grid mismatch at cell " + std::to_string(i) + " (" + ca.task + "/" +
                      std::to_string(ca.context_len) + " vs " + cb.task + "/" + std::to_string(cb.context_len) +
                      ")");
    WinRatioCell cell;
    cell.task = ca.task;
    cell.context_len = ca.context_len;
    cell.score_a = ca.score;
    cell.score_b = cb.score;
    if (ca.score == cb.score) {
      cell.winner = 't';
      cell.ratio = 1.0;
    } else if (ca.score > cb.score) {
      cell.winner = 'a';
      if (cb.score == 0)
        cell.ratio.reset();  // infinite win
      else
        cell.ratio = ca.score / cb.score;
    } else {
      cell.winner = 'b';
      if (ca.score == 0)
        cell.ratio.reset();
      else
        cell.ratio = -cb.score / ca.score;
    }
    t.cells.push_back(cell);
  }
  return t;
}

void write_win_ratio_csv(std::ostream& os, const WinRatioTable& t) {
  os << "task,context_len,score_a,score_b,ratio,winner\n";
  for (const auto& c : t.cells) {
    os << c.task << "," << c.context_len << "," << fmt_double(c.score_a) << "," << fmt_double(c.score_b) << ",";
    if (c.ratio)
      os << fmt_double(*c.ratio);
    else
      os << (c.winner == 'a' ? "inf" : "-inf");
    os << "," << c.winner << "\n";
  }
}

std::string win_ratio_json(const WinRatioTable& t) {
  json j;
  j["model_a"] = t.name_a;
  j["model_b"] = t.name_b;
  j["cells"] = json::array();
  for (const auto& c : t.cells) {
    json cj;
    cj["task"] = c.task;
    cj["context_len"] = c.context_len;
    cj["score_a"] = c.score_a;
    cj["score_b"] = c.score_b;
    if (c.ratio)
      cj["ratio"] = *c.ratio;
    else
      cj["ratio"] = nullptr;
    cj["infinite"] = !c.ratio.has_value();
    cj["winner"] = std::string(1, c.winner);
    j["cells"].push_back(cj);
  }
  return j.dump(2);
}

}  // namespace dssm
