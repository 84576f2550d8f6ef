#include "dssm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace dssm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : it->second;
}
int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : to_int(key, it->second);
}
double KvConfig::get_double(const std::string& key, double fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : to_double(key, it->second);
}
bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : to_bool(key, it->second);
}
std::vector<int64_t> KvConfig::get_int_list(const std::string& key, std::vector<int64_t> fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  std::vector<int64_t> out;
  for (const auto& item : split_csv(it->second)) out.push_back(to_int(key, item));
  return out;
}
std::vector<uint64_t> KvConfig::get_uint_list(const std::string& key, std::vector<uint64_t> fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  std::vector<uint64_t> out;
  for (const auto& item : split_csv(it->second)) out.push_back(static_cast<uint64_t>(to_int(key, item)));
  return out;
}

KvConfig parse_config_text(const std::string& text) {
  KvConfig cfg;
  std::string section;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": key '" + key + "' outside any [section]");
    cfg.values[section + "." + key] = val;
  }
  return cfg;
}

KvConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_override(KvConfig& cfg, const std::string& expr) {
  size_t eq = expr.find('=');
  size_t dot = expr.find('.');
  if (eq == std::string::npos || dot == std::string::npos || eq < dot)
    throw ConfigError("--set expects section.key=value, got '" + expr + "'");
  std::string key = trim(expr.substr(0, eq));
  cfg.values[key] = trim(expr.substr(eq + 1));
}

std::vector<BlockSpec> ModelConfig::to_specs() const {
  std::vector<std::string> kinds;
  if (pattern == "mamba" || pattern == "diff-mamba" || pattern == "diff-s6") {
    kinds.assign(static_cast<size_t>(depth), pattern);
  } else if (pattern == "alternating") {
    for (int64_t i = 0; i < depth; ++i) kinds.push_back(i % 2 == 0 ? "mamba" : "diff-mamba");
  } else {
    for (const auto& item : split_csv(pattern)) kinds.push_back(item);
    if (static_cast<int64_t>(kinds.size()) != depth)
      throw ConfigError("model.pattern lists " + std::to_string(kinds.size()) + " kinds but model.depth is " +
                        std::to_string(depth));
  }
  std::vector<BlockSpec> specs;
  for (const auto& k : kinds) {
    BlockSpec s;
    s.kind = block_kind_by_name(k);
    s.normalized = normalized;
    s.pre_sub_norm = pre_sub_norm;
    s.post_sub_norm = post_sub_norm;
    s.lambda_mode = lambda_mode_by_name(lambda_mode);
    s.scalar_lambda_bar = scalar_lambda_bar;
    s.expand = expand;
    s.d_state = d_state;
    s.heads = heads;
    s.conv_k = conv_k;
    s.lambda_init = lambda_init;
    specs.push_back(s);
  }
  return specs;
}

void TrainConfig::validate() const {
  if (dataset.empty()) throw ConfigError("train.dataset is required");
  if (warmup_steps > total_steps)
    throw ConfigError("train.warmup_steps (" + std::to_string(warmup_steps) + ") must be <= train.total_steps (" +
                      std::to_string(total_steps) + ")");
  if (lr <= 0) throw ConfigError("train.lr must be positive");
  if (batch_size < 1 || max_seq_len < 2)
    throw ConfigError("train.batch_size and train.max_seq_len must be positive");
  if (dropout < 0 || dropout >= 1) throw ConfigError("train.dropout must be in [0,1)");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (objective != "lm" && objective != "needle") throw ConfigError("train.objective must be lm or needle");
  if (objective == "needle" && needle_dataset.empty())
    throw ConfigError("train.needle_dataset is required for the needle objective");
}

FullConfig load_full_config(const KvConfig& kv) {
  static const std::set<std::string> known = {
      "model.d_model", "model.depth", "model.vocab", "model.d_state", "model.conv_k", "model.heads",
      "model.expand", "model.pattern", "model.normalized", "model.pre_sub_norm", "model.post_sub_norm",
      "model.lambda_mode", "model.scalar_lambda_bar", "model.lambda_init", "model.scan",
      "train.dataset", "train.split_train", "train.split_valid", "train.split_test", "train.max_seq_len",
      "train.batch_size", "train.lr", "train.warmup_steps", "train.total_steps", "train.weight_decay",
      "train.dropout", "train.seed", "train.eval_interval", "train.eval_max_windows", "train.grad_clip",
      "train.out_dir", "train.objective", "train.needle_dataset", "train.init_checkpoint",
      "eval.checkpoint", "eval.split", "eval.mode", "eval.needle_dataset", "eval.report_out",
      "eval.max_windows",
      "needle.context_lengths", "needle.count", "needle.seed", "needle.filler", "needle.out",
      "lens.checkpoint", "lens.text", "lens.out", "lens.lens", "lens.needle_dataset", "lens.csv_out",
      "lens.report_out", "lens.steps", "lens.lr", "lens.positions", "lens.window", "lens.batch", "lens.seed",
      "convert.source", "convert.out", "convert.layer_begin", "convert.layer_end",
      "dump.checkpoint", "dump.layer", "dump.channel", "dump.length", "dump.seed", "dump.input",
      "dump.out_prefix", "dump.target",
      "compare.report_a", "compare.report_b", "compare.out_prefix",
  };
  for (const auto& [key, value] : kv.values) {
    (void)value;
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
  }

  FullConfig f;
  ModelConfig& m = f.model;
  m.d_model = kv.get_int("model.d_model", m.d_model);
  m.depth = kv.get_int("model.depth", m.depth);
  m.vocab = kv.get_int("model.vocab", m.vocab);
  m.d_state = kv.get_int("model.d_state", m.d_state);
  m.conv_k = kv.get_int("model.conv_k", m.conv_k);
  m.heads = kv.get_int("model.heads", m.heads);
  m.expand = kv.get_int("model.expand", m.expand);
  m.pattern = kv.get("model.pattern", m.pattern);
  m.normalized = kv.get_bool("model.normalized", m.normalized);
  m.pre_sub_norm = kv.get_bool("model.pre_sub_norm", m.pre_sub_norm);
  m.post_sub_norm = kv.get_bool("model.post_sub_norm", m.post_sub_norm);
  m.lambda_mode = kv.get("model.lambda_mode", m.lambda_mode);
  m.scalar_lambda_bar = kv.get_bool("model.scalar_lambda_bar", m.scalar_lambda_bar);
  m.lambda_init = kv.get_double("model.lambda_init", m.lambda_init);
  m.scan = kv.get("model.scan", m.scan);

  TrainConfig& t = f.train;
  t.dataset = kv.get("train.dataset", t.dataset);
  t.split_train = kv.get_double("train.split_train", t.split_train);
  t.split_valid = kv.get_double("train.split_valid", t.split_valid);
  t.split_test = kv.get_double("train.split_test", t.split_test);
  t.max_seq_len = kv.get_int("train.max_seq_len", t.max_seq_len);
  t.batch_size = kv.get_int("train.batch_size", t.batch_size);
  t.lr = kv.get_double("train.lr", t.lr);
  t.warmup_steps = kv.get_int("train.warmup_steps", t.warmup_steps);
  t.total_steps = kv.get_int("train.total_steps", t.total_steps);
  t.weight_decay = kv.get_double("train.weight_decay", t.weight_decay);
  t.dropout = kv.get_double("train.dropout", t.dropout);
  t.seeds = kv.get_uint_list("train.seed", t.seeds);
  t.eval_interval = kv.get_int("train.eval_interval", t.eval_interval);
  t.eval_max_windows = kv.get_int("train.eval_max_windows", t.eval_max_windows);
  t.grad_clip = kv.get_double("train.grad_clip", t.grad_clip);
  t.out_dir = kv.get("train.out_dir", t.out_dir);
  t.objective = kv.get("train.objective", t.objective);
  t.needle_dataset = kv.get("train.needle_dataset", t.needle_dataset);
  t.init_checkpoint = kv.get("train.init_checkpoint", t.init_checkpoint);

  EvalConfig& e = f.eval;
  e.checkpoint = kv.get("eval.checkpoint", e.checkpoint);
  e.split = kv.get("eval.split", e.split);
  e.mode = kv.get("eval.mode", e.mode);
  e.needle_dataset = kv.get("eval.needle_dataset", e.needle_dataset);
  e.report_out = kv.get("eval.report_out", e.report_out);
  e.max_windows = kv.get_int("eval.max_windows", e.max_windows);

  NeedleGenConfig& n = f.needle;
  n.context_lengths = kv.get_int_list("needle.context_lengths", n.context_lengths);
  n.count = kv.get_int("needle.count", n.count);
  n.seed = static_cast<uint64_t>(kv.get_int("needle.seed", static_cast<int64_t>(n.seed)));
  n.filler = kv.get("needle.filler", n.filler);
  n.out = kv.get("needle.out", n.out);

  LensConfig& l = f.lens;
  l.checkpoint = kv.get("lens.checkpoint", l.checkpoint);
  l.text = kv.get("lens.text", l.text);
  l.out = kv.get("lens.out", l.out);
  l.lens = kv.get("lens.lens", l.lens);
  l.needle_dataset = kv.get("lens.needle_dataset", l.needle_dataset);
  l.csv_out = kv.get("lens.csv_out", l.csv_out);
  l.report_out = kv.get("lens.report_out", l.report_out);
  l.steps = kv.get_int("lens.steps", l.steps);
  l.lr = kv.get_double("lens.lr", l.lr);
  l.positions = kv.get_int("lens.positions", l.positions);
  l.window = kv.get_int("lens.window", l.window);
  l.batch = kv.get_int("lens.batch", l.batch);
  l.seed = static_cast<uint64_t>(kv.get_int("lens.seed", static_cast<int64_t>(l.seed)));

  ConvertConfig& c = f.convert;
  c.source = kv.get("convert.source", c.source);
  c.out = kv.get("convert.out", c.out);
  c.layer_begin = kv.get_int("convert.layer_begin", c.layer_begin);
  c.layer_end = kv.get_int("convert.layer_end", c.layer_end);

  DumpConfig& d = f.dump;
  d.checkpoint = kv.get("dump.checkpoint", d.checkpoint);
  d.layer = kv.get_int("dump.layer", d.layer);
  d.channel = kv.get_int("dump.channel", d.channel);
  d.length = kv.get_int("dump.length", d.length);
  d.seed = static_cast<uint64_t>(kv.get_int("dump.seed", static_cast<int64_t>(d.seed)));
  d.input = kv.get("dump.input", d.input);
  d.out_prefix = kv.get("dump.out_prefix", d.out_prefix);
  d.target = kv.get("dump.target", d.target);

  CompareConfig& cp = f.compare;
  cp.report_a = kv.get("compare.report_a", cp.report_a);
  cp.report_b = kv.get("compare.report_b", cp.report_b);
  cp.out_prefix = kv.get("compare.out_prefix", cp.out_prefix);

  return f;
}

}  // namespace dssm
