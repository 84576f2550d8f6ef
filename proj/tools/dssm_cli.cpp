// Command-line front end: train, eval, convert, needle-gen, lens-train,
// lens-eval, attn-dump, compare. Every subcommand reads --config <path> plus
// repeatable --set section.key=value overrides. Exit codes: 0 success,
// 1 usage/config error, 2 data/numerical error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dssm/checkpoint.hpp"
#include "dssm/config.hpp"
#include "dssm/convert.hpp"
#include "dssm/corpus.hpp"
#include "dssm/implicit.hpp"
#include "dssm/lens.hpp"
#include "dssm/needle.hpp"
#include "dssm/report.hpp"
#include "dssm/train.hpp"

using namespace dssm;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

FullConfig resolve_config(const CommonArgs& args) {
  KvConfig kv;
  if (!args.config_path.empty()) kv = parse_config_file(args.config_path);
  for (const auto& expr : args.overrides) apply_override(kv, expr);
  return load_full_config(kv);
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "configuration file (section.key=value format)");
  cmd->add_option("--set", args.overrides, "override: section.key=value")->take_all();
}

ModelF load_model_or_fresh(const FullConfig& cfg, const std::string& checkpoint_path) {
  if (!checkpoint_path.empty()) return model_from_checkpoint(load_checkpoint(checkpoint_path));
  return build_model<float>(cfg.model.to_specs(), cfg.model.d_model, cfg.model.vocab,
                            cfg.train.seeds.empty() ? 0 : cfg.train.seeds[0]);
}

int cmd_train(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  cfg.train.validate();
  ByteCorpus corpus = load_corpus(cfg.train.dataset, cfg.train.split_train, cfg.train.split_valid,
                                  cfg.train.split_test);
  std::string base_out = cfg.train.out_dir;
  std::vector<RunReport> reports;
  for (uint64_t seed : cfg.train.seeds) {
    TrainConfig tc = cfg.train;
    if (cfg.train.seeds.size() > 1) tc.out_dir = base_out + "/seed" + std::to_string(seed);
    ModelF model = cfg.train.init_checkpoint.empty()
                       ? build_model<float>(cfg.model.to_specs(), cfg.model.d_model, cfg.model.vocab, seed)
                       : model_from_checkpoint(load_checkpoint(cfg.train.init_checkpoint));
    TrainResult res = train_loop(model, cfg.model, tc, corpus, seed, &std::cout);
    res.report.model_name = cfg.model.pattern;
    res.report.save(tc.out_dir + "/report.json");
    reports.push_back(res.report);
    std::cout << "seed " << seed << ": final checkpoint " << res.final_checkpoint << "\n";
  }
  print_summary_table(std::cout, reports);
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  if (cfg.eval.checkpoint.empty()) throw ConfigError("eval.checkpoint is required");
  ModelF model = model_from_checkpoint(load_checkpoint(cfg.eval.checkpoint));
  ScanMode mode = cfg.model.scan_mode();
  RunReport report;
  report.model_name = cfg.eval.checkpoint;
  report.n_layers = model.depth();
  report.param_count = model.param_count();

  if (cfg.eval.mode == "lm") {
    ByteCorpus corpus = load_corpus(cfg.train.dataset, cfg.train.split_train, cfg.train.split_valid,
                                    cfg.train.split_test);
    std::span<const uint8_t> split = corpus.test;
    if (cfg.eval.split == "train") split = corpus.train;
    if (cfg.eval.split == "valid") split = corpus.valid;
    EvalResult ev = evaluate_lm(model, split, cfg.train.max_seq_len, mode, cfg.eval.max_windows);
    report.dataset = cfg.train.dataset;
    report.metrics[cfg.eval.split + ".loss"] = ev.nll;
    report.metrics[cfg.eval.split + ".ppl"] = ev.ppl;
    report.metrics[cfg.eval.split + ".bpb"] = ev.bpb;
    std::cout << cfg.eval.split << " loss " << fmt_double(ev.nll, 9) << " ppl " << fmt_double(ev.ppl, 9)
              << " bpb " << fmt_double(ev.bpb, 9) << " over " << ev.positions << " positions\n";
  } else if (cfg.eval.mode == "needle") {
    if (cfg.eval.needle_dataset.empty()) throw ConfigError("eval.needle_dataset is required for needle mode");
    auto data = load_needle_dataset(cfg.eval.needle_dataset);
    report = evaluate_needle(model, data, mode, cfg.eval.checkpoint);
    std::cout << "needle accuracy " << fmt_double(report.metrics["needle.accuracy"]) << " over "
              << data.size() << " examples\n";
  } else {
    throw ConfigError("eval.mode must be lm or needle");
  }
  if (!cfg.eval.report_out.empty()) report.save(cfg.eval.report_out);
  return 0;
}

int cmd_convert(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  if (cfg.convert.source.empty()) throw ConfigError("convert.source is required");
  CheckpointData src = load_checkpoint(cfg.convert.source);
  CheckpointData dst = convert_mamba_to_diff(src, cfg.convert.layer_begin, cfg.convert.layer_end);
  save_checkpoint(cfg.convert.out, dst);
  std::cout << "converted layers [" << cfg.convert.layer_begin << "," << cfg.convert.layer_end << ") -> "
            << cfg.convert.out << "\n";
  return 0;
}

int cmd_needle_gen(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  std::vector<uint8_t> filler;
  if (!cfg.needle.filler.empty())
    filler = read_file_bytes(cfg.needle.filler);
  else
    filler = synth_corpus(1 << 16, cfg.needle.seed + 1);
  auto data = generate_needle_dataset(cfg.needle, filler);
  save_needle_dataset(cfg.needle.out, data);
  std::cout << "wrote " << data.size() << " examples to " << cfg.needle.out << "\n";
  return 0;
}

int cmd_lens_train(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  if (cfg.lens.checkpoint.empty()) throw ConfigError("lens.checkpoint is required");
  if (cfg.lens.text.empty()) throw ConfigError("lens.text is required");
  ModelF model = model_from_checkpoint(load_checkpoint(cfg.lens.checkpoint));
  auto text = read_file_bytes(cfg.lens.text);
  LensSet lens = train_lens(model, text, cfg.lens, cfg.model.scan_mode());
  save_lens(cfg.lens.out, lens);
  std::cout << "trained " << lens.probes.size() << " probes -> " << cfg.lens.out << "\n";
  for (size_t l = 0; l < lens.final_kl.size(); ++l)
    std::cout << "  layer " << (l + 1) << " kl " << fmt_double(lens.final_kl[l], 6) << "\n";
  return 0;
}

int cmd_lens_eval(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  if (cfg.lens.checkpoint.empty() || cfg.lens.lens.empty() || cfg.lens.needle_dataset.empty())
    throw ConfigError("lens-eval needs lens.checkpoint, lens.lens, and lens.needle_dataset");
  ModelF model = model_from_checkpoint(load_checkpoint(cfg.lens.checkpoint));
  LensSet lens = load_lens(cfg.lens.lens);
  auto data = load_needle_dataset(cfg.lens.needle_dataset);
  auto curve = needle_snr(model, lens, data, cfg.model.scan_mode());
  std::ofstream csv(cfg.lens.csv_out, std::ios::binary);
  if (!csv) throw DataError("lens-eval: cannot write '" + cfg.lens.csv_out + "'");
  write_snr_csv(csv, curve);
  if (!cfg.lens.report_out.empty()) {
    RunReport report;
    report.model_name = cfg.lens.checkpoint;
    report.dataset = "needle";
    report.n_layers = model.depth();
    report.param_count = model.param_count();
    report.note = "synthetic single-fact retrieval; per-layer probe probabilities at the answer position";
    for (const auto& pt : curve) report.snr.push_back({pt.layer, pt.mean_prob, pt.sem});
    report.save(cfg.lens.report_out);
  }
  std::cout << "wrote per-layer needle probabilities to " << cfg.lens.csv_out << "\n";
  return 0;
}

int cmd_attn_dump(const CommonArgs& args, int64_t layer_flag, int64_t channel_flag, bool layer_set,
                  bool channel_set) {
  FullConfig cfg = resolve_config(args);
  if (layer_set) cfg.dump.layer = layer_flag;
  if (channel_set) cfg.dump.channel = channel_flag;
  ModelF model = load_model_or_fresh(cfg, cfg.dump.checkpoint);
  if (cfg.dump.layer < 0 || cfg.dump.layer >= model.depth())
    throw DataError("attn-dump: layer " + std::to_string(cfg.dump.layer) + " out of range for depth " +
                    std::to_string(model.depth()));

  // input bytes: file or seeded synthetic text
  std::vector<uint8_t> bytes = cfg.dump.input.empty()
                                   ? synth_corpus(cfg.dump.length, cfg.dump.seed + 7)
                                   : read_file_bytes(cfg.dump.input);
  if (static_cast<int64_t>(bytes.size()) < cfg.dump.length)
    throw DataError("attn-dump: input shorter than dump.length");
  std::vector<int32_t> tokens;
  for (int64_t i = 0; i < cfg.dump.length; ++i) tokens.push_back(static_cast<int32_t>(bytes[static_cast<size_t>(i)]));

  // residual stream right before the requested block
  Tensor<float> h = embedding(model.embed, std::span<const int32_t>(tokens));
  ForwardOptions<float> opt;
  opt.mode = cfg.model.scan_mode();
  for (int64_t l = 0; l < cfg.dump.layer; ++l) {
    Tensor<float> normed = rmsnorm(h, model.blocks[static_cast<size_t>(l)].pre_norm_gain, model.norm_eps);
    Tensor<float> out = block_forward(model.blocks[static_cast<size_t>(l)], normed, nullptr, opt, model.norm_eps);
    h = add(h, out);
  }
  Tensor<float> u = rmsnorm(h, model.blocks[static_cast<size_t>(cfg.dump.layer)].pre_norm_gain, model.norm_eps);

  Block<float>& blk = model.blocks[static_cast<size_t>(cfg.dump.layer)];
  ImplicitOperator<float> op;
  if (blk.kind == BlockKind::Mamba) {
    op = materialize_mamba(u, *blk.mamba, cfg.dump.channel);
  } else if (blk.kind == BlockKind::DiffMamba) {
    auto path_min = diff_mamba_path(*blk.dmamba, true);
    auto path_sub = diff_mamba_path(*blk.dmamba, false);
    float lam = lambda_value(blk.dmamba->lambda);
    op = materialize_diff(materialize_mamba(u, path_min, cfg.dump.channel),
                          materialize_mamba(u, path_sub, cfg.dump.channel), lam);
  } else {
    auto& ds6 = *blk.ds6;
    Tensor<float> x = silu(depthwise_causal_conv1d(linear(u, ds6.w_in_x), ds6.conv_w, ds6.conv_b));
    float lam = lambda_value(ds6.lambda);
    op = materialize_diff(materialize_s6(x, ds6.s6_min, cfg.dump.channel),
                          materialize_s6(x, ds6.s6_sub, cfg.dump.channel), lam);
  }

  std::string csv_path = cfg.dump.out_prefix + ".csv";
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw DataError("attn-dump: cannot write '" + csv_path + "'");
  int64_t l = op.length();
  for (int64_t t = 0; t < l; ++t) {
    for (int64_t s = 0; s < l; ++s) {
      if (s) csv << ",";
      csv << fmt_double(static_cast<double>(op.matrix.data()[t * l + s]), 8);
    }
    csv << "\n";
  }

  OperatorTarget target;
  if (cfg.dump.target != "self") {
    target.self = false;
    target.pos = std::stoll(cfg.dump.target);
  }
  auto st = operator_stats(op, target);
  nlohmann::json j;
  j["layer"] = cfg.dump.layer;
  j["channel"] = cfg.dump.channel;
  j["length"] = l;
  j["source"] = block_kind_name(blk.kind);
  if (op.lambda) j["lambda"] = static_cast<double>(*op.lambda);
  j["row_mass"] = st.row_mass;
  j["entropy"] = st.entropy;
  j["off_target"] = st.off_target;
  std::string json_path = cfg.dump.out_prefix + "_stats.json";
  std::ofstream js(json_path, std::ios::binary);
  if (!js) throw DataError("attn-dump: cannot write '" + json_path + "'");
  js << j.dump(2) << "\n";
  std::cout << "wrote " << csv_path << " and " << json_path << "\n";
  return 0;
}

int cmd_compare(const CommonArgs& args) {
  FullConfig cfg = resolve_config(args);
  if (cfg.compare.report_a.empty() || cfg.compare.report_b.empty())
    throw ConfigError("compare.report_a and compare.report_b are required");
  RunReport a = RunReport::load(cfg.compare.report_a);
  RunReport b = RunReport::load(cfg.compare.report_b);
  WinRatioTable t = win_ratio_table(a, b);
  std::ofstream csv(cfg.compare.out_prefix + ".csv", std::ios::binary);
  if (!csv) throw DataError("compare: cannot write '" + cfg.compare.out_prefix + ".csv'");
  write_win_ratio_csv(csv, t);
  std::ofstream js(cfg.compare.out_prefix + ".json", std::ios::binary);
  js << win_ratio_json(t) << "\n";
  write_win_ratio_csv(std::cout, t);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differential selective state-space models: training, evaluation, and analysis"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, convert_args, needle_args, lens_train_args, lens_eval_args, dump_args,
      compare_args;
  int64_t dump_layer = 0, dump_channel = 0;

  CLI::App* c_train = app.add_subcommand("train", "train a model on a byte corpus");
  add_common(c_train, train_args);
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint (ppl/bpb or needle accuracy)");
  add_common(c_eval, eval_args);
  CLI::App* c_convert = app.add_subcommand("convert", "rewrite mamba layers as diff-mamba layers");
  add_common(c_convert, convert_args);
  CLI::App* c_needle = app.add_subcommand("needle-gen", "generate the synthetic retrieval dataset");
  add_common(c_needle, needle_args);
  CLI::App* c_lens_train = app.add_subcommand("lens-train", "train per-layer affine probes");
  add_common(c_lens_train, lens_train_args);
  CLI::App* c_lens_eval = app.add_subcommand("lens-eval", "per-layer needle probabilities via the probes");
  add_common(c_lens_eval, lens_eval_args);
  CLI::App* c_dump = app.add_subcommand("attn-dump", "materialize and dump one operator matrix");
  add_common(c_dump, dump_args);
  CLI::Option* layer_opt = c_dump->add_option("--layer", dump_layer, "block index");
  CLI::Option* channel_opt = c_dump->add_option("--channel", dump_channel, "inner channel index");
  CLI::App* c_compare = app.add_subcommand("compare", "win-ratio table from two run reports");
  add_common(c_compare, compare_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (c_train->parsed()) return cmd_train(train_args);
    if (c_eval->parsed()) return cmd_eval(eval_args);
    if (c_convert->parsed()) return cmd_convert(convert_args);
    if (c_needle->parsed()) return cmd_needle_gen(needle_args);
    if (c_lens_train->parsed()) return cmd_lens_train(lens_train_args);
    if (c_lens_eval->parsed()) return cmd_lens_eval(lens_eval_args);
    if (c_dump->parsed())
      return cmd_attn_dump(dump_args, dump_layer, dump_channel, layer_opt->count() > 0,
                           channel_opt->count() > 0);
    if (c_compare->parsed()) return cmd_compare(compare_args);
    std::cerr << app.help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const ResourceError& e) {
    std::cerr << "resource error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
