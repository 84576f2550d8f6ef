// End-to-end CLI tests against the built binary: exit codes, usage handling,
// config overrides, and the dump/eval/compare workflows.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dssm/corpus.hpp"
#include "dssm/report.hpp"

using namespace dssm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& n) const { return (path / n).string(); }
};

int run_cli(const std::string& args, const std::string& out_file = "/dev/null") {
  std::string cmd = std::string(DSSM_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace

TEST_CASE("no arguments prints usage and exits 1") {
  TempDir tmp("dssm_cli_usage");
  int rc = run_cli("", tmp.file("out.txt"));
  CHECK(rc == 1);
  std::string out = read_file(tmp.file("out.txt"));
  CHECK(out.find("train") != std::string::npos);
}

TEST_CASE("unknown subcommand exits 1") {
  CHECK(run_cli("frobnicate") == 1);
}

TEST_CASE("config errors exit 1, data errors exit 2") {
  TempDir tmp("dssm_cli_errors");
  write_file(tmp.file("bad.cfg"), "[model]\nnot_a_real_key = 3\n");
  CHECK(run_cli("needle-gen --config " + tmp.file("bad.cfg")) == 1);
  // missing checkpoint file -> data error
  write_file(tmp.file("eval.cfg"), "[eval]\ncheckpoint = " + tmp.file("nope.ckpt") + "\n");
  CHECK(run_cli("eval --config " + tmp.file("eval.cfg")) == 2);
}

TEST_CASE("needle-gen and attn-dump workflows") {
  TempDir tmp("dssm_cli_flow");
  auto corpus = synth_corpus(1 << 14, 3);
  std::ofstream(tmp.file("c.txt"), std::ios::binary)
      .write(reinterpret_cast<const char*>(corpus.data()), static_cast<std::streamsize>(corpus.size()));

  SUBCASE("needle-gen writes the dataset and honors --set") {
    write_file(tmp.file("n.cfg"), "[needle]\ncount = 6\ncontext_lengths = 64\nfiller = " + tmp.file("c.txt") +
                                      "\nout = " + tmp.file("needle.json") + "\n");
    CHECK(run_cli("needle-gen --config " + tmp.file("n.cfg")) == 0);
    CHECK(fs::exists(tmp.file("needle.json")));
    CHECK(run_cli("needle-gen --config " + tmp.file("n.cfg") + " --set needle.out=" + tmp.file("n2.json")) == 0);
    CHECK(fs::exists(tmp.file("n2.json")));
  }

  SUBCASE("attn-dump emits a lower-triangular LxL csv plus stats json") {
    write_file(tmp.file("d.cfg"),
               "[model]\nd_model = 16\ndepth = 1\nd_state = 4\n[dump]\nlength = 16\nout_prefix = " +
                   tmp.file("op") + "\n");
    CHECK(run_cli("attn-dump --config " + tmp.file("d.cfg") + " --layer 0 --channel 0") == 0);
    std::string csv = read_file(tmp.file("op.csv"));
    int rows = 0;
    std::istringstream is(csv);
    std::string line;
    while (std::getline(is, line)) {
      int cols = 1;
      for (char ch : line) cols += (ch == ',');
      CHECK(cols == 16);
      // strictly causal: entries beyond the diagonal are exactly zero
      std::istringstream ls(line);
      std::string cell;
      int c = 0;
      while (std::getline(ls, cell, ',')) {
        if (c > rows) CHECK(cell == "0");
        ++c;
      }
      ++rows;
    }
    CHECK(rows == 16);
    CHECK(fs::exists(tmp.file("op_stats.json")));
  }
}

TEST_CASE("train then eval reprints the pinned metric deterministically") {
  TempDir tmp("dssm_cli_train");
  auto corpus = synth_corpus(1 << 14, 5);
  std::ofstream(tmp.file("c.txt"), std::ios::binary)
      .write(reinterpret_cast<const char*>(corpus.data()), static_cast<std::streamsize>(corpus.size()));
  write_file(tmp.file("t.cfg"),
             "[model]\nd_model = 16\ndepth = 1\nd_state = 4\nconv_k = 3\n"
             "[train]\ndataset = " + tmp.file("c.txt") +
                 "\nmax_seq_len = 32\nbatch_size = 2\nlr = 0.002\nwarmup_steps = 5\ntotal_steps = 30\n"
                 "eval_interval = 15\neval_max_windows = 4\nout_dir = " + tmp.file("out") + "\n");
  REQUIRE(run_cli("train --config " + tmp.file("t.cfg")) == 0);
  REQUIRE(fs::exists(tmp.file("out/final.ckpt")));

  std::string eval_args = "eval --config " + tmp.file("t.cfg") + " --set eval.checkpoint=" +
                          tmp.file("out/final.ckpt") + " --set eval.report_out=";
  REQUIRE(run_cli(eval_args + tmp.file("r1.json"), tmp.file("e1.txt")) == 0);
  REQUIRE(run_cli(eval_args + tmp.file("r2.json"), tmp.file("e2.txt")) == 0);
  RunReport r1 = RunReport::load(tmp.file("r1.json"));
  RunReport r2 = RunReport::load(tmp.file("r2.json"));
  double ppl1 = r1.metrics.at("test.ppl"), ppl2 = r2.metrics.at("test.ppl");
  CHECK(std::fabs(ppl1 - ppl2) / ppl1 <= 1e-4);
  CHECK(read_file(tmp.file("e1.txt")) == read_file(tmp.file("e2.txt")));
}

TEST_CASE("compare emits the win-ratio files") {
  TempDir tmp("dssm_cli_compare");
  RunReport a, b;
  a.model_name = "A";
  b.model_name = "B";
  for (const char* task : {"begin", "middle", "end"}) {
    a.grid.push_back({task, 64, 0.6});
    b.grid.push_back({task, 64, 0.3});
  }
  a.save(tmp.file("a.json"));
  b.save(tmp.file("b.json"));
  int rc = run_cli("compare --set compare.report_a=" + tmp.file("a.json") +
                   " --set compare.report_b=" + tmp.file("b.json") +
                   " --set compare.out_prefix=" + tmp.file("cmp"));
  CHECK(rc == 0);
  std::string csv = read_file(tmp.file("cmp.csv"));
  CHECK(csv.find("task,context_len,score_a,score_b,ratio,winner") != std::string::npos);
  CHECK(csv.find(",2,a") != std::string::npos);
  CHECK(fs::exists(tmp.file("cmp.json")));
}
