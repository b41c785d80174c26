#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "mmlg/metrics.hpp"
#include "mmlg/model_io.hpp"

namespace mmlg {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("mmlg-cli-" + std::to_string(::getpid()) + "-" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  // Runs the driver with stdout and stderr captured together.
  CliResult run(const std::string& args) const {
    const auto log = dir / "last.log";
    const std::string cmd = std::string(MMLG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
  }

  std::string p(const std::string& name) const { return (dir / name).string(); }
  static std::string tiny() { return std::string(MMLG_SOURCE_DIR) + "/configs/tiny.ini"; }
  static std::string desk() { return std::string(MMLG_SOURCE_DIR) + "/configs/desk.ini"; }

  static std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  // Ancestor and bank for the tiny config.
  void make_bank() {
    ASSERT_EQ(run("pretrain-ancestor --config " + tiny() + " --out " + p("anc.ckpt")).code, 0);
    ASSERT_EQ(run("extract --config " + tiny() + " --teacher " + p("anc.ckpt") + " --out " + p("bank.ckpt")).code, 0);
  }

  fs::path dir;
};

TEST_F(Cli, GradcheckPasses) {
  const auto r = run("gradcheck --scale tiny");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("lambda=1"), std::string::npos);
  EXPECT_EQ(r.out.find("FAILED"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("init --layers 6 --mode sideways --out " + p("x")).code, 1);
  EXPECT_EQ(run("pretrain-ancestor --config /nonexistent.ini --out " + p("x")).code, 1);
  EXPECT_EQ(run("init --layers 6 --mode full --out " + p("x")).code, 1);
}

TEST_F(Cli, UnsupportedDepthExitsOne) {
  const auto r = run("init --config " + desk() + " --mode scratch --layers 13 --out " + p("d13.ckpt"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("unsupported descendant depth 13"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(p("d13.ckpt")));
}

TEST_F(Cli, DeskScratchDescendantShape) {
  ASSERT_EQ(run("init --config " + desk() + " --mode scratch --layers 8 --out " + p("d8.ckpt")).code, 0);
  const auto m = load_model<float>(p("d8.ckpt"));
  EXPECT_EQ(m.depth(), 8u);
  EXPECT_EQ(m.config.width, 32u);
  EXPECT_TRUE(m.params.contains("text.layer.07.wq"));
  EXPECT_FALSE(m.params.contains("text.layer.08.wq"));
}

TEST_F(Cli, TinyPipelineEndToEnd) {
  make_bank();
  ASSERT_EQ(run("init --bank " + p("bank.ckpt") + " --layers 3 --mode full --seed 4 --out " + p("d3.ckpt")).code, 0);
  {
    // Depth 3 from two pairs: layers 0 and 1 repeat pair 0.
    const auto m = load_model<float>(p("d3.ckpt"));
    EXPECT_EQ(m.params.at("vision.layer.00.wq").value, m.params.at("vision.layer.01.wq").value);
    EXPECT_FALSE(m.params.at("vision.layer.01.wq").value == m.params.at("vision.layer.02.wq").value);
  }
  EXPECT_EQ(run("init --bank " + p("bank.ckpt") + " --layers 5 --out " + p("d5.ckpt")).code, 1);

  auto r = run("activate --model " + p("d3.ckpt") + " --config " + tiny() + " --out " + p("act.ckpt") +
               " --metrics " + p("act.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto recs = read_metrics(p("act.jsonl"));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].stage, "activate");

  r = run("finetune --task retrieval --model " + p("act.ckpt") + " --config " + tiny() + " --out " + p("ret.ckpt"));
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("eval --task retrieval --model " + p("ret.ckpt") + " --config " + tiny() + " --data downstream-test");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("I2T R@1"), std::string::npos);
  EXPECT_NE(r.out.find("\"name\":\"t2i_r5\""), std::string::npos);

  r = run("finetune --task classify --model " + p("act.ckpt") + " --config " + tiny() + " --out " + p("cls.ckpt"));
  ASSERT_EQ(r.code, 0) << r.out;
  ASSERT_EQ(run("export-data --config " + tiny() + " --split downstream-test --out " + p("test.data")).code, 0);
  r = run("eval --task classify --model " + p("cls.ckpt") + " --data " + p("test.data") + " --metrics " +
          p("eval.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("8 examples, 4 classes"), std::string::npos) << r.out;
  const auto ev = read_metrics(p("eval.jsonl"));
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(ev[0].name, "top1");
  EXPECT_GE(ev[0].value, 0.0);
  EXPECT_LE(ev[0].value, 100.0);

  // A classifier cannot be evaluated for retrieval.
  EXPECT_EQ(run("eval --task retrieval --model " + p("cls.ckpt") + " --data " + p("test.data")).code, 1);
}

TEST_F(Cli, StagesAreDeterministic) {
  for (const char* tag : {"a", "b"}) {
    const std::string t(tag);
    ASSERT_EQ(run("pretrain-ancestor --config " + tiny() + " --out " + p("anc" + t) + " --metrics " + p("pre" + t)).code, 0);
    ASSERT_EQ(run("extract --config " + tiny() + " --teacher " + p("anca") + " --out " + p("bank" + t) +
                  " --metrics " + p("ext" + t))
                  .code,
              0);
  }
  EXPECT_EQ(slurp(p("anca")), slurp(p("ancb")));
  EXPECT_EQ(slurp(p("banka")), slurp(p("bankb")));
  EXPECT_EQ(slurp(p("prea")), slurp(p("preb")));
  EXPECT_EQ(slurp(p("exta")), slurp(p("extb")));
  EXPECT_EQ(read_metrics(p("exta")).size(), 2u * 4u);
}

TEST_F(Cli, NonFiniteTrainingExitsTwo) {
  make_bank();
  ASSERT_EQ(run("init --bank " + p("bank.ckpt") + " --layers 4 --out " + p("d4.ckpt")).code, 0);
  auto m = load_model<float>(p("d4.ckpt"));
  m.params.at("logit_scale").value[0] = NAN;
  save_model(m, p("nan.ckpt"));
  const auto r = run("activate --model " + p("nan.ckpt") + " --config " + tiny() + " --out " + p("o.ckpt"));
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_FALSE(fs::exists(p("o.ckpt")));
}

TEST_F(Cli, StorageReport) {
  const auto r = run("storage-report --config " + desk() + " --depths 6,8,12");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("descendant-12"), std::string::npos);
  EXPECT_NE(r.out.find("\"name\":\"block_ratio\""), std::string::npos);
  EXPECT_EQ(run("storage-report --config " + desk() + " --depths 6,14").code, 1);
}

}  // namespace
}  // namespace mmlg
