#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "idn/idn.hpp"

using namespace idn;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args, const std::string& stdin_file = "") {
  std::string cmd = std::string(IDN_CLI) + " " + args + " 2>/dev/null";
  if (!stdin_file.empty()) cmd += " < " + stdin_file;
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// One checkpoint, one source and two targets, shared by the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("idn_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    const std::string cfg = std::string(IDN_CONFIG_DIR) + "/idn_toy64.json";
    ASSERT_EQ(run("init --config " + cfg + " --seed 3 --out " + p("ckpt.idnw")).code, 0);
    const Dataset d = synthetic_dataset(2, 64, 9);
    save_image(p("source.png"), d.samples[0].source);
    fs::create_directories(dir_ / "frames");
    save_image((dir_ / "frames" / frame_name(0)).string(), d.samples[0].target);
    save_image((dir_ / "frames" / frame_name(1)).string(), d.samples[1].target);
    save_image(p("small.png"), Tensor({1, 3, 60, 60}));
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& name) { return (dir_ / name).string(); }
  static std::string frame(std::size_t i) { return (dir_ / "frames" / frame_name(i)).string(); }

  static std::string specialise(const std::string& out) {
    EXPECT_EQ(run("specialize --source " + p("source.png") + " --iin " + p("ckpt.idnw") + " --out " + p(out)).code, 0);
    return p(out);
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, SpecialiseIsByteReproducible) {
  EXPECT_EQ(slurp(specialise("a.idnw")), slurp(specialise("b.idnw")));
}

TEST_F(Cli, SpecialisedFileCarriesNoIin) {
  const TensorMap m = load_idnw(specialise("c.idnw"));
  for (const auto& [k, _] : m) EXPECT_NE(k.rfind("iin.", 0), 0u) << k;
  EXPECT_NO_THROW(load_specialized(p("c.idnw")));
}

TEST_F(Cli, SwapWritesTargetSizedImage) {
  const std::string net = specialise("d.idnw");
  ASSERT_EQ(run("swap --net " + net + " --target " + frame(0) + " --out " + p("o.png")).code, 0);
  const Tensor o = load_image(p("o.png"));
  EXPECT_EQ(o.dims(), (Dims{1, 3, 64, 64}));
  const Tensor direct = load_specialized(net).swap(load_image(frame(0)));
  EXPECT_LE(max_abs_diff(o, direct), 1.0f / 255 + 1e-6f);
}

TEST_F(Cli, ZeroMaskReturnsTarget) {
  const std::string net = specialise("e.idnw");
  ASSERT_EQ(run("swap --zero-mask --net " + net + " --target " + frame(1) + " --out " + p("z.png")).code, 0);
  EXPECT_EQ(max_abs_diff(load_image(p("z.png")), load_image(frame(1))), 0.0f);
}

TEST_F(Cli, FramesMatchSingleSwaps) {
  const std::string net = specialise("f.idnw");
  ASSERT_EQ(run("swap-frames --threads 2 --net " + net + " --in-dir " + p("frames") + " --out-dir " + p("out")).code, 0);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string single = p("single" + std::to_string(i) + ".png");
    ASSERT_EQ(run("swap --net " + net + " --target " + frame(i) + " --out " + single).code, 0);
    EXPECT_EQ(slurp(single), slurp(dir_ / "out" / frame_name(i))) << i;
  }
}

TEST_F(Cli, StreamMatchesFrames) {
  const std::string net = specialise("g.idnw");
  const Image8 a = read_image(frame(0)), b = read_image(frame(1));
  {
    std::ofstream raw(p("in.rgb"), std::ios::binary);
    raw.write(reinterpret_cast<const char*>(a.rgb.data()), long(a.rgb.size()));
    raw.write(reinterpret_cast<const char*>(b.rgb.data()), long(b.rgb.size()));
  }
  const CliRun r = run("swap-stream --net " + net, p("in.rgb"));
  ASSERT_EQ(r.code, 0);
  ASSERT_EQ(r.out.size(), 2 * a.rgb.size());
  const Image8 expect = from_tensor(load_specialized(net).swap(to_tensor(b)));
  EXPECT_EQ(std::memcmp(r.out.data() + a.rgb.size(), expect.rgb.data(), expect.rgb.size()), 0);
}

TEST_F(Cli, InputErrorsExitTwo) {
  const std::string net = specialise("h.idnw");
  EXPECT_EQ(run("swap --net " + net + " --target " + p("nope.png") + " --out " + p("x.png")).code, 2);
  EXPECT_EQ(run("swap --net " + net + " --target " + p("small.png") + " --out " + p("x.png")).code, 2);
  EXPECT_EQ(run("swap --net " + p("source.png") + " --target " + frame(0) + " --out " + p("x.png")).code, 2);
  EXPECT_EQ(run("swap --net " + net + " --target " + frame(0) + " --out " + p("x.jpg")).code, 2);
  EXPECT_EQ(run("specialize --source " + p("source.png") + " --iin " + p("ckpt.idnw")).code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("account --config " + p("missing.json")).code, 2);
}

TEST_F(Cli, AccountReportsDefaultBudget) {
  const CliRun r = run("account --config " + std::string(IDN_CONFIG_DIR) + "/idn_default.json");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("params_total=494146"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("macs_total=334047896"), std::string::npos) << r.out;
}

TEST_F(Cli, BenchReportsRate) {
  const CliRun r = run("bench --frames 3 --net " + specialise("i.idnw"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("fps="), std::string::npos) << r.out;
}

TEST_F(Cli, TrainWritesArtifacts) {
  const std::string data = p("data16");
  ASSERT_EQ(run("synth-data --out " + data + " --count 4 --size 16 --seed 2").code, 0);
  const CliRun r = run("train --config " + std::string(IDN_CONFIG_DIR) + "/toy_one_stage.json --data " + data +
                    " --teacher synthetic --steps 3 --batch 2 --seed 1 --out " + p("run"));
  ASSERT_EQ(r.code, 0);
  for (const char* f : {"checkpoint.idnw", "discriminator.idnw", "log.csv", "summary.json", "scorer.idnw"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }
  std::ifstream log(dir_ / "run" / "log.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4u);  // header + one row per step
  EXPECT_NO_THROW(load_checkpoint(p("run/checkpoint.idnw")));
}

TEST_F(Cli, VerifyPasses) {
  const CliRun r = run("verify");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}
