#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sys/wait.h>
#include <unistd.h>

#include "ftn/checkpoint.hpp"
#include "ftn/image_io.hpp"
#include "ftn/tensor_io.hpp"
#include "test_util.hpp"

using namespace ftn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status;
  std::string out;  // stdout
  std::string all;  // stdout + stderr
};

std::string slurp_command(const std::string& cmd, int& status) {
  std::string text;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  std::array<char, 4096> buf;
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) text.append(buf.data(), n);
  const int rc = pclose(pipe);
  status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return text;
}

Run cli(const std::string& args) {
  const std::string base = std::string(FTN_CLI_PATH) + " " + args;
  Run r;
  int ignored = 0;
  r.out = slurp_command(base + " 2>/dev/null", ignored);
  r.all = slurp_command(base + " 2>&1", r.status);
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ftn_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& leaf) const { return (dir_ / leaf).string(); }

  fs::path dir_;
};

double number_after(const std::string& text, const std::string& label) {
  std::smatch m;
  const std::regex re(label + R"(\s+([0-9.eE+-]+))");
  if (!std::regex_search(text, m, re)) throw std::runtime_error("no '" + label + "' in output:\n" + text);
  return std::stod(m[1]);
}

}  // namespace

TEST_F(CliTest, ParamsSmallIsNear28M) {
  auto r = cli("params S");
  ASSERT_EQ(r.status, 0) << r.all;
  EXPECT_NEAR(number_after(r.out, "encoder params"), 28e6, 0.05 * 28e6);
  auto with = cli("params S --with-decoder");
  ASSERT_EQ(with.status, 0);
  EXPECT_NE(with.out.find("decoder params"), std::string::npos);
  EXPECT_NE(with.out.find("auxiliary head params"), std::string::npos);
}

TEST_F(CliTest, DescribeTinyPrintsStageTokenCounts) {
  auto r = cli("describe T");
  ASSERT_EQ(r.status, 0) << r.all;
  for (const char* tokens : {"3136", "784", "196", "49"}) EXPECT_NE(r.out.find(tokens), std::string::npos) << tokens;
  EXPECT_NE(r.out.find("groups = 64 16 1 1"), std::string::npos);
}

TEST_F(CliTest, FlopsBaseIsNear9Point1) {
  auto r = cli("flops B --size 224 224");
  ASSERT_EQ(r.status, 0) << r.all;
  EXPECT_NEAR(number_after(r.out, "GFLOPs"), 9.1, 0.15 * 9.1);
}

TEST_F(CliTest, GradcheckSeedSevenPasses) {
  auto r = cli("gradcheck --seed 7");
  ASSERT_EQ(r.status, 0) << r.all;
  EXPECT_GE(number_after(r.out, "coordinates"), 200);
  EXPECT_LT(number_after(r.out, "max relative error"), 1e-3);
}

TEST_F(CliTest, DeriveVariantsListsFourRows) {
  auto r = cli("derive-variants");
  ASSERT_EQ(r.status, 0) << r.all;
  for (const char* row : {"\nT ", "\nS ", "\nB ", "\nL "}) EXPECT_NE(r.out.find(row), std::string::npos) << row;
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  for (const char* args : {"", "params", "params Q", "flops T --size 224", "frobnicate", "describe T --bogus",
                           "forward --input /no/such/file --output x"}) {
    auto r = cli(args);
    EXPECT_EQ(r.status, 2) << args << "\n" << r.all;
    EXPECT_EQ(r.all.rfind("error[usage]: ", 0), 0u) << args << "\n" << r.all;
    EXPECT_EQ(std::count(r.all.begin(), r.all.end(), '\n'), 1) << r.all;
  }
}

TEST_F(CliTest, RuntimeFailuresExitOneWithKind) {
  auto geometry = cli("flops T --size 200 200");
  EXPECT_EQ(geometry.status, 1);
  EXPECT_EQ(geometry.all.rfind("error[layout]: ", 0), 0u) << geometry.all;

  std::ofstream(path("bad.cfg")) << "encoder.variant = T\nencoder.depths = 1 2\n";
  std::ofstream(path("in.ftnt")) << "not a tensor";
  auto config = cli("forward --config " + path("bad.cfg") + " --input " + path("in.ftnt") + " --output " +
                    path("o.ftnt"));
  EXPECT_EQ(config.status, 1);
  EXPECT_EQ(config.all.rfind("error[config]: ", 0), 0u) << config.all;
  EXPECT_NE(config.all.find("line 2"), std::string::npos) << config.all;
}

TEST_F(CliTest, HelpDocumentsTheCostConvention) {
  auto r = cli("--help");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("multiply-accumulate counts as one FLOP"), std::string::npos) << r.out;
}

TEST_F(CliTest, OutputIsDeterministic) {
  for (const char* args : {"describe L", "params B --with-decoder --rows", "flops S --rows", "derive-variants"}) {
    auto a = cli(args), b = cli(args);
    EXPECT_EQ(a.out, b.out) << args;
  }
}

TEST_F(CliTest, ForwardMatchesLibrary) {
  std::ofstream(path("micro.cfg")) << "preset = micro\nseed = 5\ndecoder.num_classes = 3\n";
  Rng rng(1);
  auto img = ftn::testing::random_tensor({1, 32, 64, 3}, rng, 0, 1);
  save_tensor(path("img.ftnt"), img);
  auto r = cli("forward --config " + path("micro.cfg") + " --input " + path("img.ftnt") + " --output " +
               path("logits.ftnt"));
  ASSERT_EQ(r.status, 0) << r.all;
  auto cfg = micro_config(3);
  cfg.seed = 5;
  auto model = FTNModel<float>::create(cfg);
  EXPECT_EQ(load_tensor(path("logits.ftnt")).to_vector(), forward(model, img).to_vector());
}

TEST_F(CliTest, TrainSaveAndSegment) {
  auto r = cli("train-toy --steps 3 --seed 2 --size 32 --batch 1 --eval 2 --out " + path("trace.csv") + " --save " +
               path("model.ftnc"));
  ASSERT_EQ(r.status, 0) << r.all;
  std::ifstream csv(path("trace.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "step,loss,lr");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3u);

  auto sample = make_toy_sample(32, 32, 2, 77, true);
  save_ppm(path("in.ppm"), Tensor({1, 32, 32, 3}, sample.image));
  auto seg = cli("segment --checkpoint " + path("model.ftnc") + " --image " + path("in.ppm") + " --out " +
                 path("labels.pgm"));
  ASSERT_EQ(seg.status, 0) << seg.all;

  auto model = load_checkpoint<float>(path("model.ftnc"));
  const auto want = argmax_labels(forward(model, load_ppm(path("in.ppm"))));
  std::ifstream pgm(path("labels.pgm"), std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  pgm >> magic >> w >> h >> maxval;
  pgm.get();
  ASSERT_EQ(magic, "P5");
  ASSERT_EQ(w * h, want.size());
  for (int label : want) EXPECT_EQ(pgm.get(), label);

  // A truncated checkpoint is a runtime failure naming the offset.
  const auto size = fs::file_size(path("model.ftnc"));
  fs::copy_file(path("model.ftnc"), path("cut.ftnc"));
  fs::resize_file(path("cut.ftnc"), size / 2);
  auto cut = cli("segment --checkpoint " + path("cut.ftnc") + " --image " + path("in.ppm") + " --out " +
                 path("x.pgm"));
  EXPECT_EQ(cut.status, 1);
  EXPECT_EQ(cut.all.rfind("error[format]: ", 0), 0u) << cut.all;
  EXPECT_NE(cut.all.find("byte offset"), std::string::npos) << cut.all;
}
