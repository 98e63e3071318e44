#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "roundfit/cli.hpp"
#include "roundfit/tensor_file.hpp"

using namespace roundfit;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "roundfit");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("roundfit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  static std::vector<std::string> small_model() {
    return {"--vocab", "32", "--d-model", "8", "--heads", "2", "--layers", "2", "--d-ff", "16", "--max-seq-len", "16"};
  }

  static std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  std::filesystem::path dir_;
};

}  // namespace

TEST_F(CliTest, InitThenQuantizeIsDeterministic) {
  ASSERT_EQ(run(with({"init", "--seed", "3", "--out", path("fp.rftf")}, small_model())).code, 0);
  const std::vector<std::string> q{"quantize", "--model", path("fp.rftf"), "--bits", "2", "--group-size", "8",
                                   "--steps", "5", "--seqlen", "16", "--nsamples", "8", "--seed", "1"};
  ASSERT_EQ(run(with(q, {"--out", path("a.rftf")})).code, 0);
  ASSERT_EQ(run(with(q, {"--out", path("b.rftf"), "--stats", path("s.csv")})).code, 0);
  EXPECT_EQ(read_file_bytes(path("a.rftf")), read_file_bytes(path("b.rftf")));
  EXPECT_TRUE(std::filesystem::exists(path("a.rftf.json")));
  EXPECT_TRUE(std::filesystem::exists(path("s.csv")));
  const TensorFile f = load_tensors(path("a.rftf"));
  EXPECT_EQ(f.meta["kind"], "quantized_model");
  EXPECT_EQ(f.meta["report"]["blocks"].size(), 2u);
}

TEST_F(CliTest, QuantizeDefaultsAndRtnReport) {
  const CliRun r = run(with({"quantize", "--init-seed", "0", "--method", "rtn", "--seqlen", "16", "--nsamples", "4",
                          "--out", path("q.rftf")},
                         small_model()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bytes = read_file_bytes(path("q.rftf.json"));
  const auto rep = nlohmann::json::parse(bytes.begin(), bytes.end());
  EXPECT_EQ(rep["tuning"]["method"], "rtn");
  for (const auto& b : rep["blocks"]) EXPECT_EQ(b["tuned_loss"], b["rtn_loss"]);
}

TEST_F(CliTest, SignRoundReportCarriesDefaults) {
  const CliRun r = run(with({"quantize", "--init-seed", "0", "--steps", "2", "--seqlen", "16", "--nsamples", "8", "--out",
                          path("q.rftf")},
                         small_model()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bytes = read_file_bytes(path("q.rftf.json"));
  const auto rep = nlohmann::json::parse(bytes.begin(), bytes.end());
  EXPECT_EQ(rep["tuning"]["lr0"], 5e-3);
  EXPECT_EQ(rep["tuning"]["batch_size"], 8);
  EXPECT_EQ(rep["tuning"]["optimizer"], "signsgd");
  EXPECT_EQ(rep["tuning"]["mode"], "both");
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"bogus"}).code, 1);
  EXPECT_EQ(run({"quantize", "--init-seed", "0", "--method", "rtn", "--steps", "5", "--out", path("x")}).code, 1);
  EXPECT_EQ(run({"quantize", "--init-seed", "0", "--bits", "5", "--out", path("x")}).code, 1);
  EXPECT_EQ(run({"quantize", "--out", path("x")}).code, 1);
  EXPECT_EQ(run({"eval", "--model", path("missing.rftf")}).code, 1);
  EXPECT_EQ(run({"quantize", "--init-seed", "0", "--calib", path("missing.txt"), "--out", path("x")}).code, 1);
}

TEST_F(CliTest, CorruptModelFileExitsOne) {
  write_file_bytes(path("bad.rftf"), std::vector<std::uint8_t>{'R', 'F', 'T', 'F', '1', 9, 0});
  const CliRun r = run({"eval", "--model", path("bad.rftf")});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, EvalAgainstItselfHasZeroBlockMse) {
  ASSERT_EQ(run(with({"init", "--out", path("fp.rftf")}, small_model())).code, 0);
  const auto before = read_file_bytes(path("fp.rftf"));
  const CliRun r = run({"eval", "--model", path("fp.rftf"), "--reference", path("fp.rftf"), "--ntokens", "500", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  for (const char* k : {"model", "kind", "tokens", "ppl", "block_mse"}) EXPECT_TRUE(j.contains(k)) << k;
  ASSERT_EQ(j["block_mse"].size(), 2u);
  for (const auto& v : j["block_mse"]) EXPECT_EQ(v.get<double>(), 0.0);
  EXPECT_EQ(read_file_bytes(path("fp.rftf")), before);
}

TEST_F(CliTest, OracleAndGradcheck) {
  const CliRun grid = run({"oracle", "--fixture", "grid", "--steps", "50", "--json"});
  ASSERT_EQ(grid.code, 0) << grid.err;
  EXPECT_EQ(nlohmann::json::parse(grid.out)["optimal_mse"], 0.0);
  EXPECT_EQ(run({"oracle", "--steps", "200", "--max-gap", "100"}).code, 0);
  const CliRun tight = run({"oracle", "--seed", "0", "--steps", "1", "--max-gap", "0.5"});
  EXPECT_EQ(tight.code, 2);
  EXPECT_NE(tight.err.find("FAIL"), std::string::npos);
  EXPECT_EQ(run({"oracle", "--width", "17"}).code, 1);
  EXPECT_EQ(run({"gradcheck", "--seed", "1"}).code, 0);
}

TEST_F(CliTest, CompareGridRowCount) {
  const CliRun r = run(with({"compare", "--init-seed", "0", "--grid", "signsgd:5e-3,adam:1e-2", "--steps", "3",
                          "--seqlen", "16", "--nsamples", "8", "--ntokens", "300", "--out", path("cmp.json")},
                         small_model()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bytes = read_file_bytes(path("cmp.json"));
  EXPECT_EQ(nlohmann::json::parse(bytes.begin(), bytes.end())["rows"].size(), 2u);
}
