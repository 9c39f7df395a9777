// Copyright 2026 The knz Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "knz/knz.hpp"
#include "model_util.hpp"
#include "test_util.hpp"

namespace knz {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("knz_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  CliRun knz(const std::string& args, const std::string& env = "") const {
    const std::string cmd = env + " " + KNZ_CLI_PATH + " " + args + " >" + p("stdout") + " 2>" + p("stderr");
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout");
    r.err = slurp(dir_ / "stderr");
    return r;
  }

  // Desk teacher, its compressed student and a synthetic corpus.
  void prepare(std::size_t corpus_bytes = 200000) {
    ASSERT_EQ(knz("--seed 11 init -o " + p("teacher.ktnz")).code, 0);
    ASSERT_EQ(knz("--seed 7 corpus -o " + p("corpus.txt") + " --bytes " + std::to_string(corpus_bytes)).code, 0);
    const CliRun r = knz("--seed 1 compress -i " + p("teacher.ktnz") + " -o " + p("student.ktnz") + " --report " +
                      p("report.json"));
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path dir_;
};

TEST_F(Cli, UsageErrorsExitNonzeroWithDiagnostics) {
  EXPECT_NE(knz("").code, 0);
  EXPECT_NE(knz("frobnicate").code, 0);
  const CliRun missing = knz("compress -i " + p("nope.ktnz") + " -o " + p("x.ktnz"));
  EXPECT_NE(missing.code, 0);
  EXPECT_FALSE(missing.err.empty());
  const CliRun bad_seed = knz("corpus -o " + p("c.txt"), "KNZ_SEED=abc");
  EXPECT_NE(bad_seed.code, 0);
  EXPECT_NE(bad_seed.err.find("KNZ_SEED"), std::string::npos);
}

TEST_F(Cli, CompressFactorOneIsRejected) {
  ASSERT_EQ(knz("init -o " + p("t.ktnz")).code, 0);
  const CliRun r = knz("compress -i " + p("t.ktnz") + " -o " + p("s.ktnz") + " --layers all --factor 1");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--factor must exceed 1"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(p("s.ktnz")));
  EXPECT_NE(knz("compress -i " + p("t.ktnz") + " -o " + p("s.ktnz") + " --layers 0,9").code, 0);
  EXPECT_NE(knz("compress -i " + p("t.ktnz") + " -o " + p("s.ktnz") + " --embedding-factor 3").code, 0);
}

TEST_F(Cli, CompressReportMatchesAnalyticFactorAndResiduals) {
  prepare();
  const json report = json::parse(slurp(p("report.json")));
  const TinyGPTModel teacher = load_model(p("teacher.ktnz"));
  const TinyGPTModel student = load_model(p("student.ktnz"));
  const double analytic = static_cast<double>(param_count(teacher.config, CompressionSchedule::none(), false)) /
                          static_cast<double>(param_count(teacher.config, CompressionSchedule::odd_layers(), false));
  const double reported = report.at("totals").at("compression_factor").get<double>();
  EXPECT_NEAR(reported, analytic, 0.01 * analytic);

  // Residuals recomputed from the two checkpoints.
  TinyGPTModel t = teacher, s = student;
  const TinyGPTModel dense = testing::materialize_model(student);
  TinyGPTModel d = dense;
  std::size_t checked = 0, before = 0, after = 0;
  for (const json& e : report.at("tensors")) {
    before += e.at("params_before").get<std::size_t>();
    after += e.at("params_after").get<std::size_t>();
    if (e.at("factor_shapes").is_null()) continue;
    const std::string name = e.at("name");
    const Matrix* w = testing::find_parameter(t, name);
    const Matrix* approx = testing::find_parameter(d, name);
    ASSERT_NE(w, nullptr);
    ASSERT_NE(approx, nullptr) << name;
    const double recomputed = testing::fro(sub(*w, *approx)) / testing::fro(*w);
    EXPECT_NEAR(e.at("relative_residual").get<double>(), recomputed, 1e-9) << name;
    ++checked;
  }
  EXPECT_EQ(checked, 13u);
  EXPECT_EQ(report.at("totals").at("params_before").get<std::size_t>(), before);
  EXPECT_EQ(report.at("totals").at("params_after").get<std::size_t>(), after);
  const json& excl = report.at("totals_excluding_lm_head");
  EXPECT_EQ(excl.at("params_before").get<std::size_t>(), param_count(teacher.config, CompressionSchedule::none(), true));
  EXPECT_EQ(excl.at("params_after").get<std::size_t>(),
            param_count(teacher.config, CompressionSchedule::odd_layers(), true));
  EXPECT_EQ(after, param_count(s, false));
}

TEST_F(Cli, SeededCommandsAreByteDeterministic) {
  prepare(100000);
  ASSERT_EQ(knz("--seed 1 compress -i " + p("teacher.ktnz") + " -o " + p("student2.ktnz")).code, 0);
  EXPECT_EQ(slurp(p("student.ktnz")), slurp(p("student2.ktnz")));
  ASSERT_EQ(knz("compress -i " + p("teacher.ktnz") + " -o " + p("student3.ktnz"), "KNZ_SEED=1").code, 0);
  EXPECT_EQ(slurp(p("student.ktnz")), slurp(p("student3.ktnz")));

  const std::string train = "train --teacher " + p("teacher.ktnz") + " --student " + p("student.ktnz") +
                            " --corpus " + p("corpus.txt") + " --steps 3 --batch 2 --seq-len 16 --fixed-clock";
  ASSERT_EQ(knz("--seed 4 " + train + " -o " + p("a.ktnz") + " --metrics " + p("a.jsonl")).code, 0);
  ASSERT_EQ(knz("--seed 4 " + train + " -o " + p("b.ktnz") + " --metrics " + p("b.jsonl")).code, 0);
  EXPECT_EQ(slurp(p("a.ktnz")), slurp(p("b.ktnz")));
  EXPECT_EQ(slurp(p("a.jsonl")), slurp(p("b.jsonl")));
  ASSERT_EQ(knz("--seed 5 " + train + " -o " + p("c.ktnz")).code, 0);
  EXPECT_NE(slurp(p("a.ktnz")), slurp(p("c.ktnz")));

  ASSERT_EQ(knz("--seed 3 bench --fixed-clock -o " + p("b1.csv")).code, 0);
  ASSERT_EQ(knz("--seed 3 bench --fixed-clock -o " + p("b2.csv")).code, 0);
  EXPECT_EQ(slurp(p("b1.csv")), slurp(p("b2.csv")));
}

TEST_F(Cli, TrainModeNoneCopiesStudent) {
  prepare(50000);
  const CliRun r = knz("train --teacher " + p("teacher.ktnz") + " --student " + p("student.ktnz") + " --corpus " +
                    p("corpus.txt") + " --mode none -o " + p("out.ktnz"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(p("out.ktnz")), slurp(p("student.ktnz")));
  EXPECT_NE(knz("train --student " + p("student.ktnz") + " --corpus " + p("corpus.txt") + " --mode kd -o " +
                p("kd.ktnz"))
                .code,
            0);
}

TEST_F(Cli, AlphaDegeneracyMatchesLmMode) {
  prepare(100000);
  const std::string base = "--seed 9 train --teacher " + p("teacher.ktnz") + " --student " + p("student.ktnz") +
                           " --corpus " + p("corpus.txt") + " --steps 3 --batch 2 --seq-len 16 --fixed-clock";
  ASSERT_EQ(knz(base + " --mode lm -o " + p("lm.ktnz") + " --metrics " + p("lm.jsonl")).code, 0);
  ASSERT_EQ(knz(base + " --mode lm+kd --alphas 0,0,0,1 -o " + p("al.ktnz") + " --metrics " + p("al.jsonl")).code, 0);
  EXPECT_EQ(slurp(p("lm.jsonl")), slurp(p("al.jsonl")));
  EXPECT_EQ(slurp(p("lm.ktnz")), slurp(p("al.ktnz")));
}

TEST_F(Cli, DefaultWeightsAppearInMetrics) {
  prepare(100000);
  const CliRun r = knz("--seed 2 train --teacher " + p("teacher.ktnz") + " --student " + p("student.ktnz") +
                    " --corpus " + p("corpus.txt") + " --mode lm+kd --alphas 0.5,0.5,0.5,0.1 --steps 4 --batch 2" +
                    " --seq-len 16 --lr 1e-3 -o " + p("out.ktnz") + " --metrics " + p("m.jsonl"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("steps 4"), std::string::npos);
  const std::vector<StepMetrics> h = read_metrics_jsonl(p("m.jsonl"));
  ASSERT_EQ(h.size(), 4u);
  for (const StepMetrics& m : h) {
    EXPECT_NEAR(m.l_total, 0.5 * m.l_emb + 0.5 * m.l_att + 0.5 * m.l_hid + 0.1 * m.l_ce, 1e-12 * m.l_total);
    EXPECT_GT(m.l_att, 0.0);
    EXPECT_GT(m.l_hid, 0.0);
  }
  EXPECT_NE(knz("train --teacher " + p("teacher.ktnz") + " --student " + p("student.ktnz") + " --corpus " +
                p("corpus.txt") + " --alphas 1,2 -o " + p("x.ktnz"))
                .code,
            0);
}

TEST_F(Cli, EvalUntrainedNearUniformAndDefinitional) {
  prepare(100000);
  const CliRun r = knz("eval -m " + p("teacher.ktnz") + " --corpus " + p("corpus.txt") + " --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  const double ppl = j.at("perplexity").get<double>();
  EXPECT_NEAR(ppl, 256.0, 0.05 * 256.0);
  EXPECT_NEAR(ppl, std::exp(j.at("cross_entropy").get<double>()), 1e-9);
  EXPECT_EQ(j.at("tokens").get<std::size_t>(), (10000u - 1) / 64 * 64);
  const CliRun text = knz("eval -m " + p("teacher.ktnz") + " --corpus " + p("corpus.txt"));
  EXPECT_NE(text.out.find("perplexity "), std::string::npos);
  EXPECT_NE(knz("eval -m " + p("teacher.ktnz") + " --corpus " + p("missing.txt")).code, 0);
}

TEST_F(Cli, TrainedDeskModelHalvesUniformPerplexity) {
  prepare(200000);
  const CliRun t = knz("--seed 3 train --student " + p("teacher.ktnz") + " --corpus " + p("corpus.txt") +
                    " --mode lm --steps 120 --lr 2e-3 -o " + p("trained.ktnz"));
  ASSERT_EQ(t.code, 0) << t.err;
  const CliRun r = knz("eval -m " + p("trained.ktnz") + " --corpus " + p("corpus.txt") + " --json --max-windows 64");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(json::parse(r.out).at("perplexity").get<double>(), 256.0 * 0.5);
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

TEST_F(Cli, BenchCsvColumns) {
  const CliRun r = knz("bench --repeats 2 --shape 768x768 --shape 1024x1024=512x512,2x2 --shape 96x96");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_csv(r.out);
  ASSERT_EQ(rows.size(), 4u);
  const auto& h = rows[0];
  ASSERT_EQ(h.size(), 15u);
  auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin());
  };
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].size(), h.size());
  EXPECT_EQ(rows[1][col("m1")], "384");
  EXPECT_EQ(rows[1][col("m2")], "2");
  EXPECT_EQ(rows[1][col("flops_dense")], "1179648");
  EXPECT_EQ(rows[1][col("flops_factored")], "591360");
  EXPECT_NEAR(std::stod(rows[2][col("param_ratio")]), 4.0, 0.1);
  EXPECT_GT(std::stod(rows[1][col("dense_ms")]), 0.0);

  const CliRun def = knz("bench --fixed-clock");
  ASSERT_EQ(def.code, 0);
  EXPECT_EQ(parse_csv(def.out).size(), 7u);
  EXPECT_NE(knz("bench --shape 10x10=3x3,3x3").code, 0);
  EXPECT_NE(knz("bench --shape 7x7").code, 0);
}

TEST_F(Cli, AblateWritesOneRowPerMode) {
  prepare(50000);
  const CliRun r = knz("--seed 2 ablate --teacher " + p("teacher.ktnz") + " --student " + p("student.ktnz") +
                    " --corpus " + p("corpus.txt") + " --steps 2 --batch 2 --seq-len 16 --eval-windows 8 -o " +
                    p("ablate.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(slurp(p("ablate.json")));
  ASSERT_EQ(j.at("modes").size(), 4u);
  EXPECT_EQ(j.at("modes")[0].at("mode"), "none");
  EXPECT_EQ(j.at("modes")[0].at("steps"), 0);
  EXPECT_EQ(j.at("modes")[3].at("steps"), 2);
  EXPECT_TRUE(j.contains("teacher"));
}

}  // namespace
}  // namespace knz
