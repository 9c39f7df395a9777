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

#include <filesystem>

#include "knz/report.hpp"
#include "model_util.hpp"

namespace knz {
namespace {

TEST(CompressionReport, TensorsAndTotals) {
  const TinyGPTModel teacher = init_model(testing::tiny_config());
  Rng rng(1);
  const CompressedModel cm = compress_model(teacher, CompressionSchedule::odd_layers(), rng);
  const json r = compression_report(teacher, cm);
  const json& tensors = r.at("tensors");
  std::size_t factored = 0, before = 0, after = 0;
  for (const json& e : tensors) {
    ASSERT_TRUE(e.contains("name"));
    const auto shape = e.at("original_shape").get<std::vector<std::size_t>>();
    EXPECT_EQ(e.at("params_before").get<std::size_t>(), shape[0] * shape[1]);
    before += e.at("params_before").get<std::size_t>();
    after += e.at("params_after").get<std::size_t>();
    if (e.at("factor_shapes").is_null()) {
      EXPECT_EQ(e.at("params_before"), e.at("params_after"));
      EXPECT_EQ(e.at("relative_residual").get<double>(), 0.0);
      continue;
    }
    ++factored;
    const auto a = e.at("factor_shapes").at("A").get<std::vector<std::size_t>>();
    const auto b = e.at("factor_shapes").at("B").get<std::vector<std::size_t>>();
    EXPECT_EQ(a[0] * b[0], shape[0]);
    EXPECT_EQ(a[1] * b[1], shape[1]);
    EXPECT_EQ(e.at("params_after").get<std::size_t>(), a[0] * a[1] + b[0] * b[1]);
    EXPECT_GT(e.at("relative_residual").get<double>(), 0.0);
  }
  EXPECT_EQ(factored, cm.reports.size());
  EXPECT_EQ(tensors.front().at("name"), "wte.weight");
  EXPECT_EQ(r.at("totals").at("params_before").get<std::size_t>(), before);
  EXPECT_EQ(r.at("totals").at("params_after").get<std::size_t>(), after);
  EXPECT_EQ(before, param_count(teacher, false));
  EXPECT_EQ(after, param_count(cm.student, false));
  EXPECT_NEAR(r.at("totals").at("compression_factor").get<double>(),
              static_cast<double>(before) / static_cast<double>(after), 1e-15);
  const std::size_t head = teacher.lm_head.size();
  EXPECT_EQ(r.at("totals_excluding_lm_head").at("params_before").get<std::size_t>(), before - head);
  EXPECT_EQ(r.at("totals_excluding_lm_head").at("params_after").get<std::size_t>(), after - head);
  EXPECT_EQ(after - head, param_count(cm.student, true));
}

TEST(Metrics, JsonKeysInOrderAndRoundTrip) {
  const StepMetrics m{3, 0.5, 0.25, 0.125, 2.0, 1.5, 12.0};
  const json j = metrics_json(m);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"step", "L_emb", "L_att", "L_hid", "L_ce", "L_total", "wall_ms"}));
  const StepMetrics back = metrics_from_json(j);
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.l_hid, 0.125);
  EXPECT_EQ(back.wall_ms, 12.0);
}

TEST(Metrics, JsonlFileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "knz_metrics_test.jsonl";
  const std::vector<StepMetrics> h = {{0, 1, 2, 3, 4, 5, 6}, {1, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6}};
  write_metrics_jsonl(path, h);
  const std::vector<StepMetrics> back = read_metrics_jsonl(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].l_total, 0.5);
  EXPECT_EQ(back[0].l_att, 2.0);
  std::filesystem::remove(path);
  EXPECT_THROW(read_metrics_jsonl(path), std::runtime_error);
}

}  // namespace
}  // namespace knz
