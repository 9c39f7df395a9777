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

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>

#include "json.hpp"
#include "knz/distill.hpp"
#include "knz/model.hpp"

namespace knz {

using json = nlohmann::ordered_json;

/// One entry per tensor of `teacher`, in canonical order. Factored tensors
/// carry their A/B shapes and residual; untouched ones have null factor_shapes
/// and equal before/after counts.
inline json compression_report(const TinyGPTModel& teacher, const CompressedModel& compressed) {
  std::map<std::string, const TensorDecomposition*> by_name;
  for (const auto& r : compressed.reports) by_name[r.name] = &r;

  json tensors = json::array();
  std::size_t before = 0, after = 0, head = 0;
  for_each_parameter(teacher, [&](const std::string& name, const Matrix& w) {
    json e;
    e["name"] = name;
    e["original_shape"] = {w.rows(), w.cols()};
    std::size_t n_after = w.size();
    auto it = by_name.find(name);
    if (it != by_name.end()) {
      const FactorShape& s = it->second->shape;
      e["factor_shapes"] = {{"A", {s.m1, s.n1}}, {"B", {s.m2, s.n2}}};
      n_after = s.param_count();
      e["relative_residual"] = it->second->report.relative_residual;
    } else {
      e["factor_shapes"] = nullptr;
      e["relative_residual"] = 0.0;
    }
    e["params_before"] = w.size();
    e["params_after"] = n_after;
    before += w.size();
    after += n_after;
    if (name == "lm_head.weight") head = w.size();
    tensors.push_back(std::move(e));
  });
  json out;
  out["tensors"] = std::move(tensors);
  out["totals"] = {{"params_before", before},
                   {"params_after", after},
                   {"compression_factor", static_cast<double>(before) / static_cast<double>(after)}};
  // GPT-2 ties its head to the token embedding, so published counts leave it out.
  out["totals_excluding_lm_head"] = {
      {"params_before", before - head},
      {"params_after", after - head},
      {"compression_factor", static_cast<double>(before - head) / static_cast<double>(after - head)}};
  return out;
}

inline json metrics_json(const StepMetrics& m) {
  return {{"step", m.step},   {"L_emb", m.l_emb},     {"L_att", m.l_att},    {"L_hid", m.l_hid},
          {"L_ce", m.l_ce},   {"L_total", m.l_total}, {"wall_ms", m.wall_ms}};
}

inline StepMetrics metrics_from_json(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<std::size_t>();
  m.l_emb = j.at("L_emb").get<double>();
  m.l_att = j.at("L_att").get<double>();
  m.l_hid = j.at("L_hid").get<double>();
  m.l_ce = j.at("L_ce").get<double>();
  m.l_total = j.at("L_total").get<double>();
  m.wall_ms = j.at("wall_ms").get<double>();
  return m;
}

inline void write_metrics_jsonl(const std::filesystem::path& path, std::span<const StepMetrics> history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  for (const auto& m : history) out << metrics_json(m).dump() << '\n';
}

inline std::vector<StepMetrics> read_metrics_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<StepMetrics> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(metrics_from_json(json::parse(line)));
  return out;
}

}  // namespace knz
