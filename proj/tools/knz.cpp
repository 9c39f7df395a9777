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

// Command-line front end: init, corpus, compress, train, eval, ablate, bench.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "knz/knz.hpp"

namespace {

using knz::json;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("KNZ_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument(std::string("KNZ_SEED is not an unsigned integer: '") + env + "'");
  }
  return 0;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    out.push_back(std::stod(tok, &used));
    if (used != tok.size()) throw std::invalid_argument("not a number: '" + tok + "'");
  }
  return out;
}

knz::DType parse_dtype(const std::string& s) {
  if (s == "f64") return knz::DType::kF64;
  if (s == "f32") return knz::DType::kF32;
  throw std::invalid_argument("dtype must be f32 or f64, got '" + s + "'");
}

// dtype of the first parameter tensor, so rewritten checkpoints keep their precision.
knz::DType archive_dtype(const std::vector<knz::Tensor>& ts) {
  for (const auto& t : ts)
    if (t.name != knz::kConfigTensor) return t.dtype();
  return knz::DType::kF64;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

struct InitArgs {
  std::string output, preset = "desk", dtype = "f64";
  knz::GPTConfig config;
};

int run_init(InitArgs& a, std::uint64_t seed) {
  knz::GPTConfig c = a.preset == "gpt2-small" ? knz::GPTConfig::gpt2_small() : a.config;
  if (a.preset != "gpt2-small" && a.preset != "desk")
    throw std::invalid_argument("preset must be desk or gpt2-small");
  c.seed = seed;
  knz::save_model(a.output, knz::init_model(c), parse_dtype(a.dtype));
  return 0;
}

struct CorpusArgs {
  std::string output;
  std::size_t bytes = 1 << 20;
};

struct CompressArgs {
  std::string input, output, report, layers = "odd", embedding = "on", attn_output = "on";
  double factor = 2.0;
  std::size_t embedding_factor = 2;
};

int run_compress(const CompressArgs& a, std::uint64_t seed) {
  if (!(a.factor > 1.0)) throw std::invalid_argument("--factor must exceed 1, got " + std::to_string(a.factor));
  if (a.embedding != "on" && a.embedding != "off") throw std::invalid_argument("--embedding must be on or off");
  if (a.attn_output != "on" && a.attn_output != "off") throw std::invalid_argument("--attn-output must be on or off");
  knz::CompressionSchedule schedule;
  schedule.layers = knz::LayerSelector::parse(a.layers);
  schedule.factor = a.factor;
  schedule.compress_embedding = a.embedding == "on";
  schedule.embedding_factor = a.embedding_factor;
  schedule.factor_attention_output = a.attn_output == "on";

  const std::vector<knz::Tensor> tensors = knz::archive_read(a.input);
  const knz::TinyGPTModel teacher = knz::model_from_tensors(tensors);
  knz::Rng rng(seed);
  const knz::CompressedModel cm = knz::compress_model(teacher, schedule, rng);
  knz::save_model(a.output, cm.student, archive_dtype(tensors));
  if (!a.report.empty()) write_text(a.report, knz::compression_report(teacher, cm).dump(2) + "\n");
  return 0;
}

struct TrainArgs {
  std::string teacher, student, corpus, output, metrics, mode = "lm+kd", alphas, kl = "teacher-student",
                                                          hidden = "block", layer_set = "all";
  std::size_t epochs = 1, steps = 0, batch = 8, seq_len = 64;
  double lr = 2.5e-4, val_split = 0.1, clip = 1.0;
  bool fixed_clock = false;
};

knz::DistillOptions distill_options(const TrainArgs& a) {
  knz::DistillOptions o;
  if (a.kl == "teacher-student") o.kl_direction = knz::ad::KlDirection::kTeacherStudent;
  else if (a.kl == "student-teacher") o.kl_direction = knz::ad::KlDirection::kStudentTeacher;
  else throw std::invalid_argument("--kl must be teacher-student or student-teacher");
  if (a.hidden == "block") o.hidden_source = knz::HiddenSource::kBlockOutput;
  else if (a.hidden == "ffn") o.hidden_source = knz::HiddenSource::kFfnOutput;
  else throw std::invalid_argument("--hidden must be block or ffn");
  if (a.layer_set == "all") o.layers = knz::LayerSet::kAll;
  else if (a.layer_set == "compressed") o.layers = knz::LayerSet::kCompressedOnly;
  else throw std::invalid_argument("--distill-layers must be all or compressed");
  return o;
}

knz::DistillWeights base_weights(const TrainArgs& a) {
  if (a.alphas.empty()) return knz::DistillWeights::pretrain();
  const std::vector<double> v = parse_doubles(a.alphas);
  if (v.size() != 4) throw std::invalid_argument("--alphas takes four comma-separated values");
  knz::DistillWeights w{v[0], v[1], v[2], v[3]};
  w.validate();
  return w;
}

knz::TrainConfig train_config(const TrainArgs& a, std::uint64_t seed) {
  knz::TrainConfig c;
  c.batch_size = a.batch;
  c.learning_rate = a.lr;
  c.epochs = a.epochs;
  c.max_steps = a.steps;
  c.seq_len = a.seq_len;
  c.seed = seed;
  c.clip_norm = a.clip;
  c.record_wall_time = !a.fixed_clock;
  c.validate();
  return c;
}

int run_train(const TrainArgs& a, std::uint64_t seed) {
  const knz::AblationMode mode = knz::parse_mode(a.mode);
  const knz::DistillWeights base = base_weights(a);
  const knz::TrainConfig cfg = train_config(a, seed);
  const knz::DistillOptions opts = distill_options(a);

  const std::vector<knz::Tensor> student_tensors = knz::archive_read(a.student);
  knz::TinyGPTModel student = knz::model_from_tensors(student_tensors);
  std::optional<knz::TinyGPTModel> teacher;
  if (!a.teacher.empty()) teacher = knz::load_model(a.teacher);
  if (!teacher && knz::weights_for(mode, base).uses_teacher() && mode != knz::AblationMode::kNone)
    throw std::invalid_argument("mode " + a.mode + " needs --teacher");
  const knz::Corpus corpus = knz::Corpus::load(a.corpus, a.val_split);

  const knz::PhaseResult r =
      knz::run_phase(mode, student, teacher ? &*teacher : nullptr, corpus.train(), cfg, base, opts);
  knz::save_model(a.output, student, archive_dtype(student_tensors));
  if (!a.metrics.empty()) knz::write_metrics_jsonl(a.metrics, r.history);
  if (!r.history.empty()) {
    const auto& last = r.history.back();
    std::cout << "steps " << r.history.size() << " final L_total " << std::setprecision(10) << last.l_total
              << " L_ce " << last.l_ce << "\n";
  } else {
    std::cout << "steps 0\n";
  }
  return 0;
}

struct EvalArgs {
  std::string model, corpus;
  std::size_t seq_len = 64, batch = 8, max_windows = 0;
  double val_split = 0.1;
  bool json_out = false;
};

json eval_json(const knz::EvalResult& r) {
  return {{"cross_entropy", r.mean_ce}, {"perplexity", r.perplexity}, {"tokens", r.tokens}};
}

int run_eval(const EvalArgs& a) {
  const knz::TinyGPTModel m = knz::load_model(a.model);
  const knz::Corpus corpus = knz::Corpus::load(a.corpus, a.val_split);
  const knz::EvalResult r = knz::evaluate_lm(m, corpus.validation(), a.seq_len, a.batch, a.max_windows);
  if (a.json_out) {
    std::cout << eval_json(r).dump() << "\n";
  } else {
    std::cout << std::setprecision(17) << "cross_entropy " << r.mean_ce << "\nperplexity " << r.perplexity
              << "\ntokens " << r.tokens << "\n";
  }
  return 0;
}

struct AblateArgs {
  TrainArgs train;
  std::string modes = "none,lm,kd,lm+kd", output, eval_corpus;
  std::size_t eval_windows = 0;
};

int run_ablate(AblateArgs& a, std::uint64_t seed) {
  const knz::DistillWeights base = base_weights(a.train);
  const knz::TrainConfig cfg = train_config(a.train, seed);
  const knz::DistillOptions opts = distill_options(a.train);
  const knz::TinyGPTModel teacher = knz::load_model(a.train.teacher);
  const knz::TinyGPTModel student0 = knz::load_model(a.train.student);
  const knz::Corpus corpus = knz::Corpus::load(a.train.corpus, a.train.val_split);

  json rows = json::array();
  std::stringstream ss(a.modes);
  std::string name;
  while (std::getline(ss, name, ',')) {
    const knz::AblationMode mode = knz::parse_mode(name);
    knz::TinyGPTModel s = student0;
    const knz::PhaseResult r = knz::run_phase(mode, s, &teacher, corpus.train(), cfg, base, opts);
    const knz::EvalResult e = knz::evaluate_lm(s, corpus.validation(), cfg.seq_len, cfg.batch_size, a.eval_windows);
    rows.push_back({{"mode", knz::mode_name(mode)},
                    {"steps", r.history.size()},
                    {"validation", eval_json(e)}});
    std::cout << std::left << std::setw(6) << knz::mode_name(mode) << " cross_entropy " << std::setprecision(8)
              << e.mean_ce << " perplexity " << e.perplexity << "\n";
  }
  const knz::EvalResult te = knz::evaluate_lm(teacher, corpus.validation(), cfg.seq_len, cfg.batch_size, a.eval_windows);
  const json out = {{"teacher", eval_json(te)}, {"modes", rows}};
  if (!a.output.empty()) write_text(a.output, out.dump(2) + "\n");
  return 0;
}

struct BenchArgs {
  std::vector<std::string> shapes;
  double factor = 2.0;
  std::size_t batch = 1, repeats = 20;
  std::string output;
  bool fixed_clock = false;
};

// "MxN" (planned at --factor) or "MxN=m1xn1,m2xn2".
knz::FactorShape parse_bench_shape(const std::string& text, double factor) {
  auto dims = [&](const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) throw std::invalid_argument("bad shape '" + text + "'");
    std::size_t u1 = 0, u2 = 0;
    const std::string l = s.substr(0, x), r = s.substr(x + 1);
    const std::size_t a = std::stoul(l, &u1), b = std::stoul(r, &u2);
    if (u1 != l.size() || u2 != r.size()) throw std::invalid_argument("bad shape '" + text + "'");
    return std::pair{a, b};
  };
  const auto eq = text.find('=');
  const auto [m, n] = dims(text.substr(0, eq));
  if (eq == std::string::npos) return knz::plan_shapes(m, n, factor);
  const std::string rest = text.substr(eq + 1);
  const auto comma = rest.find(',');
  if (comma == std::string::npos) throw std::invalid_argument("bad shape '" + text + "'");
  const auto [m1, n1] = dims(rest.substr(0, comma));
  const auto [m2, n2] = dims(rest.substr(comma + 1));
  const knz::FactorShape s{m1, n1, m2, n2};
  if (s.rows() != m || s.cols() != n) throw std::invalid_argument("factors do not tile '" + text + "'");
  return s;
}

template <class Fn>
double time_ms(std::size_t repeats, Fn&& fn) {
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < repeats; ++i) fn();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() /
         static_cast<double>(repeats);
}

int run_bench(BenchArgs& a, std::uint64_t seed) {
  if (a.shapes.empty()) a.shapes = {"768x768", "3072x768", "768x3072", "1024x1024=512x512,2x2", "384x384", "96x96"};
  if (a.batch == 0 || a.repeats == 0) throw std::invalid_argument("--batch and --repeats must be positive");
  std::ostringstream csv;
  csv << "m,n,m1,n1,m2,n2,params_dense,params_factored,param_ratio,flops_dense,flops_factored,flop_ratio,"
         "dense_ms,factored_ms,speedup\n";
  knz::Rng rng(seed);
  volatile double sink = 0.0;
  for (const std::string& text : a.shapes) {
    const knz::FactorShape s = parse_bench_shape(text, a.factor);
    const std::size_t m = s.rows(), n = s.cols();
    const knz::KroneckerPair pair{knz::random_normal(s.m1, s.n1, rng), knz::random_normal(s.m2, s.n2, rng)};
    const knz::Matrix w = knz::materialize(pair);
    const knz::Matrix x = knz::random_normal(a.batch, n, rng);
    double dense_ms = 0.0, fact_ms = 0.0;
    if (!a.fixed_clock) {
      dense_ms = time_ms(a.repeats, [&] { sink = sink + knz::matmul_nt(x, w)(0, 0); });
      fact_ms = time_ms(a.repeats, [&] { sink = sink + knz::kron_matmul(pair, x)(0, 0); });
    }
    const std::uint64_t fd = knz::dense_matvec_flops(m, n), ff = knz::kron_matvec_flops(s);
    csv << m << ',' << n << ',' << s.m1 << ',' << s.n1 << ',' << s.m2 << ',' << s.n2 << ',' << m * n << ','
        << s.param_count() << ',' << std::setprecision(10) << knz::compression_factor(m, n, s) << ',' << fd << ','
        << ff << ',' << static_cast<double>(fd) / static_cast<double>(ff) << ',' << dense_ms << ',' << fact_ms << ','
        << (fact_ms > 0.0 ? dense_ms / fact_ms : 0.0) << '\n';
  }
  if (a.output.empty()) std::cout << csv.str();
  else write_text(a.output, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kronecker-factored GPT compression and distillation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed_flag;
  app.add_option("--seed", seed_flag, "RNG seed (default: $KNZ_SEED, else 0)");

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "Write a randomly initialized dense model");
  c_init->add_option("--output,-o", init.output)->required();
  c_init->add_option("--preset", init.preset, "desk | gpt2-small")->capture_default_str();
  c_init->add_option("--layers", init.config.n_layers)->capture_default_str();
  c_init->add_option("--heads", init.config.n_heads)->capture_default_str();
  c_init->add_option("--d-model", init.config.d_model)->capture_default_str();
  c_init->add_option("--d-ff", init.config.d_ff)->capture_default_str();
  c_init->add_option("--vocab", init.config.vocab)->capture_default_str();
  c_init->add_option("--max-seq-len", init.config.max_seq_len)->capture_default_str();
  c_init->add_option("--dtype", init.dtype, "f64 | f32")->capture_default_str();

  CorpusArgs corpus;
  auto* c_corpus = app.add_subcommand("corpus", "Write seeded synthetic English-like text");
  c_corpus->add_option("--output,-o", corpus.output)->required();
  c_corpus->add_option("--bytes", corpus.bytes)->capture_default_str();

  CompressArgs comp;
  auto* c_comp = app.add_subcommand("compress", "Factor a dense checkpoint per a schedule");
  c_comp->add_option("--input,-i", comp.input)->required()->check(CLI::ExistingFile);
  c_comp->add_option("--output,-o", comp.output)->required();
  c_comp->add_option("--report", comp.report, "Compression report JSON");
  c_comp->add_option("--layers", comp.layers, "odd | even | all | none | i,j,...")->capture_default_str();
  c_comp->add_option("--factor", comp.factor)->capture_default_str();
  c_comp->add_option("--embedding", comp.embedding, "on | off")->capture_default_str();
  c_comp->add_option("--embedding-factor", comp.embedding_factor)->capture_default_str();
  c_comp->add_option("--attn-output", comp.attn_output, "on | off")->capture_default_str();

  auto add_train_options = [](CLI::App* cmd, TrainArgs& t) {
    cmd->add_option("--teacher", t.teacher)->check(CLI::ExistingFile);
    cmd->add_option("--student", t.student)->required()->check(CLI::ExistingFile);
    cmd->add_option("--corpus", t.corpus)->required()->check(CLI::ExistingFile);
    cmd->add_option("--alphas", t.alphas, "a1,a2,a3,a4 (default 0.5,0.5,0.5,0.1)");
    cmd->add_option("--epochs", t.epochs)->capture_default_str();
    cmd->add_option("--steps", t.steps, "Cap on optimizer steps (0: none)")->capture_default_str();
    cmd->add_option("--batch", t.batch)->capture_default_str();
    cmd->add_option("--seq-len", t.seq_len)->capture_default_str();
    cmd->add_option("--lr", t.lr)->capture_default_str();
    cmd->add_option("--clip", t.clip, "Global gradient-norm clip (<= 0 disables)")->capture_default_str();
    cmd->add_option("--val-split", t.val_split)->capture_default_str();
    cmd->add_option("--kl", t.kl, "teacher-student | student-teacher")->capture_default_str();
    cmd->add_option("--hidden", t.hidden, "block | ffn")->capture_default_str();
    cmd->add_option("--distill-layers", t.layer_set, "all | compressed")->capture_default_str();
  };

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a student under one ablation mode");
  add_train_options(c_train, train);
  c_train->add_option("--mode", train.mode, "none | lm | kd | lm+kd")->capture_default_str();
  c_train->add_option("--output,-o", train.output)->required();
  c_train->add_option("--metrics", train.metrics, "Per-step JSONL metrics");
  c_train->add_flag("--fixed-clock", train.fixed_clock, "Write wall_ms as 0");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Held-out cross-entropy and perplexity");
  c_eval->add_option("--model,-m", eval.model)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--corpus", eval.corpus)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--seq-len", eval.seq_len)->capture_default_str();
  c_eval->add_option("--batch", eval.batch)->capture_default_str();
  c_eval->add_option("--max-windows", eval.max_windows, "0: whole split")->capture_default_str();
  c_eval->add_option("--val-split", eval.val_split)->capture_default_str();
  c_eval->add_flag("--json", eval.json_out);

  AblateArgs ablate;
  auto* c_ablate = app.add_subcommand("ablate", "Train and evaluate each ablation mode from one student");
  add_train_options(c_ablate, ablate.train);
  c_ablate->add_option("--modes", ablate.modes)->capture_default_str();
  c_ablate->add_option("--output,-o", ablate.output, "Results JSON");
  c_ablate->add_option("--eval-windows", ablate.eval_windows, "0: whole split")->capture_default_str();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Dense vs factored matmul timings and flop counts as CSV");
  c_bench->add_option("--shape", bench.shapes, "MxN or MxN=m1xn1,m2xn2 (repeatable)");
  c_bench->add_option("--factor", bench.factor)->capture_default_str();
  c_bench->add_option("--batch", bench.batch, "Input rows per product")->capture_default_str();
  c_bench->add_option("--repeats", bench.repeats)->capture_default_str();
  c_bench->add_option("--output,-o", bench.output, "CSV path (default stdout)");
  c_bench->add_flag("--fixed-clock", bench.fixed_clock, "Skip timing; time columns are 0");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::uint64_t seed = seed_flag ? *seed_flag : default_seed();
    if (*c_init) return run_init(init, seed);
    if (*c_corpus) {
      write_text(corpus.output, knz::synthesize_text(corpus.bytes, seed));
      return 0;
    }
    if (*c_comp) return run_compress(comp, seed);
    if (*c_train) return run_train(train, seed);
    if (*c_eval) return run_eval(eval);
    if (*c_ablate) {
      if (ablate.train.teacher.empty()) throw std::invalid_argument("ablate needs --teacher");
      return run_ablate(ablate, seed);
    }
    if (*c_bench) return run_bench(bench, seed);
  } catch (const std::exception& e) {
    std::cerr << "knz: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
