#include "hypermoe/cli.hpp"

#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "hypermoe/analysis.hpp"
#include "hypermoe/bench.hpp"
#include "hypermoe/checkpoint.hpp"
#include "hypermoe/compare.hpp"
#include "hypermoe/config_io.hpp"
#include "hypermoe/errors.hpp"
#include "hypermoe/gradcheck.hpp"
#include "hypermoe/train.hpp"

namespace hypermoe {

namespace {

namespace fs = std::filesystem;

struct Args {
  std::string config;
  std::string out = ".";
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string phase = "train";
  std::optional<std::size_t> steps;
  std::size_t warmup = 5;
  std::string methods;
  std::string seeds;
  std::size_t layer = 0;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

RunConfig load(const Args& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.seed) cfg.model.seed = *a.seed;
  return cfg;
}

std::string checkpoint_path(const Args& a) {
  return a.checkpoint.empty() ? (fs::path(a.out) / "checkpoint.bin").string() : a.checkpoint;
}

nlohmann::json eval_json(const SyntheticTask& task, const EvalMetrics& m) {
  nlohmann::json j = {{"samples", m.samples}, {"task_loss", m.task_loss},
                      {"utilization", m.utilization}};
  if (task.classification()) {
    j["accuracy"] = m.accuracy;
  } else {
    j["mse"] = m.mse;
  }
  return j;
}

int cmd_train(const Args& a, std::ostream& out) {
  RunConfig cfg = load(a);
  if (a.steps) cfg.model.optimizer.steps = *a.steps;
  const SyntheticTask task(cfg.task);
  task.apply_shapes(cfg.model);
  fs::create_directories(a.out);
  Rng init(cfg.model.seed);
  Model model = build_model(cfg.model, init);
  TrainOptions options;
  options.metrics_path = (fs::path(a.out) / "metrics.csv").string();
  TrainResult result = train_model(model, task, options);
  save_checkpoint(model, (fs::path(a.out) / "checkpoint.bin").string(), cfg.task,
                  cfg.model.optimizer.steps);
  nlohmann::json summary = {{"command", "train"},
                            {"method", to_string(cfg.model.layer_kind)},
                            {"seed", cfg.model.seed},
                            {"steps", cfg.model.optimizer.steps},
                            {"parameters", model.parameter_count()},
                            {"final_total_loss", result.history.empty()
                                                     ? 0.0
                                                     : result.history.back().total_loss},
                            {"eval", eval_json(task, result.eval)}};
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const Args& a, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path(a));
  const SyntheticTask task(ck.task);
  const EvalMetrics m = evaluate(ck.model, task, ck.task.eval_samples);
  nlohmann::json j = {{"command", "eval"},
                      {"method", to_string(ck.model.cfg.layer_kind)},
                      {"step", ck.step},
                      {"eval", eval_json(task, m)}};
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_bench(const Args& a, std::ostream& out) {
  const RunConfig cfg = load(a);
  std::vector<std::string> methods = split_list(a.methods.empty() ? "moe,hypermoe" : a.methods);
  const auto reports = run_bench(cfg, methods, parse_bench_phase(a.phase),
                                 a.steps.value_or(40), a.warmup);
  out << bench_json(reports) << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Args& a, std::ostream& out) {
  const GradcheckReport report = run_gradcheck(load(a));
  out << gradcheck_table(report);
  out << (report.all_pass ? "all groups pass" : "gradient check FAILED") << '\n';
  return report.all_pass ? kExitOk : kExitRuntime;
}

int cmd_analyze(const Args& a, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path(a));
  const EmbeddingDump dump = analyze_embeddings(ck.model, a.layer);
  write_embedding_dump(dump, a.out);
  out << nlohmann::json({{"command", "analyze-embeddings"},
                         {"layer", a.layer},
                         {"metric", dump.metric},
                         {"experts", dump.experts},
                         {"selection", dump.selection}})
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_compare(const Args& a, std::ostream& out) {
  RunConfig cfg = load(a);
  if (a.steps) cfg.model.optimizer.steps = *a.steps;
  const auto methods = split_list(a.methods.empty() ? "moe,moe_share,hypermoe" : a.methods);
  std::vector<std::uint64_t> seeds;
  for (const std::string& s : split_list(a.seeds)) {
    try {
      seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("seeds: '" + s + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) seeds.push_back(cfg.model.seed);
  const CompareTable table = run_compare(cfg, methods, seeds);
  const std::string csv = compare_csv(table);
  fs::create_directories(a.out);
  std::ofstream file(fs::path(a.out) / "compare.csv", std::ios::binary | std::ios::trunc);
  file << csv;
  out << csv;
  for (const CompareSummary& s : table.summary) {
    out << "# " << s.method << ' ' << (table.classification ? "accuracy" : "mse") << ' '
        << s.mean << " +- " << s.spread << " (" << s.runs << " runs)\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"HyperMoE toy-scale training, benchmarking and diagnostics"};
  app.require_subcommand(1);
  Args a;
  auto add_common = [&a](CLI::App* sub) {
    sub->add_option("--config", a.config, "JSON config file");
    sub->add_option("--out", a.out, "output directory");
    sub->add_option("--seed", a.seed, "model seed override");
  };
  auto* train = app.add_subcommand("train", "train a model, write metrics.csv and checkpoint.bin");
  add_common(train);
  train->add_option("--steps", a.steps, "training steps override");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", a.checkpoint, "checkpoint file (default OUT/checkpoint.bin)");
  auto* bench = app.add_subcommand("bench", "time train or eval steps per method");
  add_common(bench);
  bench->add_option("--phase", a.phase, "train or eval");
  bench->add_option("--steps", a.steps, "total steps including warm-up (default 40)");
  bench->add_option("--warmup", a.warmup, "untimed warm-up steps (default 5)");
  bench->add_option("--methods", a.methods, "comma-separated methods (default moe,hypermoe)");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_common(gradcheck);
  auto* analyze = app.add_subcommand("analyze-embeddings", "expert/selection distance matrices");
  add_common(analyze);
  analyze->add_option("--checkpoint", a.checkpoint, "checkpoint file (default OUT/checkpoint.bin)");
  analyze->add_option("--layer", a.layer, "layer index");
  auto* compare = app.add_subcommand("compare", "train methods x seeds and tabulate eval");
  add_common(compare);
  compare->add_option("--methods", a.methods, "comma-separated methods, e.g. moe,hypermoe:selected");
  compare->add_option("--seeds", a.seeds, "comma-separated seeds (default: the model seed)");
  compare->add_option("--steps", a.steps, "training steps override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(a, out);
    if (eval->parsed()) return cmd_eval(a, out);
    if (bench->parsed()) return cmd_bench(a, out);
    if (gradcheck->parsed()) return cmd_gradcheck(a, out);
    if (analyze->parsed()) return cmd_analyze(a, out);
    if (compare->parsed()) return cmd_compare(a, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace hypermoe
