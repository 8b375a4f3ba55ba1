#include "hypermoe/bench.hpp"

#include <chrono>

#include "hypermoe/config_io.hpp"
#include "hypermoe/errors.hpp"
#include "hypermoe/train.hpp"

namespace hypermoe {

namespace {

constexpr std::size_t kRounds = 5;

struct Runner {
  ModelConfig cfg;
  Model model;
  std::optional<Optimizer> optimizer;
  Rng noise{0};
  std::size_t step = 0;
  double seconds = 0.0;
  std::size_t timed = 0;
};

}  // namespace

BenchPhase parse_bench_phase(const std::string& text) {
  if (text == "train") return BenchPhase::kTrain;
  if (text == "eval") return BenchPhase::kEval;
  throw ConfigError("phase: expected train or eval, got '" + text + "'");
}

std::string to_string(BenchPhase phase) {
  return phase == BenchPhase::kTrain ? "train" : "eval";
}

ModelConfig apply_method(const ModelConfig& base, const std::string& method) {
  ModelConfig cfg = base;
  const auto colon = method.find(':');
  cfg.layer_kind = parse_layer_kind(method.substr(0, colon));
  if (colon == std::string::npos) return cfg;
  const std::string variant = method.substr(colon + 1);
  if (cfg.layer_kind != LayerKind::kHyperMoe) {
    throw ConfigError("methods: variant '" + variant + "' applies to hypermoe only");
  }
  if (variant == "selected" || variant == "unselected") {
    cfg.condition_on = parse_condition_on(variant);
  } else if (variant == "learned" || variant == "compressed" || variant == "none") {
    cfg.embedding_source = parse_embedding_source(variant);
  } else {
    throw ConfigError("methods: unknown variant '" + variant + "'");
  }
  return cfg;
}

std::vector<BenchReport> run_bench(const RunConfig& run,
                                   const std::vector<std::string>& methods,
                                   BenchPhase phase, std::size_t steps,
                                   std::size_t warmup) {
  if (methods.empty()) throw ConfigError("methods: need at least one method");
  if (warmup < 1 || steps <= warmup) {
    throw ConfigError("steps: need steps > warmup >= 1");
  }
  const SyntheticTask task(run.task);
  ModelConfig base = run.model;
  task.apply_shapes(base);
  const std::size_t batch_size = base.optimizer.batch_size;

  // One fixed pool of batches shared by every method.
  Rng data = Rng(base.seed).fork(0xbe7c);
  std::vector<TaskBatch> pool;
  for (std::size_t i = 0; i < 8; ++i) pool.push_back(task.sample(data, batch_size, Split::kTrain));

  std::vector<Runner> runners;
  for (const std::string& method : methods) {
    Runner r;
    r.cfg = apply_method(base, method);
    Rng init(r.cfg.seed);
    r.model = build_model(r.cfg, init);
    r.optimizer.emplace(r.cfg.optimizer, r.model.parameters());
    r.noise = Rng(r.cfg.seed).fork(0x9015e);
    runners.push_back(std::move(r));
  }

  auto run_one = [&](Runner& r) {
    const TaskBatch& batch = pool[r.step % pool.size()];
    if (phase == BenchPhase::kTrain) {
      train_step(r.model, task, batch, *r.optimizer, r.noise, r.step);
    } else {
      NoGradGuard guard;
      model_forward(r.model, batch, nullptr, false);
    }
    ++r.step;
  };

  for (Runner& r : runners) {
    for (std::size_t i = 0; i < warmup; ++i) run_one(r);
  }
  const std::size_t timed = steps - warmup;
  for (std::size_t round = 0; round < kRounds; ++round) {
    const std::size_t quota = timed * (round + 1) / kRounds - timed * round / kRounds;
    // Alternate the order so neither method always runs right after the other.
    for (std::size_t j = 0; j < runners.size(); ++j) {
      Runner& r = runners[round % 2 == 0 ? j : runners.size() - 1 - j];
      const auto start = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < quota; ++i) run_one(r);
      r.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      r.timed += quota;
    }
  }

  std::vector<BenchReport> reports;
  for (std::size_t i = 0; i < runners.size(); ++i) {
    const Runner& r = runners[i];
    BenchReport rep;
    rep.method = methods[i];
    rep.phase = phase;
    rep.steps = r.timed;
    rep.warmup = warmup;
    rep.batch_size = batch_size;
    rep.duration_seconds = r.seconds;
    rep.samples_per_second = double(r.timed * batch_size) / r.seconds;
    rep.config = to_json(r.cfg);
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::string bench_json(const std::vector<BenchReport>& reports) {
  nlohmann::json out;
  out["phase"] = reports.empty() ? "" : to_string(reports[0].phase);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : reports) {
    list.push_back({{"method", r.method},
                    {"phase", to_string(r.phase)},
                    {"steps", r.steps},
                    {"warmup", r.warmup},
                    {"batch_size", r.batch_size},
                    {"duration_seconds", r.duration_seconds},
                    {"samples_per_second", r.samples_per_second},
                    {"config", r.config}});
  }
  out["reports"] = list;
  if (reports.size() == 2) {
    out["ratio"] = reports[1].samples_per_second / reports[0].samples_per_second;
    out["ratio_of"] = reports[1].method + "/" + reports[0].method;
  }
  return out.dump();
}

}  // namespace hypermoe
