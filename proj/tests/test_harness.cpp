#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "hypermoe/checkpoint.hpp"
#include "hypermoe/config_io.hpp"
#include "hypermoe/errors.hpp"
#include "hypermoe/gradcheck.hpp"
#include "hypermoe/ops.hpp"
#include "hypermoe/train.hpp"

namespace hypermoe {
namespace {

namespace fs = std::filesystem;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ModelConfig toy_model(LayerKind kind, const SyntheticTask& task) {
  ModelConfig cfg;
  cfg.layer_kind = kind;
  cfg.hidden = 8;
  cfg.inner = 16;
  cfg.num_experts = 3;
  cfg.bottleneck = 2;
  cfg.selection_dim = cfg.embedding_dim = cfg.hyper_input_dim = 4;
  task.apply_shapes(cfg);
  return cfg;
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("hypermoe_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(TaskTest, FixedSeedGivesIdenticalBatches) {
  SyntheticTask task{TaskConfig{}};
  Rng a(5), b(5);
  TaskBatch x = task.sample(a, 64, Split::kTrain);
  TaskBatch y = task.sample(b, 64, Split::kTrain);
  EXPECT_EQ(x.tokens, y.tokens);
  EXPECT_EQ(x.labels, y.labels);
}

TEST(TaskTest, TargetsAreGroupedModularSums) {
  TaskConfig cfg;
  cfg.moduli = {5, 3, 15};
  cfg.operand_range = 15;
  SyntheticTask task(cfg);
  Rng rng(1);
  bool spotted = false;
  for (int round = 0; round < 200 && !spotted; ++round) {
    for (Split split : {Split::kTrain, Split::kEval}) {
      TaskBatch b = task.sample(rng, 100, split);
      for (std::size_t i = 0; i < b.batch; ++i) {
        const std::size_t g = b.tokens[i * b.seq_len];
        const std::size_t a = b.tokens[i * b.seq_len + 1] - 3;
        const std::size_t c = b.tokens[i * b.seq_len + 2] - 3;
        ASSERT_EQ(g, b.groups[i]);
        ASSERT_EQ(b.labels[i], (a + c) % cfg.moduli[g]);
        if (g == 0 && a == 3 && c == 4) {
          EXPECT_EQ(b.labels[i], 2u);
          spotted = true;
        }
      }
    }
  }
  EXPECT_TRUE(spotted);
}

TEST(TaskTest, LabelsAreUniformPerGroup) {
  SyntheticTask task{TaskConfig{}};  // moduli {3, 4, 6, 12}
  Rng rng(2);
  TaskBatch b = task.sample(rng, 10000, Split::kTrain);
  // Chi-square critical values at the 0.01 level for 2, 3, 5 and 11 dof.
  const std::map<std::size_t, double> critical{{3, 9.210}, {4, 11.345}, {6, 15.086}, {12, 24.725}};
  for (std::size_t g = 0; g < 4; ++g) {
    const std::size_t m = task.config().moduli[g];
    std::vector<double> counts(m, 0.0);
    double n = 0.0;
    for (std::size_t i = 0; i < b.batch; ++i) {
      if (b.groups[i] != g) continue;
      counts[b.labels[i]] += 1.0;
      n += 1.0;
    }
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - n / m) * (c - n / m) / (n / m);
    EXPECT_LT(chi2, critical.at(m)) << "group " << g;
  }
}

TEST(TaskTest, SplitsAreDisjoint) {
  for (const char* id : {"grouped-modular-addition", "piecewise-regression"}) {
    TaskConfig cfg;
    cfg.id = id;
    SyntheticTask task(cfg);
    Rng rng(3);
    TaskBatch train = task.sample(rng, 4000, Split::kTrain);
    TaskBatch eval = task.sample(rng, 1000, Split::kEval);
    auto key = [](const TaskBatch& b, std::size_t i) {
      std::vector<double> k(b.tokens.begin() + i * b.seq_len,
                            b.tokens.begin() + (i + 1) * b.seq_len);
      if (!b.values.empty()) k.push_back(b.values[i * b.seq_len + 1]);
      return k;
    };
    std::set<std::vector<double>> seen;
    for (std::size_t i = 0; i < train.batch; ++i) seen.insert(key(train, i));
    for (std::size_t i = 0; i < eval.batch; ++i) EXPECT_FALSE(seen.count(key(eval, i))) << id;
  }
}

TEST(TaskTest, PiecewiseRegressionHitsKnots) {
  TaskConfig cfg;
  cfg.id = "piecewise-regression";
  cfg.num_knots = 3;
  SyntheticTask task(cfg);
  const double left = task.piecewise(1, -1.0), mid = task.piecewise(1, 0.0);
  const double right = task.piecewise(1, 1.0);
  EXPECT_NEAR(task.piecewise(1, -0.5), 0.5 * (left + mid), 1e-12);
  EXPECT_NEAR(task.piecewise(1, 0.5), 0.5 * (mid + right), 1e-12);
  Rng rng(4);
  TaskBatch b = task.sample(rng, 50, Split::kTrain);
  for (std::size_t i = 0; i < b.batch; ++i) {
    EXPECT_EQ(b.targets[i], task.piecewise(b.groups[i], b.values[i * 2 + 1]));
  }
}

TEST(TaskTest, UnknownIdIsConfigError) {
  TaskConfig cfg;
  cfg.id = "sorting";
  EXPECT_THROW(SyntheticTask{cfg}, ConfigError);
  cfg.id = "grouped-modular-addition";
  cfg.moduli = {5, 7};
  cfg.operand_range = 10;
  EXPECT_THROW(SyntheticTask{cfg}, ConfigError);
}

TEST(ModelTest, DenseHasNoRoutingParameters) {
  SyntheticTask task{TaskConfig{}};
  Rng rng(0);
  Model m = build_model(toy_model(LayerKind::kDense, task), rng);
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(p.name.find("gate"), std::string::npos) << p.name;
    EXPECT_EQ(p.name.find("hyper"), std::string::npos) << p.name;
  }
}

TEST(ModelTest, OneHypernetworkForAllLayers) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg = toy_model(LayerKind::kHyperMoe, task);
  cfg.num_layers = 4;
  Rng rng(0);
  Model m = build_model(cfg, rng);
  std::set<const void*> storage;
  std::size_t named = 0;
  for (const auto& p : m.parameters()) {
    if (p.name.ends_with("w_down")) {
      ++named;
      storage.insert(p.tensor.node());
    }
  }
  EXPECT_EQ(named, 1u);
  EXPECT_EQ(storage.size(), 1u);
}

TEST(ModelTest, CensusMatchesParamCountReport) {
  Rng pick(11);
  for (int trial = 0; trial < 12; ++trial) {
    TaskConfig tc;
    if (trial % 3 == 2) tc.id = "piecewise-regression";
    SyntheticTask task(tc);
    const LayerKind kinds[] = {LayerKind::kDense, LayerKind::kMoe, LayerKind::kMoeShare,
                               LayerKind::kHyperMoe};
    ModelConfig cfg = toy_model(kinds[trial % 4], task);
    cfg.hidden = 4 + pick.below(8);
    cfg.bottleneck = 1 + pick.below(cfg.hidden - 1);
    cfg.inner = 2 + pick.below(20);
    cfg.num_experts = 2 + pick.below(4);
    cfg.num_layers = 1 + pick.below(4);
    cfg.selection_dim = 1 + pick.below(5);
    cfg.embedding_dim = 1 + pick.below(5);
    cfg.hyper_input_dim = 1 + pick.below(5);
    if (trial == 7) cfg.embedding_source = EmbeddingSource::kNone;
    if (trial == 11) cfg.embedding_source = EmbeddingSource::kCompressed;
    Rng rng(trial);
    Model m = build_model(cfg, rng);
    const ParamCountReport report = param_count_report(cfg);
    EXPECT_EQ(m.parameter_count(), report.total(cfg.num_layers)) << trial;
    std::map<std::string, std::size_t> census;
    for (const auto& p : m.parameters()) census[parameter_group(p.name)] += p.tensor.size();
    EXPECT_EQ(census, report.groups(cfg.num_layers)) << trial;
  }
}

TEST(ModelTest, ZeroGeneratorHyperMoeMatchesMoeAtStepZero) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig moe = toy_model(LayerKind::kMoe, task);
  ModelConfig hyper = toy_model(LayerKind::kHyperMoe, task);
  hyper.zero_hypernetwork = true;
  Rng r1(9), r2(9), data(1);
  Model a = build_model(moe, r1);
  Model b = build_model(hyper, r2);
  TaskBatch batch = task.sample(data, 16, Split::kTrain);
  Rng n1(3), n2(3);
  EXPECT_EQ(values(model_forward(a, batch, &n1, true).output),
            values(model_forward(b, batch, &n2, true).output));
  EXPECT_EQ(values(model_forward(a, batch, nullptr, false).output),
            values(model_forward(b, batch, nullptr, false).output));
}

TEST(GradcheckTest, ToyHyperMoeAllGroupsPass) {
  RunConfig cfg;
  cfg.model = toy_model(LayerKind::kHyperMoe, SyntheticTask{cfg.task});
  cfg.model.top_k = 1;
  const GradcheckReport report = run_gradcheck(cfg);
  EXPECT_TRUE(report.all_pass) << gradcheck_table(report);
  std::set<std::string> groups;
  for (const auto& g : report.groups) groups.insert(g.group);
  for (const char* g : {"hyper.w_down", "hyper.w_up", "hyper.expert_embeddings",
                        "hyper.layer_embeddings", "hyper.selection_mlp", "hyper.projector",
                        "layer1.gate", "layer0.experts", "layer0.attn", "embed", "head"}) {
    EXPECT_TRUE(groups.count(g)) << g;
  }
}

TEST(GradcheckTest, DenseAttentionAndFfnPass) {
  RunConfig cfg;
  cfg.model = toy_model(LayerKind::kDense, SyntheticTask{cfg.task});
  const GradcheckReport report = run_gradcheck(cfg);
  EXPECT_TRUE(report.all_pass) << gradcheck_table(report);
}

TEST(GradcheckTest, CorruptedBackwardRuleIsCaught) {
  RunConfig cfg;
  cfg.model = toy_model(LayerKind::kHyperMoe, SyntheticTask{cfg.task});
  GradcheckOptions options;
  options.fault_op = "batched_vecmat";
  options.fault_scale = 1.5;
  const GradcheckReport report = run_gradcheck(cfg, options);
  EXPECT_FALSE(report.all_pass);
  for (const auto& g : report.groups) {
    if (g.group == "hyper.w_down" || g.group == "hyper.w_up") EXPECT_FALSE(g.pass) << g.group;
    if (g.group == "head") EXPECT_TRUE(g.pass);
  }
}

TEST(GradcheckTest, RefusesOversizeModels) {
  RunConfig cfg;
  cfg.model.hidden = 64;
  cfg.model.inner = 256;
  cfg.model.num_experts = 8;
  cfg.model.bottleneck = 8;
  EXPECT_THROW(run_gradcheck(cfg), ConfigError);
}

TEST(TrainTest, ZeroAuxCoefficientMeansTotalIsTaskLoss) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg = toy_model(LayerKind::kHyperMoe, task);
  cfg.aux_loss_coef = 0.0;
  Rng rng(0), data(1), noise(2);
  Model m = build_model(cfg, rng);
  Optimizer opt(cfg.optimizer, m.parameters());
  for (std::size_t s = 0; s < 3; ++s) {
    StepMetrics metrics = train_step(m, task, task.sample(data, 8, Split::kTrain), opt, noise, s);
    EXPECT_EQ(metrics.total_loss, metrics.task_loss);
    EXPECT_GT(metrics.aux_loss, 0.0);
  }
}

TEST(TrainTest, OverfitsOneBatch) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg;  // default toy hypermoe
  task.apply_shapes(cfg);
  cfg.optimizer.steps = 200;
  cfg.optimizer.learning_rate = 3e-3;
  Rng rng(0), data(1), noise(2);
  Model m = build_model(cfg, rng);
  Optimizer opt(cfg.optimizer, m.parameters());
  const TaskBatch batch = task.sample(data, 32, Split::kTrain);
  double first = 0.0, last = 0.0;
  for (std::size_t s = 0; s < 200; ++s) {
    last = train_step(m, task, batch, opt, noise, s).task_loss;
    if (s == 0) first = last;
  }
  EXPECT_LT(last, 0.1 * first) << first << " -> " << last;
}

TEST(TrainTest, WarmupRampsThenDecays) {
  OptimizerConfig oc;
  oc.steps = 100;
  oc.warmup_fraction = 0.1;
  oc.learning_rate = 1.0;
  Optimizer opt(oc, {});
  EXPECT_DOUBLE_EQ(opt.learning_rate(0), 0.1);
  EXPECT_DOUBLE_EQ(opt.learning_rate(9), 1.0);
  EXPECT_DOUBLE_EQ(opt.learning_rate(10), 1.0);
  EXPECT_DOUBLE_EQ(opt.learning_rate(55), 0.5);
  EXPECT_GT(opt.learning_rate(99), 0.0);
}

TEST(TrainTest, SameSeedSameTrajectory) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg = toy_model(LayerKind::kHyperMoe, task);
  cfg.optimizer.steps = 20;
  cfg.optimizer.batch_size = 8;
  auto run = [&] {
    Rng rng(cfg.seed);
    Model m = build_model(cfg, rng);
    std::vector<std::string> rows;
    for (const auto& s : train_model(m, task).history) rows.push_back(metrics_csv_row(s));
    return rows;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainTest, NonFiniteLossRaisesDivergenceWithStep) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg = toy_model(LayerKind::kMoe, task);
  Rng rng(0), data(1), noise(2);
  Model m = build_model(cfg, rng);
  Optimizer opt(cfg.optimizer, m.parameters());
  m.head_bias.mutable_data()[0] = std::nan("");
  try {
    train_step(m, task, task.sample(data, 4, Split::kTrain), opt, noise, 7);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 7u);
  }
}

TEST(EvaluateTest, UntrainedModelIsAtChance) {
  TaskConfig tc;
  tc.moduli = {5};
  tc.operand_range = 15;
  SyntheticTask task(tc);
  ModelConfig cfg = toy_model(LayerKind::kHyperMoe, task);
  Rng rng(0);
  Model m = build_model(cfg, rng);
  const EvalMetrics a = evaluate(m, task, 2000);
  EXPECT_NEAR(a.accuracy, 0.2, 0.05);
  const EvalMetrics b = evaluate(m, task, 2000);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.task_loss, b.task_loss);
  for (const auto& layer : a.utilization) {
    std::size_t routed = 0;
    for (std::size_t c : layer) routed += c;
    EXPECT_EQ(routed, 2000 * task.seq_len());
  }
}

TEST(ConfigIoTest, RoundTripsThroughJson) {
  RunConfig cfg;
  cfg.model.layer_kind = LayerKind::kMoeShare;
  cfg.model.hidden = 12;
  cfg.model.condition_on = ConditionOn::kSelected;
  cfg.model.optimizer.steps = 77;
  cfg.task.moduli = {2, 4};
  cfg.task.operand_range = 8;
  const RunConfig back = parse_run_config(to_json(cfg).dump(2));
  EXPECT_EQ(to_json(back), to_json(cfg));
}

TEST(ConfigIoTest, SyntaxErrorReportsLineAndColumn) {
  try {
    parse_run_config("{\n  \"model\": {\n    \"hidden\": 8,,\n  }\n}", "cfg.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg.json:3:"), std::string::npos) << e.what();
  }
}

TEST(ConfigIoTest, BadKeysAreNamed) {
  auto message = [](const std::string& text) {
    try {
      parse_run_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message(R"({"model":{"hiden":8}})").find("model.hiden"), std::string::npos);
  EXPECT_NE(message(R"({"model":{"hidden":"big"}})").find("model.hidden"), std::string::npos);
  EXPECT_NE(message(R"({"task":{"moduli":3}})").find("task.moduli"), std::string::npos);
  EXPECT_NE(message(R"({"model":{"layer_kind":"mlp"}})").find("model.layer_kind"),
            std::string::npos);
  EXPECT_NE(message(R"({"optimiser":{}})").find("optimiser"), std::string::npos);
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg = toy_model(LayerKind::kHyperMoe, task);
  cfg.optimizer.steps = 5;
  Rng rng(3);
  Model m = build_model(cfg, rng);
  train_model(m, task);
  const fs::path path = scratch("ckpt") / "model.bin";
  save_checkpoint(m, path.string(), task.config(), 5);
  LoadedCheckpoint back = load_checkpoint(path.string(), &cfg);
  EXPECT_EQ(back.step, 5u);
  EXPECT_EQ(to_json(back.model.cfg), to_json(cfg));
  const auto a = m.parameters(), b = back.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    const auto x = a[i].tensor.data(), y = b[i].tensor.data();
    EXPECT_EQ(0, std::memcmp(x.data(), y.data(), x.size_bytes())) << a[i].name;
  }
}

TEST(CheckpointTest, DamagedFilesAreIntegrityErrors) {
  SyntheticTask task{TaskConfig{}};
  Rng rng(3);
  Model m = build_model(toy_model(LayerKind::kMoe, task), rng);
  const fs::path dir = scratch("damaged");
  const std::string path = (dir / "model.bin").string();
  save_checkpoint(m, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    return (dir / name).string();
  };
  EXPECT_THROW(load_checkpoint(write("short.bin", bytes.substr(0, bytes.size() - 13))),
               IntegrityError);
  std::string flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x10;
  EXPECT_THROW(load_checkpoint(write("flipped.bin", flipped)), IntegrityError);
  EXPECT_THROW(load_checkpoint(write("tiny.bin", bytes.substr(0, 10))), IntegrityError);
  EXPECT_THROW(load_checkpoint((dir / "absent.bin").string()), IntegrityError);
}

TEST(CheckpointTest, MismatchedConfigNamesTheParameter) {
  SyntheticTask task{TaskConfig{}};
  ModelConfig cfg = toy_model(LayerKind::kMoe, task);
  Rng rng(3);
  Model m = build_model(cfg, rng);
  const std::string path = (scratch("mismatch") / "model.bin").string();
  save_checkpoint(m, path);
  ModelConfig other = cfg;
  other.hidden = 12;
  try {
    load_checkpoint(path, &other);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hidden"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace hypermoe
