#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hypermoe/errors.hpp"
#include "hypermoe/grad_check.hpp"
#include "hypermoe/hyperexpert.hpp"
#include "hypermoe/ops.hpp"

namespace hypermoe {
namespace {

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from({n, n}, std::move(v));
}

std::vector<double> values(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

GateDecision decision_for(std::size_t n, const std::vector<std::vector<std::size_t>>& chosen) {
  std::vector<double> logits(chosen.size() * n, 0.0);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    for (std::size_t r = 0; r < chosen[i].size(); ++r) {
      logits[i * n + chosen[i][r]] = 10.0 - double(r);
    }
  }
  return route_logits(Tensor::from({chosen.size(), n}, std::move(logits)),
                      chosen[0].size());
}

ModelConfig small_config(std::size_t h, std::size_t n, std::size_t b) {
  ModelConfig cfg;
  cfg.hidden = h;
  cfg.inner = 2 * h;
  cfg.num_experts = n;
  cfg.top_k = 1;
  cfg.num_layers = 2;
  cfg.selection_dim = 3;
  cfg.embedding_dim = 3;
  cfg.hyper_input_dim = 3;
  cfg.bottleneck = b;
  cfg.vocab_size = 5;
  cfg.seq_len = 3;
  cfg.output_dim = 5;
  return cfg;
}

// Makes the hypernetwork large enough that generated experts are not tiny.
void amplify(HyperExpertModule& m, Rng& rng) {
  m.net.w_down = rng.gaussian_tensor(m.net.w_down.shape(), 1.0, true);
  m.net.w_up = rng.gaussian_tensor(m.net.w_up.shape(), 1.0, true);
  m.tables.expert_embeddings = rng.gaussian_tensor(m.tables.expert_embeddings.shape(), 1.0, true);
  m.tables.layer_embeddings = rng.gaussian_tensor(m.tables.layer_embeddings.shape(), 1.0, true);
  m.mlp.b1 = rng.gaussian_tensor(m.mlp.b1.shape(), 0.5, true);
  m.projector.bias = rng.gaussian_tensor(m.projector.bias.shape(), 0.5, true);
}

TEST(UnselectedMaskTest, Examples) {
  EXPECT_EQ(values(unselected_mask(decision_for(3, {{1}}))), (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(values(unselected_mask(decision_for(4, {{0, 3}}))),
            (std::vector<double>{0, 1, 1, 0}));
  EXPECT_EQ(values(unselected_mask(decision_for(1, {{0}}))), (std::vector<double>{0}));
}

TEST(UnselectedMaskTest, RowsSumToNMinusK) {
  Rng rng(5);
  for (std::size_t k = 1; k < 5; ++k) {
    GateDecision d = route_logits(rng.gaussian_tensor({50, 5}, 1.0), k);
    Tensor m = unselected_mask(d);
    for (std::size_t i = 0; i < 50; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) total += m.at(i, j);
      EXPECT_EQ(total, double(5 - k));
    }
  }
}

SelectionMlp identity_mlp(std::size_t n) {
  return {identity(n), Tensor::zeros({1, n}), identity(n), Tensor::zeros({1, n})};
}

TEST(SelectionEmbeddingTest, SingleUnselectedExpertIsCopied) {
  Tensor s = Tensor::matrix({{0.3, -0.2}, {0.7, 0.1}});
  Tensor w = aggregation_weights(unselected_mask(decision_for(2, {{0}})));
  Tensor agg = matmul(w, s);
  EXPECT_EQ(agg.at(0, 0), 0.7);
  EXPECT_EQ(agg.at(0, 1), 0.1);
}

TEST(SelectionEmbeddingTest, UniformAverageOfUnselected) {
  Tensor s = Tensor::matrix({{1, 0}, {5, 5}, {0, 1}});
  Tensor mask = unselected_mask(decision_for(3, {{1}}));
  Tensor agg = matmul(aggregation_weights(mask), s);
  EXPECT_EQ(values(agg), (std::vector<double>{0.5, 0.5}));
  // With an identity MLP, p is relu(aggregate) = aggregate here.
  EXPECT_EQ(values(selection_embedding(mask, s, identity_mlp(2))),
            (std::vector<double>{0.5, 0.5}));
}

TEST(SelectionEmbeddingTest, IdentityMlpAppliesRelu) {
  Tensor s = Tensor::matrix({{-1.0, 2.0}, {9, 9}, {-3.0, 4.0}});
  Tensor p = selection_embedding(unselected_mask(decision_for(3, {{1}})), s, identity_mlp(2));
  EXPECT_EQ(values(p), (std::vector<double>{0.0, 3.0}));
}

TEST(SelectionEmbeddingTest, AllSelectedIsDegenerate) {
  Tensor s = Tensor::matrix({{1.0, 2.0}});
  EXPECT_THROW(selection_embedding(unselected_mask(decision_for(1, {{0}})), s, identity_mlp(2)),
               DegenerateSelectionError);
}

TEST(SelectionEmbeddingTest, AggregationWeightsAreADistribution) {
  Rng rng(8);
  for (std::size_t k = 1; k < 6; ++k) {
    Tensor w = aggregation_weights(unselected_mask(route_logits(rng.gaussian_tensor({30, 6}, 1.0), k)));
    for (std::size_t i = 0; i < 30; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_GE(w.at(i, j), 0.0);
        total += w.at(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-15);
    }
  }
}

TEST(CombineEmbeddingsTest, ZeroProjectorGivesBias) {
  EmbeddingTables tables{Tensor(), Tensor::matrix({{0.4}, {0.9}})};
  Projector proj{Tensor::zeros({3, 2}), Tensor::matrix({{0.5, -1.0}})};
  Tensor k = combine_embeddings(Tensor::matrix({{7.0, 8.0}}), 1, tables, proj);
  EXPECT_EQ(values(k), (std::vector<double>{0.5, -1.0}));
}

TEST(CombineEmbeddingsTest, SelectorMap) {
  EmbeddingTables tables{Tensor(), Tensor::matrix({{3.0}})};
  Projector proj{Tensor::matrix({{1, 0}, {0, 1}, {0, 0}}), Tensor::zeros({1, 2})};
  Tensor k = combine_embeddings(Tensor::matrix({{1.0, 2.0}}), 0, tables, proj);
  EXPECT_EQ(values(k), (std::vector<double>{1.0, 2.0}));
  EXPECT_THROW(combine_embeddings(Tensor::matrix({{1.0, 2.0}}), 1, tables, proj), IndexError);
}

TEST(CombineEmbeddingsTest, MatchesAffineOracle) {
  Rng rng(31);
  EmbeddingTables tables{Tensor(), rng.gaussian_tensor({3, 2}, 1.0)};
  Projector proj{rng.gaussian_tensor({5, 4}, 1.0), rng.gaussian_tensor({1, 4}, 1.0)};
  Tensor p = rng.gaussian_tensor({1, 3}, 1.0);
  Tensor k = combine_embeddings(p, 2, tables, proj);
  const std::vector<double> joined{p.at(0, 0), p.at(0, 1), p.at(0, 2),
                                   tables.layer_embeddings.at(2, 0),
                                   tables.layer_embeddings.at(2, 1)};
  for (std::size_t c = 0; c < 4; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < 5; ++r) acc += joined[r] * proj.weight.at(r, c);
    EXPECT_EQ(k.at(0, c), acc + proj.bias.at(0, c));
  }
}

TEST(GenerateTest, BasisVectorExtractsColumn) {
  Rng rng(2);
  HyperNetParams net = make_hypernet(4, 2, 3, rng);
  GeneratedExpert g = generate_hyperexpert(Tensor::matrix({{1.0, 0.0, 0.0}}), net);
  ASSERT_EQ(g.down.shape(), (Shape{4, 2}));
  ASSERT_EQ(g.up.shape(), (Shape{2, 4}));
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(g.down.at(i), net.w_down.at(i, 0));
    EXPECT_EQ(g.up.at(i), net.w_up.at(i, 0));
  }
}

TEST(GenerateTest, ZeroInputGivesZeroExpert) {
  Rng rng(2);
  HyperNetParams net = make_hypernet(4, 2, 3, rng);
  GeneratedExpert g = generate_hyperexpert(Tensor::zeros({1, 3}), net);
  for (double v : g.down.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.up.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(generate_hyperexpert(Tensor::zeros({1, 2}), net), DimensionError);
}

TEST(GenerateTest, MatchesHandMatvec) {
  Rng rng(13);
  HyperNetParams net = make_hypernet(2, 1, 2, rng);
  net.w_down = rng.gaussian_tensor({2, 2}, 1.0);
  net.w_up = rng.gaussian_tensor({2, 2}, 1.0);
  Tensor k = rng.gaussian_tensor({1, 2}, 1.0);
  GeneratedExpert g = generate_hyperexpert(k, net);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(g.down.at(r, 0), net.w_down.at(r, 0) * k.at(0) + net.w_down.at(r, 1) * k.at(1));
    EXPECT_EQ(g.up.at(0, r), net.w_up.at(r, 0) * k.at(0) + net.w_up.at(r, 1) * k.at(1));
  }
  // Batched generation yields the same flattened rows.
  GeneratedExperts batch = generate_hyperexperts(k, net);
  EXPECT_EQ(values(batch.down), values(g.down));
  EXPECT_EQ(values(batch.up), values(g.up));
}

TEST(GenerateTest, BottleneckMustBeBelowHidden) {
  Rng rng(0);
  EXPECT_THROW(make_hypernet(4, 4, 2, rng), ConfigError);
  EXPECT_THROW(make_hypernet(4, 0, 2, rng), ConfigError);
}

TEST(HyperExpertForwardTest, Examples) {
  GeneratedExpert gen{Tensor::matrix({{1.0}, {1.0}}), Tensor::matrix({{1.0, 0.0}})};
  EXPECT_EQ(values(hyperexpert_forward(Tensor::matrix({{1.0, 1.0}}), gen)),
            (std::vector<double>{2.0, 0.0}));
  EXPECT_EQ(values(hyperexpert_forward(Tensor::zeros({1, 2}), gen)),
            (std::vector<double>{0.0, 0.0}));
  GeneratedExpert zero_up{gen.down, Tensor::zeros({1, 2})};
  EXPECT_EQ(values(hyperexpert_forward(Tensor::matrix({{3.0, -1.0}}), zero_up)),
            (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(hyperexpert_forward(Tensor::zeros({1, 3}), gen), DimensionError);
}

TEST(HyperMoeForwardTest, ZeroUpGeneratorReducesToMoe) {
  Rng rng(40);
  ModelConfig cfg = small_config(4, 3, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  m.net.w_up = Tensor::zeros(m.net.w_up.shape());
  ExpertBank bank = make_expert_bank(3, 4, 8, rng);
  Tensor x = rng.gaussian_tensor({6, 4}, 1.0);
  GateDecision d = route_logits(rng.gaussian_tensor({6, 3}, 1.0), 1);
  EXPECT_EQ(values(hypermoe_forward(x, bank, d, m, 1)), values(moe_forward(x, bank, d)));
}

TEST(HyperMoeForwardTest, ZeroGeneratorPropertyOverRandomConfigs) {
  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 2 + rng.below(6), n = 2 + rng.below(4);
    ModelConfig cfg = small_config(h, n, 1 + rng.below(h - 1));
    cfg.top_k = 1 + rng.below(n - 1);
    cfg.zero_hypernetwork = true;
    HyperExpertModule m = make_hyperexpert_module(cfg, rng);
    ExpertBank bank = make_expert_bank(n, h, 2 * h, rng);
    const std::size_t t = 1 + rng.below(8);
    Tensor x = rng.gaussian_tensor({t, h}, 1.0);
    GateDecision d = route_logits(rng.gaussian_tensor({t, n}, 1.0), cfg.top_k);
    EXPECT_EQ(values(hypermoe_forward(x, bank, d, m, rng.below(2))),
              values(moe_forward(x, bank, d)));
  }
}

TEST(HyperMoeForwardTest, IdenticalTokensGetIdenticalExperts) {
  Rng rng(42);
  ModelConfig cfg = small_config(4, 3, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  Tensor row = rng.gaussian_tensor({1, 4}, 1.0);
  Tensor x = concat_rows({row, row, row});
  GateDecision d = decision_for(3, {{2}, {2}, {2}});
  Tensor y = hyperexpert_term(x, d, m, 0);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(y.at(0, c), y.at(1, c));
    EXPECT_EQ(y.at(0, c), y.at(2, c));
  }
}

TEST(HyperMoeForwardTest, MatchesPipelineComposition) {
  Rng rng(43);
  ModelConfig cfg = small_config(4, 3, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  ExpertBank bank = make_expert_bank(3, 4, 8, rng);
  Tensor x = rng.gaussian_tensor({2, 4}, 1.0);
  GateDecision d = decision_for(3, {{0}, {2}});
  Tensor y = hypermoe_forward(x, bank, d, m, 1);
  Tensor routed = moe_forward(x, bank, d);

  const Tensor mask = unselected_mask(d);
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor xi = slice_rows(x, i, i + 1);
    Tensor p = selection_embedding(slice_rows(mask, i, i + 1), m.tables, m.mlp);
    Tensor k = combine_embeddings(p, 1, m.tables, m.projector);
    Tensor e = hyperexpert_forward(xi, generate_hyperexpert(k, m.net));
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(y.at(i, c), routed.at(i, c) + e.at(0, c)) << i << "," << c;
    }
  }
}

TEST(HyperMoeForwardTest, SelectedConditioningUsesTheOtherSet) {
  Rng rng(44);
  ModelConfig cfg = small_config(4, 3, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  Tensor x = rng.gaussian_tensor({1, 4}, 1.0);
  GateDecision d = decision_for(3, {{1}});
  HyperExpertOptions selected;
  selected.condition_on = ConditionOn::kSelected;
  Tensor a = hyperexpert_term(x, d, m, 0, selected);
  Tensor p = selection_embedding(d.mask, m.tables, m.mlp);
  Tensor b = hyperexpert_forward(
      x, generate_hyperexpert(combine_embeddings(p, 0, m.tables, m.projector), m.net));
  EXPECT_EQ(values(a), values(b));
}

TEST(HyperMoeForwardTest, TokenPermutationEquivariance) {
  Rng rng(45);
  ModelConfig cfg = small_config(5, 4, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  ExpertBank bank = make_expert_bank(4, 5, 10, rng);
  Tensor x = rng.gaussian_tensor({6, 5}, 1.0);
  Tensor logits = rng.gaussian_tensor({6, 4}, 1.0);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor y = hypermoe_forward(x, bank, route_logits(logits, 1), m, 0);
  Tensor yp = hypermoe_forward(gather_rows(x, perm), bank,
                               route_logits(gather_rows(logits, perm), 1), m, 0);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(yp.at(i, c), y.at(perm[i], c));
  }
}

TEST(HyperMoeForwardTest, SwapSymmetryOfUnselectedExperts) {
  Rng rng(46);
  ModelConfig cfg = small_config(4, 4, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  Tensor x = rng.gaussian_tensor({1, 4}, 1.0);
  // Token selects expert 0; experts 2 and 3 are both unselected, so swapping
  // their embedding rows maps the unselected set onto itself.
  GateDecision d = decision_for(4, {{0}});
  Tensor before = hyperexpert_term(x, d, m, 0);
  HyperExpertModule swapped = m;
  swapped.tables.expert_embeddings =
      gather_rows(m.tables.expert_embeddings, std::vector<std::size_t>{0, 1, 3, 2});
  Tensor after = hyperexpert_term(x, decision_for(4, {{0}}), swapped, 0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(after.at(0, c), before.at(0, c), 1e-14);
  // Relabelling the selected expert together with its row is also invisible.
  swapped.tables.expert_embeddings =
      gather_rows(m.tables.expert_embeddings, std::vector<std::size_t>{1, 0, 2, 3});
  Tensor moved = hyperexpert_term(x, decision_for(4, {{1}}), swapped, 0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(moved.at(0, c), before.at(0, c), 1e-14);
}

TEST(HyperMoeGradientTest, EveryComponentReceivesCorrectGradient) {
  Rng rng(47);
  ModelConfig cfg = small_config(4, 3, 2);
  HyperExpertModule m = make_hyperexpert_module(cfg, rng);
  amplify(m, rng);
  ExpertBank bank = make_expert_bank(3, 4, 8, rng);
  GateConfig gate;
  gate.num_experts = 3;
  gate.top_k = 1;
  gate.noise_enabled = false;
  gate.w_gate = rng.gaussian_tensor({4, 3}, 1.0, true);
  gate.w_noise = rng.gaussian_tensor({4, 3}, 1.0, true);
  Tensor x = rng.gaussian_tensor({5, 4}, 1.0);
  Tensor target = rng.gaussian_tensor({5, 4}, 1.0);
  auto loss = [&] {
    Rng unused(0);
    GateDecision d = noisy_topk_gate(x, gate, unused, false);
    return mse(hypermoe_forward(x, bank, d, m, 1), target);
  };
  backward(loss());
  const std::vector<std::pair<const char*, Tensor*>> params{
      {"S", &m.tables.expert_embeddings}, {"l", &m.tables.layer_embeddings},
      {"mlp.w1", &m.mlp.w1},              {"mlp.b2", &m.mlp.b2},
      {"proj.w", &m.projector.weight},    {"proj.b", &m.projector.bias},
      {"W^D", &m.net.w_down},             {"W^U", &m.net.w_up},
      {"gate", &gate.w_gate},             {"expert", &bank.experts[0].w1}};
  for (const auto& [name, p] : params) {
    ASSERT_TRUE(p->has_grad()) << name;
    double norm = 0.0;
    for (double g : p->grad()) norm += g * g;
    if (std::string(name) != "l") {
      EXPECT_GT(norm, 0.0) << name;
    }
    Tensor numeric = finite_diff_grad_inplace(
        [&] {
          NoGradGuard guard;
          return loss().item();
        },
        *p);
    EXPECT_LT(gradient_relative_error(p->grad_tensor(), numeric), 1e-4) << name;
  }
  // Only layer 1's embedding row is used.
  double row1 = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(m.tables.layer_embeddings.grad_tensor().at(0, c), 0.0);
    row1 += std::abs(m.tables.layer_embeddings.grad_tensor().at(1, c));
  }
  EXPECT_GT(row1, 0.0);
}

TEST(ParamCountTest, HypernetworkIndependentOfDepth) {
  ModelConfig cfg = small_config(16, 4, 4);
  cfg.hyper_input_dim = 8;
  cfg.embedding_dim = 8;
  cfg.selection_dim = 8;
  for (std::size_t layers : {2u, 8u}) {
    cfg.num_layers = layers;
    EXPECT_EQ(param_count_report(cfg).hypernetwork, 1024u);
    HyperExpertModule m = [&] {
      Rng rng(0);
      return make_hyperexpert_module(cfg, rng);
    }();
    EXPECT_EQ(m.net.w_down.size() + m.net.w_up.size(), 1024u);
  }
}

TEST(ParamCountTest, ExtraLayerAddsOneEmbeddingRow) {
  ModelConfig cfg = small_config(8, 4, 2);
  cfg.embedding_dim = 5;
  for (std::size_t layers = 1; layers < 6; ++layers) {
    cfg.num_layers = layers;
    const auto a = param_count_report(cfg).hyperexpert_specific();
    cfg.num_layers = layers + 1;
    const auto b = param_count_report(cfg).hyperexpert_specific();
    EXPECT_EQ(b - a, 5u);
  }
}

TEST(ParamCountTest, HyperModuleCountsMatchEnumeration) {
  for (EmbeddingSource src : {EmbeddingSource::kLearned, EmbeddingSource::kNone}) {
    ModelConfig cfg = small_config(6, 4, 2);
    cfg.embedding_source = src;
    cfg.selection_hidden = 7;
    Rng rng(1);
    HyperExpertModule m = make_hyperexpert_module(cfg, rng);
    const ParamCountReport r = param_count_report(cfg);
    EXPECT_EQ(m.tables.expert_embeddings.defined() ? m.tables.expert_embeddings.size() : 0,
              r.expert_embeddings);
    EXPECT_EQ(m.tables.layer_embeddings.size(), r.layer_embeddings);
    EXPECT_EQ(m.mlp.w1.size() + m.mlp.b1.size() + m.mlp.w2.size() + m.mlp.b2.size(),
              r.selection_mlp);
    EXPECT_EQ(m.projector.weight.size() + m.projector.bias.size(), r.projector);
  }
}

TEST(ParamCountTest, MoeLayerCountMatchesEnumeration) {
  ModelConfig cfg = small_config(6, 5, 2);
  cfg.layer_kind = LayerKind::kMoe;
  cfg.inner = 24;
  Rng rng(2);
  ExpertBank bank = make_expert_bank(5, 6, 24, rng);
  std::size_t enumerated = 2 * 6 * 5;  // w_gate + w_noise
  for (const auto& e : bank.experts) enumerated += e.w1.size() + e.w2.size();
  EXPECT_EQ(param_count_report(cfg).moe_layer(), enumerated);
  EXPECT_EQ(param_count_report(cfg).hyperexpert_specific(), 0u);
}

}  // namespace
}  // namespace hypermoe
