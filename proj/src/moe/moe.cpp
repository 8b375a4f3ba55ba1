#include "hypermoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hypermoe/errors.hpp"
#include "hypermoe/ops.hpp"

namespace hypermoe {

void GateConfig::validate(std::size_t hidden) const {
  if (num_experts == 0 || top_k == 0 || top_k > num_experts) {
    throw ConfigError("gate: top_k must satisfy 1 <= K <= N, got K=" +
                      std::to_string(top_k) +
                      " N=" + std::to_string(num_experts));
  }
  const Shape expected{hidden, num_experts};
  if (!w_gate.defined() || w_gate.shape() != expected) {
    throw ConfigError("gate: w_gate must be " + shape_to_string(expected));
  }
  if (!w_noise.defined() || w_noise.shape() != expected) {
    throw ConfigError("gate: w_noise must be " + shape_to_string(expected));
  }
}

ExpertWeights make_expert(std::size_t hidden, std::size_t inner, Rng& rng) {
  // Fan-in scaled normal init.
  return {rng.gaussian_tensor({hidden, inner}, 1.0 / std::sqrt(double(hidden)), true),
          rng.gaussian_tensor({inner, hidden}, 1.0 / std::sqrt(double(inner)), true)};
}

ExpertBank make_expert_bank(std::size_t num_experts, std::size_t hidden,
                            std::size_t inner, Rng& rng) {
  ExpertBank bank;
  bank.experts.reserve(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    bank.experts.push_back(make_expert(hidden, inner, rng));
  }
  return bank;
}

GateDecision route_logits(const Tensor& logits, std::size_t top_k) {
  const std::size_t t = logits.rows(), n = logits.cols();
  if (top_k == 0 || top_k > n) {
    throw ConfigError("gate: top_k=" + std::to_string(top_k) +
                      " exceeds num_experts=" + std::to_string(n));
  }
  GateDecision decision;
  decision.logits = logits;
  decision.router_probs = softmax(logits);
  decision.selected.resize(t);
  decision.gate_values.resize(t);
  std::vector<double> z(t * n, 0.0);
  const auto probs = decision.router_probs.data();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < t; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = probs.data() + i * n;
    std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                      [row](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    decision.selected[i].assign(order.begin(), order.begin() + top_k);
    for (std::size_t e : decision.selected[i]) {
      decision.gate_values[i].push_back(row[e]);
      z[i * n + e] = 1.0;
    }
  }
  decision.mask = Tensor::from({t, n}, std::move(z));
  return decision;
}

GateDecision noisy_topk_gate(const Tensor& x, const GateConfig& cfg, Rng& rng,
                             bool training) {
  cfg.validate(x.cols());
  Tensor logits = matmul(x, cfg.w_gate);
  if (training && cfg.noise_enabled) {
    Tensor noise = rng.gaussian_tensor(logits.shape(), 1.0);
    logits = add(logits, mul(noise, softplus(matmul(x, cfg.w_noise))));
  }
  return route_logits(logits, cfg.top_k);
}

Tensor expert_forward(const Tensor& x, const ExpertWeights& expert) {
  return matmul(relu(matmul(x, expert.w1)), expert.w2);
}

Tensor moe_forward(const Tensor& x, const ExpertBank& bank,
                   const GateDecision& decision, bool renormalize,
                   MoeStats* stats) {
  const std::size_t t = x.rows();
  const std::size_t n = bank.size();
  if (decision.num_experts() != n) {
    throw ConfigError("moe: decision routes over " +
                      std::to_string(decision.num_experts()) +
                      " experts but the bank holds " + std::to_string(n));
  }
  if (decision.num_tokens() != t) {
    throw ConfigError("moe: decision covers " +
                      std::to_string(decision.num_tokens()) +
                      " tokens, input has " + std::to_string(t));
  }
  const std::size_t k = decision.top_k();

  // Gate weight source: raw probabilities, or [T x K] softmax over the
  // selected logits.
  Tensor renormalized;
  if (renormalize) {
    std::vector<std::size_t> rows, cols;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t e : decision.selected[i]) {
        rows.push_back(i);
        cols.push_back(e);
      }
    }
    renormalized = softmax(reshape(pick(decision.logits, rows, cols), {t, k}));
  }

  Tensor out;
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<std::size_t> tokens, gate_cols;
    for (std::size_t i = 0; i < t; ++i) {
      const auto& sel = decision.selected[i];
      for (std::size_t slot = 0; slot < sel.size(); ++slot) {
        if (sel[slot] != e) continue;
        tokens.push_back(i);
        gate_cols.push_back(renormalize ? slot : e);
      }
    }
    if (tokens.empty()) continue;
    if (stats) stats->expert_evaluations += tokens.size();
    Tensor routed = expert_forward(gather_rows(x, tokens), bank.experts[e]);
    Tensor gate = renormalize ? pick(renormalized, tokens, gate_cols)
                              : pick(decision.router_probs, tokens, gate_cols);
    Tensor contribution = scatter_add_rows(mul_col(routed, gate), tokens, t);
    out = out.defined() ? add(out, contribution) : contribution;
  }
  return out;
}

Tensor load_balance_loss(const GateDecision& decision) {
  const std::size_t t = decision.num_tokens();
  const std::size_t n = decision.num_experts();
  if (t == 0) throw ContractError("load balance loss needs at least one token");
  const auto histogram = expert_histogram(decision);
  const double slots = static_cast<double>(t * decision.top_k());
  std::vector<double> fraction(n);
  for (std::size_t e = 0; e < n; ++e) fraction[e] = histogram[e] / slots;
  Tensor f = Tensor::from({1, n}, std::move(fraction));
  return scale(sum(mul(mean_rows(decision.router_probs), f)),
               static_cast<double>(n));
}

Tensor moe_share_forward(const Tensor& x, const ExpertBank& bank,
                         const SharedMlp& shared, const GateDecision& decision,
                         bool renormalize, MoeStats* stats) {
  return add(moe_forward(x, bank, decision, renormalize, stats),
             expert_forward(x, shared));
}

std::vector<std::size_t> expert_histogram(const GateDecision& decision) {
  std::vector<std::size_t> counts(decision.num_experts(), 0);
  for (const auto& sel : decision.selected) {
    for (std::size_t e : sel) ++counts[e];
  }
  return counts;
}

}  // namespace hypermoe
