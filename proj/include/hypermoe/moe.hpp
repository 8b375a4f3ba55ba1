#pragma once

#include <cstddef>
#include <vector>

#include "hypermoe/rng.hpp"
#include "hypermoe/tensor.hpp"

namespace hypermoe {

struct GateConfig {
  std::size_t num_experts = 0;
  std::size_t top_k = 1;
  bool noise_enabled = true;
  Tensor w_gate;   // [h x N]
  Tensor w_noise;  // [h x N]

  void validate(std::size_t hidden) const;
};

/// Routing outcome for a batch of T tokens.
struct GateDecision {
  Tensor logits;        // [T x N], noise included when it was applied
  Tensor router_probs;  // [T x N]
  // selected[i] holds the K experts of token i, highest probability first.
  std::vector<std::vector<std::size_t>> selected;
  std::vector<std::vector<double>> gate_values;
  Tensor mask;  // Z, [T x N] of {0, 1}

  std::size_t num_tokens() const { return selected.size(); }
  std::size_t num_experts() const { return router_probs.cols(); }
  std::size_t top_k() const { return selected.empty() ? 0 : selected[0].size(); }
};

struct ExpertWeights {
  Tensor w1;  // [h x d_ff]
  Tensor w2;  // [d_ff x h]
};

struct ExpertBank {
  std::vector<ExpertWeights> experts;

  std::size_t size() const { return experts.size(); }
  std::size_t hidden() const { return experts.at(0).w1.rows(); }
  std::size_t inner() const { return experts.at(0).w1.cols(); }
};

// The MoE-Share MLP has the same shapes as one expert.
using SharedMlp = ExpertWeights;

ExpertWeights make_expert(std::size_t hidden, std::size_t inner, Rng& rng);
ExpertBank make_expert_bank(std::size_t num_experts, std::size_t hidden,
                            std::size_t inner, Rng& rng);

// Top-K of softmax(logits) with ties resolved toward the lower index.
GateDecision route_logits(const Tensor& logits, std::size_t top_k);

/// Noisy Top-K gate. Gaussian noise scaled by softplus(x W_noise) is added to
/// the logits only when both `training` and `cfg.noise_enabled` hold.
GateDecision noisy_topk_gate(const Tensor& x, const GateConfig& cfg, Rng& rng,
                             bool training);

// relu(x W1) W2, row-wise.
Tensor expert_forward(const Tensor& x, const ExpertWeights& expert);

struct MoeStats {
  std::size_t expert_evaluations = 0;  // (token, expert) pairs computed
};

/// Per token, sum over its selected experts of gate * expert(x). Gate is the
/// raw router probability, or the softmax over the selected logits when
/// `renormalize` is set. Unselected experts are never evaluated.
Tensor moe_forward(const Tensor& x, const ExpertBank& bank,
                   const GateDecision& decision, bool renormalize = false,
                   MoeStats* stats = nullptr);

/// N * sum_i f_i * P_i with f_i the share of routing slots sent to expert i
/// (treated as constant) and P_i the mean router probability of expert i.
Tensor load_balance_loss(const GateDecision& decision);

Tensor moe_share_forward(const Tensor& x, const ExpertBank& bank,
                         const SharedMlp& shared, const GateDecision& decision,
                         bool renormalize = false, MoeStats* stats = nullptr);

// Tokens routed to each expert.
std::vector<std::size_t> expert_histogram(const GateDecision& decision);

}  // namespace hypermoe
