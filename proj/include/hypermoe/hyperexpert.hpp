#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "hypermoe/config.hpp"
#include "hypermoe/moe.hpp"
#include "hypermoe/rng.hpp"
#include "hypermoe/tensor.hpp"

namespace hypermoe {

struct EmbeddingTables {
  Tensor expert_embeddings;  // S, [N x t']
  Tensor layer_embeddings;   // l, [L x t']
};

// in -> relu(in W1 + b1) W2 + b2
struct SelectionMlp {
  Tensor w1, b1;  // [in x hidden], [1 x hidden]
  Tensor w2, b2;  // [hidden x t], [1 x t]

  Tensor forward(const Tensor& in) const;
};

// concat(p, l_tau) W + bias
struct Projector {
  Tensor weight;  // [(t + t') x t_k]
  Tensor bias;    // [1 x t_k]
};

/// Generator shared by every expert and every layer of a model.
struct HyperNetParams {
  Tensor w_down;  // W^D, [(h*b) x t_k]
  Tensor w_up;    // W^U, [(b*h) x t_k]
  std::size_t hidden = 0;
  std::size_t bottleneck = 0;

  std::size_t input_dim() const { return w_down.cols(); }
};

struct GeneratedExpert {
  Tensor down;  // D, [h x b]
  Tensor up;    // U, [b x h]
};

// Row i holds token i's flattened D (h*b) and U (b*h), both row-major.
struct GeneratedExperts {
  Tensor down;  // [T x (h*b)]
  Tensor up;    // [T x (b*h)]
};

struct HyperExpertModule {
  EmbeddingTables tables;
  SelectionMlp mlp;
  Projector projector;
  HyperNetParams net;
};

struct HyperExpertOptions {
  ConditionOn condition_on = ConditionOn::kUnselected;
  EmbeddingSource source = EmbeddingSource::kLearned;
  // Replaces tables.expert_embeddings when defined (compressed source).
  Tensor expert_embeddings_override;
  bool renormalize = false;
  MoeStats* stats = nullptr;
};

HyperNetParams make_hypernet(std::size_t hidden, std::size_t bottleneck,
                             std::size_t input_dim, Rng& rng);

// mlp_input is t' for embedding-conditioned generation, h when conditioning on
// the hidden state directly.
HyperExpertModule make_hyperexpert_module(const ModelConfig& cfg, Rng& rng);

// 1 - Z.
Tensor unselected_mask(const GateDecision& decision);

// Row-normalised copy of a {0,1} mask; throws DegenerateSelectionError for an
// all-zero row.
Tensor aggregation_weights(const Tensor& mask);

/// MLP of the mean of the expert embeddings picked by `mask`, per token.
Tensor selection_embedding(const Tensor& mask, const Tensor& expert_embeddings,
                           const SelectionMlp& mlp);
Tensor selection_embedding(const Tensor& mask, const EmbeddingTables& tables,
                           const SelectionMlp& mlp);

// k = proj(concat(p, l_layer)) for every row of p.
Tensor combine_embeddings(const Tensor& p, std::size_t layer,
                          const EmbeddingTables& tables,
                          const Projector& projector);

// Single-token generation: D = reshape(W^D k^T, h x b), U likewise.
GeneratedExpert generate_hyperexpert(const Tensor& k, const HyperNetParams& net);
GeneratedExperts generate_hyperexperts(const Tensor& k,
                                       const HyperNetParams& net);

// relu(x D) U for a single token.
Tensor hyperexpert_forward(const Tensor& x, const GeneratedExpert& gen);
Tensor hyperexpert_forward(const Tensor& x, const GeneratedExperts& gen,
                           const HyperNetParams& net);

/// HyperExpert output for every token of x at the given layer.
Tensor hyperexpert_term(const Tensor& x, const GateDecision& decision,
                        const HyperExpertModule& hyper, std::size_t layer,
                        const HyperExpertOptions& options = {});

/// moe_forward(x) + HyperExpert(x), token by token.
Tensor hypermoe_forward(const Tensor& x, const ExpertBank& bank,
                        const GateDecision& decision,
                        const HyperExpertModule& hyper, std::size_t layer,
                        const HyperExpertOptions& options = {});

/// Trainable parameter counts by component, derived from dimensions alone.
struct ParamCountReport {
  std::size_t token_embedding = 0;
  std::size_t value_projection = 0;
  std::size_t attention_per_layer = 0;
  std::size_t norms_per_layer = 0;
  std::size_t dense_ffn_per_layer = 0;
  std::size_t gate_per_layer = 0;
  std::size_t experts_per_layer = 0;
  std::size_t shared_mlp_per_layer = 0;
  std::size_t final_norm = 0;
  std::size_t head = 0;
  // HyperExpert-specific, model-wide.
  std::size_t hypernetwork = 0;  // W^D + W^U
  std::size_t expert_embeddings = 0;
  std::size_t layer_embeddings = 0;
  std::size_t selection_mlp = 0;
  std::size_t projector = 0;

  std::size_t moe_layer() const { return gate_per_layer + experts_per_layer; }
  std::size_t hyperexpert_specific() const {
    return hypernetwork + expert_embeddings + layer_embeddings + selection_mlp +
           projector;
  }
  std::size_t total(std::size_t num_layers) const;
  // Named groups matching the model's parameter registry prefixes.
  std::map<std::string, std::size_t> groups(std::size_t num_layers) const;
};

ParamCountReport param_count_report(const ModelConfig& cfg);

}  // namespace hypermoe
