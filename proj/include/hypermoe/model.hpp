#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "hypermoe/compression.hpp"
#include "hypermoe/config.hpp"
#include "hypermoe/hyperexpert.hpp"
#include "hypermoe/moe.hpp"
#include "hypermoe/rng.hpp"
#include "hypermoe/tasks.hpp"

namespace hypermoe {

struct NamedParameter {
  std::string name;
  Tensor tensor;  // handle sharing storage with the model
};

struct NormParams {
  Tensor gain, bias;  // [1 x h]
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [h x h]
};

// Pre-norm block: x + attn(ln1(x)), then x + slot(ln2(x)).
struct Block {
  NormParams ln1, ln2;
  AttentionParams attn;
  ExpertWeights ffn;  // dense only
  GateConfig gate;    // routed kinds
  ExpertBank experts;
  SharedMlp shared;   // moe_share only
};

struct Model {
  ModelConfig cfg;
  Tensor token_embedding;   // [vocab x h]
  Tensor value_projection;  // [1 x h], scalar-input tasks only
  std::vector<Block> blocks;
  NormParams final_norm;
  Tensor head_weight, head_bias;
  // One generator serves every layer.
  std::optional<HyperExpertModule> hyper;
  std::optional<ConvPipeline> compression;  // frozen, compressed source only

  /// Every trainable tensor with a stable dotted name, in a fixed order.
  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;
};

// "layer1.experts.3.w1" -> "layer1.experts"; matches ParamCountReport::groups.
std::string parameter_group(const std::string& name);

/// Builds the model. Each component draws from its own stream forked from
/// `rng`, so models of different kinds share the initial values of the
/// components they have in common.
Model build_model(const ModelConfig& cfg, Rng& rng);

struct ForwardResult {
  Tensor output;    // [batch x output_dim]
  Tensor aux_loss;  // mean load-balance loss over routed layers; 0 for dense
  std::vector<std::vector<std::size_t>> utilization;  // per layer, per expert
  std::size_t expert_evaluations = 0;
};

/// Gate noise is drawn from `noise` only when training; pass nullptr to run
/// the gate noise-free.
ForwardResult model_forward(const Model& model, const TaskBatch& batch,
                            Rng* noise, bool training);

}  // namespace hypermoe
