#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hypermoe {

enum class LayerKind { kDense, kMoe, kMoeShare, kHyperMoe };
enum class ConditionOn { kSelected, kUnselected };
// Where expert embeddings come from: trained table, compressed expert
// weights, or none (the hypernetwork is conditioned on the hidden state).
enum class EmbeddingSource { kLearned, kCompressed, kNone };

std::string to_string(LayerKind kind);
std::string to_string(ConditionOn value);
std::string to_string(EmbeddingSource value);
LayerKind parse_layer_kind(const std::string& text);
ConditionOn parse_condition_on(const std::string& text);
EmbeddingSource parse_embedding_source(const std::string& text);

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double warmup_fraction = 0.1;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
};

struct TaskConfig {
  std::string id = "grouped-modular-addition";
  // grouped-modular-addition: operands live in [0, operand_range) and group g
  // reduces their sum modulo moduli[g]. Every modulus divides operand_range.
  // Trailing distractor tokens carry no signal; they make the train and eval
  // sequences distinct while the underlying (group, a, b) table is shared.
  std::vector<std::size_t> moduli{3, 4, 6, 12};
  std::size_t operand_range = 12;
  std::size_t num_distractors = 1;
  std::size_t distractor_vocab = 8;
  // piecewise-regression
  std::size_t num_functions = 4;
  std::size_t num_knots = 5;
  std::size_t grid_size = 1024;
  double eval_fraction = 0.2;
  std::uint64_t seed = 1234;
  std::size_t eval_samples = 2000;
};

struct ModelConfig {
  LayerKind layer_kind = LayerKind::kHyperMoe;
  std::size_t hidden = 16;        // h
  std::size_t inner = 64;         // d_ff
  std::size_t num_experts = 4;    // N
  std::size_t top_k = 1;          // K
  std::size_t num_layers = 2;     // L
  std::size_t selection_dim = 8;  // t
  std::size_t embedding_dim = 8;  // t'
  std::size_t hyper_input_dim = 8;  // t_k
  std::size_t bottleneck = 4;     // b
  std::size_t selection_hidden = 0;  // 0 means "same as selection_dim"
  double aux_loss_coef = 0.01;
  bool noise_enabled = true;
  bool renormalize_gates = false;
  ConditionOn condition_on = ConditionOn::kUnselected;
  EmbeddingSource embedding_source = EmbeddingSource::kLearned;
  // Zero W^D and W^U at build time (used for reduction checks).
  bool zero_hypernetwork = false;
  std::uint64_t seed = 0;

  // Filled from the task.
  std::size_t vocab_size = 0;
  std::size_t seq_len = 0;
  std::size_t output_dim = 0;
  bool scalar_inputs = false;  // tokens carry a continuous value channel

  OptimizerConfig optimizer;

  std::size_t selection_hidden_width() const {
    return selection_hidden == 0 ? selection_dim : selection_hidden;
  }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Full run description, as read from a config file.
struct RunConfig {
  ModelConfig model;
  TaskConfig task;
};

}  // namespace hypermoe
