#include "hypermoe/config.hpp"

#include "hypermoe/errors.hpp"

namespace hypermoe {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kMoe: return "moe";
    case LayerKind::kMoeShare: return "moe_share";
    case LayerKind::kHyperMoe: return "hypermoe";
  }
  return "?";
}

std::string to_string(ConditionOn value) {
  return value == ConditionOn::kSelected ? "selected" : "unselected";
}

std::string to_string(EmbeddingSource value) {
  switch (value) {
    case EmbeddingSource::kLearned: return "learned";
    case EmbeddingSource::kCompressed: return "compressed";
    case EmbeddingSource::kNone: return "none";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& text) {
  if (text == "dense") return LayerKind::kDense;
  if (text == "moe") return LayerKind::kMoe;
  if (text == "moe_share") return LayerKind::kMoeShare;
  if (text == "hypermoe") return LayerKind::kHyperMoe;
  throw ConfigError("layer_kind: unknown value '" + text + "'");
}

ConditionOn parse_condition_on(const std::string& text) {
  if (text == "selected") return ConditionOn::kSelected;
  if (text == "unselected") return ConditionOn::kUnselected;
  throw ConfigError("condition_on: unknown value '" + text + "'");
}

EmbeddingSource parse_embedding_source(const std::string& text) {
  if (text == "learned") return EmbeddingSource::kLearned;
  if (text == "compressed") return EmbeddingSource::kCompressed;
  if (text == "none") return EmbeddingSource::kNone;
  throw ConfigError("embedding_source: unknown value '" + text + "'");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t value, const char* name) {
    if (value == 0) throw ConfigError(std::string(name) + ": must be positive");
  };
  positive(hidden, "hidden");
  positive(inner, "inner");
  positive(num_layers, "num_layers");
  positive(vocab_size, "vocab_size");
  positive(seq_len, "seq_len");
  positive(output_dim, "output_dim");
  if (aux_loss_coef < 0.0) throw ConfigError("aux_loss_coef: must be >= 0");
  if (layer_kind == LayerKind::kDense) return;
  positive(num_experts, "num_experts");
  if (top_k == 0 || top_k > num_experts) {
    throw ConfigError("top_k: must satisfy 1 <= top_k <= num_experts");
  }
  if (layer_kind != LayerKind::kHyperMoe) return;
  if (top_k >= num_experts && condition_on == ConditionOn::kUnselected &&
      embedding_source != EmbeddingSource::kNone) {
    throw ConfigError("top_k: hypermoe needs top_k < num_experts");
  }
  positive(selection_dim, "selection_dim");
  positive(embedding_dim, "embedding_dim");
  positive(hyper_input_dim, "hyper_input_dim");
  if (bottleneck == 0 || bottleneck >= hidden) {
    throw ConfigError("bottleneck: must satisfy 0 < bottleneck < hidden");
  }
}

}  // namespace hypermoe
