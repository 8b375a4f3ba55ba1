#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hypermoe/model.hpp"

namespace hypermoe {

using DistanceMatrix = std::vector<std::vector<double>>;

struct EmbeddingDump {
  std::string metric = "euclidean";
  DistanceMatrix experts;    // between rows of S
  DistanceMatrix selection;  // between leave-one-out selection embeddings
};

DistanceMatrix pairwise_distances(const Tensor& rows);

/// Expert embeddings of the given layer (the learned table, or the layer's
/// compressed expert weights) and, for each expert i, the selection embedding
/// built from every expert except i. Throws ConfigError for non-hypermoe
/// models and IndexError for a layer out of range.
EmbeddingDump analyze_embeddings(const Model& model, std::size_t layer);

// Writes experts_dist.csv and selection_dist.csv into dir.
void write_embedding_dump(const EmbeddingDump& dump, const std::string& dir);

}  // namespace hypermoe
