#include "hypermoe/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hypermoe/errors.hpp"

namespace hypermoe {

DistanceMatrix pairwise_distances(const Tensor& rows) {
  const std::size_t n = rows.rows(), d = rows.cols();
  DistanceMatrix out(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = rows.at(i, c) - rows.at(j, c);
        acc += diff * diff;
      }
      out[i][j] = out[j][i] = std::sqrt(acc);
    }
  }
  return out;
}

EmbeddingDump analyze_embeddings(const Model& model, std::size_t layer) {
  if (model.cfg.layer_kind != LayerKind::kHyperMoe || !model.hyper) {
    throw ConfigError("analyze-embeddings: checkpoint is a " +
                      to_string(model.cfg.layer_kind) + " model, not hypermoe");
  }
  if (model.cfg.embedding_source == EmbeddingSource::kNone) {
    throw ConfigError("analyze-embeddings: model has no expert embeddings");
  }
  if (layer >= model.blocks.size()) {
    throw IndexError("layer " + std::to_string(layer) + " out of range for " +
                     std::to_string(model.blocks.size()) + " layers");
  }
  NoGradGuard guard;
  const Tensor table = model.compression
                           ? compress_expert_weights(model.blocks[layer].experts,
                                                     *model.compression)
                           : model.hyper->tables.expert_embeddings;
  const std::size_t n = table.rows();
  if (n < 2) throw DegenerateSelectionError("analyze-embeddings: need at least 2 experts");
  std::vector<double> mask(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0.0;
  const Tensor selection =
      selection_embedding(Tensor::from({n, n}, std::move(mask)), table, model.hyper->mlp);
  return {"euclidean", pairwise_distances(table), pairwise_distances(selection)};
}

void write_embedding_dump(const EmbeddingDump& dump, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&dir](const std::string& name, const DistanceMatrix& m) {
    const std::string path = (std::filesystem::path(dir) / name).string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    char cell[40];
    for (const auto& row : m) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        std::snprintf(cell, sizeof cell, "%.17g", row[j]);
        out << (j ? "," : "") << cell;
      }
      out << '\n';
    }
  };
  write("experts_dist.csv", dump.experts);
  write("selection_dist.csv", dump.selection);
}

}  // namespace hypermoe
