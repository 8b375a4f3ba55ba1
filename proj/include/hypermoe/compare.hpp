#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hypermoe/config.hpp"
#include "hypermoe/train.hpp"

namespace hypermoe {

struct CompareRow {
  std::string method;
  std::uint64_t seed = 0;
  ModelConfig config;
  EvalMetrics eval;
};

struct CompareSummary {
  std::string method;
  std::size_t runs = 0;
  double mean = 0.0;    // accuracy, or mse for regression
  double spread = 0.0;  // sample standard deviation
};

struct CompareTable {
  bool classification = true;
  std::vector<CompareRow> rows;
  std::vector<CompareSummary> summary;  // one per method, input order
};

/// Trains every (method, seed) cell from scratch under identical settings.
/// Each cell is exactly what `train` would produce for that method and seed.
CompareTable run_compare(const RunConfig& cfg, const std::vector<std::string>& methods,
                         const std::vector<std::uint64_t>& seeds);

std::string compare_csv(const CompareTable& table);

}  // namespace hypermoe
