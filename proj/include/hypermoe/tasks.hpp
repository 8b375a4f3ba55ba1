#pragma once

#include <cstddef>
#include <vector>

#include "hypermoe/config.hpp"
#include "hypermoe/rng.hpp"

namespace hypermoe {

enum class Split { kTrain, kEval };

// One batch of fixed-length sequences, row-major [batch x seq_len].
struct TaskBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> tokens;
  std::vector<double> values;  // scalar channel, empty for discrete tasks
  std::vector<std::size_t> labels;  // classification targets
  std::vector<double> targets;      // regression targets
  std::vector<std::size_t> groups;  // group or function id of each sample
};

/// Deterministic synthetic task. Train and eval samples are separated by a
/// seeded hash of the full sequence, so the two splits never share a sample.
class SyntheticTask {
 public:
  explicit SyntheticTask(TaskConfig cfg);

  const TaskConfig& config() const { return cfg_; }
  bool classification() const { return !regression_; }
  bool scalar_inputs() const { return regression_; }
  std::size_t vocab_size() const;
  std::size_t seq_len() const;
  std::size_t output_dim() const;
  std::size_t num_groups() const;

  // Copies vocab/sequence/output sizes into a model config.
  void apply_shapes(ModelConfig& model) const;

  TaskBatch sample(Rng& rng, std::size_t batch, Split split) const;

  // Piecewise-linear function f evaluated at x in [-1, 1].
  double piecewise(std::size_t f, double x) const;
  Split split_of(const std::vector<std::uint64_t>& key) const;

 private:
  TaskConfig cfg_;
  bool regression_ = false;
  std::vector<std::vector<double>> knots_;  // [num_functions][num_knots]
};

TaskBatch generate_task_batch(const SyntheticTask& task, Rng& rng,
                              std::size_t batch, Split split = Split::kTrain);

}  // namespace hypermoe
