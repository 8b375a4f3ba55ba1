#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "hypermoe/model.hpp"
#include "hypermoe/tasks.hpp"

namespace hypermoe {

/// Adam with a linear warm-up over the first warmup_fraction of the steps,
/// then linear decay to zero at the last step.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, std::vector<NamedParameter> params);

  double learning_rate(std::size_t step) const;
  // Applies one update from the accumulated gradients, then clears them.
  void step(std::size_t step_index);
  void zero_grad();

  const std::vector<NamedParameter>& parameters() const { return params_; }

 private:
  OptimizerConfig cfg_;
  std::vector<NamedParameter> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t updates_ = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  double task_loss = 0.0;
  double aux_loss = 0.0;
  double total_loss = 0.0;
  // Mean over routed layers of the entropy (nats) of the expert histogram.
  double util_entropy = 0.0;
  std::vector<std::vector<std::size_t>> utilization;
};

struct EvalMetrics {
  std::size_t samples = 0;
  double accuracy = 0.0;  // classification only
  double mse = 0.0;       // regression only
  double task_loss = 0.0;
  std::vector<std::vector<std::size_t>> utilization;  // per layer
};

// Task loss of a forward result against the batch targets.
Tensor task_loss(const SyntheticTask& task, const Tensor& output,
                 const TaskBatch& batch);

/// Forward, backward and one optimizer update. Throws DivergenceError when
/// the loss is not finite.
StepMetrics train_step(Model& model, const SyntheticTask& task,
                       const TaskBatch& batch, Optimizer& optimizer,
                       Rng& noise, std::size_t step);

/// Noise-free metrics over n samples of the eval split. The samples depend
/// only on the task seed, so repeated calls agree exactly.
EvalMetrics evaluate(const Model& model, const SyntheticTask& task,
                     std::size_t n, std::size_t batch_size = 200);

double utilization_entropy(const std::vector<std::vector<std::size_t>>& hist);

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

struct TrainOptions {
  std::string metrics_path;  // empty: no CSV
  std::ostream* log = nullptr;
  std::size_t log_every = 0;
};

struct TrainResult {
  std::vector<StepMetrics> history;
  EvalMetrics eval;
};

/// Trains `model` in place for cfg.optimizer.steps steps with
/// batches and gate noise drawn from streams forked from model.cfg.seed.
TrainResult train_model(Model& model, const SyntheticTask& task,
                        const TrainOptions& options = {});

}  // namespace hypermoe
