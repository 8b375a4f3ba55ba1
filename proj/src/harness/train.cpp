#include "hypermoe/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "hypermoe/errors.hpp"
#include "hypermoe/ops.hpp"

namespace hypermoe {

namespace {

constexpr std::uint64_t kDataStream = 0xda7a;
constexpr std::uint64_t kNoiseStream = 0x9015e;
constexpr std::uint64_t kEvalStream = 0xe7a1;

}  // namespace

Optimizer::Optimizer(const OptimizerConfig& cfg, std::vector<NamedParameter> params)
    : cfg_(cfg), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

double Optimizer::learning_rate(std::size_t step) const {
  const auto warmup = std::size_t(std::ceil(cfg_.warmup_fraction * double(cfg_.steps)));
  if (step < warmup) return cfg_.learning_rate * double(step + 1) / double(warmup);
  if (step >= cfg_.steps) return 0.0;
  // Linear decay to zero over the remaining steps.
  return cfg_.learning_rate * double(cfg_.steps - step) / double(cfg_.steps - warmup);
}

void Optimizer::step(std::size_t step_index) {
  ++updates_;
  const double lr = learning_rate(step_index);
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(updates_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(updates_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.epsilon);
    }
  }
  zero_grad();
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

Tensor task_loss(const SyntheticTask& task, const Tensor& output,
                 const TaskBatch& batch) {
  if (task.classification()) return softmax_cross_entropy(output, batch.labels);
  return mse(output, Tensor::from({batch.batch, 1}, batch.targets));
}

double utilization_entropy(const std::vector<std::vector<std::size_t>>& hist) {
  if (hist.empty()) return 0.0;
  double total = 0.0;
  for (const auto& layer : hist) {
    double count = 0.0;
    for (std::size_t c : layer) count += double(c);
    double h = 0.0;
    for (std::size_t c : layer) {
      if (c == 0) continue;
      const double p = double(c) / count;
      h -= p * std::log(p);
    }
    total += h;
  }
  return total / double(hist.size());
}

StepMetrics train_step(Model& model, const SyntheticTask& task,
                       const TaskBatch& batch, Optimizer& optimizer,
                       Rng& noise, std::size_t step) {
  ForwardResult fwd = model_forward(model, batch, &noise, true);
  Tensor loss = task_loss(task, fwd.output, batch);
  StepMetrics m;
  m.step = step;
  m.task_loss = loss.item();
  m.aux_loss = fwd.aux_loss.item();
  if (model.cfg.aux_loss_coef > 0.0 && !fwd.utilization.empty()) {
    loss = add(loss, scale(fwd.aux_loss, model.cfg.aux_loss_coef));
  }
  m.total_loss = loss.item();
  m.utilization = std::move(fwd.utilization);
  m.util_entropy = utilization_entropy(m.utilization);
  if (!std::isfinite(m.total_loss)) {
    throw DivergenceError(step, "loss is " + std::to_string(m.total_loss));
  }
  backward(loss);
  optimizer.step(step);
  return m;
}

EvalMetrics evaluate(const Model& model, const SyntheticTask& task,
                     std::size_t n, std::size_t batch_size) {
  NoGradGuard guard;
  Rng rng = Rng(task.config().seed).fork(kEvalStream);
  EvalMetrics out;
  double correct = 0.0, sq = 0.0, loss_sum = 0.0;
  for (std::size_t done = 0; done < n;) {
    const std::size_t b = std::min(batch_size, n - done);
    TaskBatch batch = task.sample(rng, b, Split::kEval);
    ForwardResult fwd = model_forward(model, batch, nullptr, false);
    loss_sum += task_loss(task, fwd.output, batch).item() * double(b);
    const auto y = fwd.output.data();
    const std::size_t cols = fwd.output.cols();
    for (std::size_t i = 0; i < b; ++i) {
      if (task.classification()) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c) {
          if (y[i * cols + c] > y[i * cols + best]) best = c;
        }
        correct += best == batch.labels[i] ? 1.0 : 0.0;
      } else {
        const double e = y[i] - batch.targets[i];
        sq += e * e;
      }
    }
    if (out.utilization.empty()) {
      out.utilization = fwd.utilization;
    } else {
      for (std::size_t l = 0; l < fwd.utilization.size(); ++l) {
        for (std::size_t e = 0; e < fwd.utilization[l].size(); ++e) {
          out.utilization[l][e] += fwd.utilization[l][e];
        }
      }
    }
    done += b;
  }
  out.samples = n;
  if (n > 0) {
    out.accuracy = correct / double(n);
    out.mse = sq / double(n);
    out.task_loss = loss_sum / double(n);
  }
  return out;
}

std::string metrics_csv_header() {
  return "step,task_loss,aux_loss,total_loss,util_entropy";
}

std::string metrics_csv_row(const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g", m.step,
                m.task_loss, m.aux_loss, m.total_loss, m.util_entropy);
  return buf;
}

TrainResult train_model(Model& model, const SyntheticTask& task,
                        const TrainOptions& options) {
  const OptimizerConfig& oc = model.cfg.optimizer;
  Optimizer optimizer(oc, model.parameters());
  Rng root(model.cfg.seed);
  Rng data = root.fork(kDataStream);
  Rng noise = root.fork(kNoiseStream);

  std::ofstream csv;
  if (!options.metrics_path.empty()) {
    csv.open(options.metrics_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw Error("cannot write metrics file " + options.metrics_path);
    csv << metrics_csv_header() << '\n';
  }
  TrainResult result;
  for (std::size_t step = 0; step < oc.steps; ++step) {
    TaskBatch batch = task.sample(data, oc.batch_size, Split::kTrain);
    StepMetrics m = train_step(model, task, batch, optimizer, noise, step);
    if (csv.is_open()) csv << metrics_csv_row(m) << '\n';
    if (options.log && options.log_every && (step + 1) % options.log_every == 0) {
      *options.log << "step " << step + 1 << " loss " << m.total_loss << '\n';
    }
    result.history.push_back(std::move(m));
  }
  if (csv.is_open()) {
    csv.flush();
    if (!csv) throw Error("failed writing metrics file " + options.metrics_path);
  }
  result.eval = evaluate(model, task, task.config().eval_samples);
  return result;
}

}  // namespace hypermoe
