#include "hypermoe/tasks.hpp"

#include <algorithm>

#include "hypermoe/errors.hpp"

namespace hypermoe {

namespace {

constexpr const char* kModular = "grouped-modular-addition";
constexpr const char* kPiecewise = "piecewise-regression";

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double grid_point(std::size_t index, std::size_t grid) {
  return grid == 1 ? 0.0 : -1.0 + 2.0 * double(index) / double(grid - 1);
}

}  // namespace

SyntheticTask::SyntheticTask(TaskConfig cfg) : cfg_(std::move(cfg)) {
  if (!(cfg_.eval_fraction > 0.0 && cfg_.eval_fraction < 1.0)) {
    throw ConfigError("eval_fraction: must lie strictly between 0 and 1");
  }
  if (cfg_.id == kModular) {
    if (cfg_.moduli.empty()) throw ConfigError("moduli: need at least one group");
    if (cfg_.operand_range == 0) throw ConfigError("operand_range: must be positive");
    for (std::size_t m : cfg_.moduli) {
      if (m < 2 || cfg_.operand_range % m != 0) {
        throw ConfigError("moduli: each modulus must be >= 2 and divide operand_range (" +
                          std::to_string(cfg_.operand_range) + "), got " +
                          std::to_string(m));
      }
    }
    if (cfg_.num_distractors > 0 && cfg_.distractor_vocab == 0) {
      throw ConfigError("distractor_vocab: must be positive when num_distractors > 0");
    }
    return;
  }
  if (cfg_.id != kPiecewise) {
    throw ConfigError("task.id: unknown task '" + cfg_.id + "'");
  }
  regression_ = true;
  if (cfg_.num_functions == 0) throw ConfigError("num_functions: must be positive");
  if (cfg_.num_knots < 2) throw ConfigError("num_knots: need at least 2");
  if (cfg_.grid_size < 2) throw ConfigError("grid_size: need at least 2");
  Rng rng = Rng(cfg_.seed).fork(0x6b6e6f7473);
  knots_.assign(cfg_.num_functions, std::vector<double>(cfg_.num_knots));
  for (auto& f : knots_) {
    for (double& y : f) y = 2.0 * rng.uniform() - 1.0;
  }
}

std::size_t SyntheticTask::num_groups() const {
  return regression_ ? cfg_.num_functions : cfg_.moduli.size();
}

std::size_t SyntheticTask::vocab_size() const {
  if (regression_) return cfg_.num_functions + 1;
  return cfg_.moduli.size() + cfg_.operand_range +
         (cfg_.num_distractors ? cfg_.distractor_vocab : 0);
}

std::size_t SyntheticTask::seq_len() const {
  return regression_ ? 2 : 3 + cfg_.num_distractors;
}

std::size_t SyntheticTask::output_dim() const {
  if (regression_) return 1;
  return *std::max_element(cfg_.moduli.begin(), cfg_.moduli.end());
}

void SyntheticTask::apply_shapes(ModelConfig& model) const {
  model.vocab_size = vocab_size();
  model.seq_len = seq_len();
  model.output_dim = output_dim();
  model.scalar_inputs = scalar_inputs();
}

double SyntheticTask::piecewise(std::size_t f, double x) const {
  const auto& ys = knots_.at(f);
  const double pos = (std::clamp(x, -1.0, 1.0) + 1.0) / 2.0 * double(ys.size() - 1);
  const std::size_t i = std::min<std::size_t>(std::size_t(pos), ys.size() - 2);
  const double frac = pos - double(i);
  return ys[i] + frac * (ys[i + 1] - ys[i]);
}

Split SyntheticTask::split_of(const std::vector<std::uint64_t>& key) const {
  std::uint64_t h = mix(cfg_.seed);
  for (std::uint64_t k : key) h = mix(h ^ mix(k));
  const double u = double(h >> 11) * 0x1.0p-53;
  return u < cfg_.eval_fraction ? Split::kEval : Split::kTrain;
}

TaskBatch SyntheticTask::sample(Rng& rng, std::size_t batch, Split split) const {
  if (batch == 0) throw ConfigError("batch_size: must be positive");
  TaskBatch out;
  out.batch = batch;
  out.seq_len = seq_len();
  std::vector<std::uint64_t> key(out.seq_len);
  for (std::size_t n = 0; n < batch; ++n) {
    if (regression_) {
      std::size_t f = 0, idx = 0;
      do {
        f = rng.below(cfg_.num_functions);
        idx = rng.below(cfg_.grid_size);
      } while (split_of({f, idx}) != split);
      const double x = grid_point(idx, cfg_.grid_size);
      out.tokens.insert(out.tokens.end(), {f, cfg_.num_functions});
      out.values.insert(out.values.end(), {0.0, x});
      out.targets.push_back(piecewise(f, x));
      out.groups.push_back(f);
      continue;
    }
    const std::size_t groups = cfg_.moduli.size(), range = cfg_.operand_range;
    do {
      key[0] = rng.below(groups);
      key[1] = groups + rng.below(range);
      key[2] = groups + rng.below(range);
      for (std::size_t d = 0; d < cfg_.num_distractors; ++d) {
        key[3 + d] = groups + range + rng.below(cfg_.distractor_vocab);
      }
    } while (split_of(key) != split);
    const std::size_t g = key[0];
    const std::size_t a = key[1] - groups, b = key[2] - groups;
    out.tokens.insert(out.tokens.end(), key.begin(), key.end());
    out.labels.push_back((a + b) % cfg_.moduli[g]);
    out.groups.push_back(g);
  }
  return out;
}

TaskBatch generate_task_batch(const SyntheticTask& task, Rng& rng,
                              std::size_t batch, Split split) {
  return task.sample(rng, batch, split);
}

}  // namespace hypermoe
