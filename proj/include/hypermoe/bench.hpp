#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypermoe/config.hpp"
#include "hypermoe/model.hpp"

namespace hypermoe {

enum class BenchPhase { kTrain, kEval };
BenchPhase parse_bench_phase(const std::string& text);
std::string to_string(BenchPhase phase);

struct BenchReport {
  std::string method;
  BenchPhase phase = BenchPhase::kTrain;
  std::size_t steps = 0;   // timed steps, warm-up excluded
  std::size_t warmup = 0;
  std::size_t batch_size = 0;
  double duration_seconds = 0.0;
  double samples_per_second = 0.0;
  nlohmann::json config;
};

/// A named method is a layer kind, optionally refined with ":selected",
/// ":unselected", ":learned", ":compressed" or ":none" (hypermoe only).
ModelConfig apply_method(const ModelConfig& base, const std::string& method);

/// Times steps - warmup train steps (or noise-free forward passes) per method
/// at the config's batch size. Methods are timed in interleaved rounds so
/// slow drift of the machine affects them alike.
std::vector<BenchReport> run_bench(const RunConfig& cfg,
                                   const std::vector<std::string>& methods,
                                   BenchPhase phase, std::size_t steps,
                                   std::size_t warmup);

// Single-line JSON; with two reports it carries ratio = second / first.
std::string bench_json(const std::vector<BenchReport>& reports);

}  // namespace hypermoe
