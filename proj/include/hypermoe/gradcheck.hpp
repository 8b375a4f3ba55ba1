#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hypermoe/config.hpp"

namespace hypermoe {

struct GroupCheck {
  std::string group;
  std::size_t count = 0;  // scalars checked
  double max_relative_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GroupCheck> groups;
  std::size_t total_parameters = 0;
  bool all_pass = false;
};

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t max_parameters = 100000;
  std::size_t batch_size = 2;
  // Redraw hypernetwork weights and embedding tables at unit scale first.
  bool condition_hypernetwork = true;
  // Optional fault injection into one backward rule (see ops.hpp).
  std::string fault_op;
  double fault_scale = 1.0;
};

/// Compares every parameter's analytic gradient with central differences of
/// the full training loss (task + auxiliary, gate noise from a fixed seed).
/// Refuses configs above options.max_parameters with ConfigError.
GradcheckReport run_gradcheck(const RunConfig& cfg,
                              const GradcheckOptions& options = {});

std::string gradcheck_table(const GradcheckReport& report);

}  // namespace hypermoe
