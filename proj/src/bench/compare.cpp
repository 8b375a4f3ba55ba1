#include "hypermoe/compare.hpp"

#include <cmath>
#include <cstdio>

#include "hypermoe/bench.hpp"
#include "hypermoe/errors.hpp"

namespace hypermoe {

CompareTable run_compare(const RunConfig& run, const std::vector<std::string>& methods,
                         const std::vector<std::uint64_t>& seeds) {
  if (methods.empty()) throw ConfigError("methods: need at least one method");
  if (seeds.empty()) throw ConfigError("seeds: need at least one seed");
  const SyntheticTask task(run.task);
  CompareTable table;
  table.classification = task.classification();
  for (const std::string& method : methods) {
    CompareSummary s;
    s.method = method;
    std::vector<double> scores;
    for (std::uint64_t seed : seeds) {
      CompareRow row;
      row.method = method;
      row.seed = seed;
      row.config = apply_method(run.model, method);
      row.config.seed = seed;
      task.apply_shapes(row.config);
      Rng init(seed);
      Model model = build_model(row.config, init);
      row.eval = train_model(model, task).eval;
      scores.push_back(table.classification ? row.eval.accuracy : row.eval.mse);
      table.rows.push_back(std::move(row));
    }
    s.runs = scores.size();
    for (double v : scores) s.mean += v / double(scores.size());
    if (scores.size() > 1) {
      double var = 0.0;
      for (double v : scores) var += (v - s.mean) * (v - s.mean);
      s.spread = std::sqrt(var / double(scores.size() - 1));
    }
    table.summary.push_back(s);
  }
  return table;
}

std::string compare_csv(const CompareTable& table) {
  std::string out =
      "method,seed,layer_kind,condition_on,embedding_source,accuracy,mse,task_loss\n";
  char line[512];
  for (const CompareRow& r : table.rows) {
    std::snprintf(line, sizeof line, "%s,%llu,%s,%s,%s,%.17g,%.17g,%.17g\n",
                  r.method.c_str(), static_cast<unsigned long long>(r.seed),
                  to_string(r.config.layer_kind).c_str(),
                  to_string(r.config.condition_on).c_str(),
                  to_string(r.config.embedding_source).c_str(), r.eval.accuracy,
                  r.eval.mse, r.eval.task_loss);
    out += line;
  }
  return out;
}

}  // namespace hypermoe
