#include "hypermoe/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <memory>

#include "hypermoe/errors.hpp"
#include "hypermoe/grad_check.hpp"
#include "hypermoe/ops.hpp"
#include "hypermoe/train.hpp"

namespace hypermoe {

GradcheckReport run_gradcheck(const RunConfig& run, const GradcheckOptions& options) {
  const SyntheticTask task(run.task);
  ModelConfig cfg = run.model;
  task.apply_shapes(cfg);
  Rng init(cfg.seed);
  Model model = build_model(cfg, init);
  GradcheckReport report;
  report.total_parameters = model.parameter_count();
  if (report.total_parameters >= options.max_parameters) {
    throw ConfigError("gradcheck: model has " + std::to_string(report.total_parameters) +
                      " parameters, limit is " + std::to_string(options.max_parameters) +
                      "; reduce hidden, inner, num_experts or num_layers");
  }
  if (model.hyper && options.condition_hypernetwork) {
    // At the default init the hypernetwork's contribution to the loss sits
    // near double rounding for any usable step; redraw it at unit scale.
    HyperExpertModule& m = *model.hyper;
    Rng redraw = Rng(cfg.seed).fork(0xc0d1);
    auto unit = [&](Tensor& t, double std) { t = redraw.gaussian_tensor(t.shape(), std, true); };
    unit(m.net.w_down, 1.0 / std::sqrt(double(m.net.w_down.cols())));
    unit(m.net.w_up, 1.0 / std::sqrt(double(m.net.w_up.cols())));
    unit(m.tables.expert_embeddings, 1.0);
    unit(m.tables.layer_embeddings, 1.0);
  }
  Rng data = Rng(cfg.seed).fork(0x67c);
  const TaskBatch batch = task.sample(data, options.batch_size, Split::kTrain);
  auto loss = [&] {
    Rng noise = Rng(cfg.seed).fork(0x9015e);
    ForwardResult fwd = model_forward(model, batch, &noise, true);
    Tensor total = task_loss(task, fwd.output, batch);
    if (cfg.aux_loss_coef > 0.0 && !fwd.utilization.empty()) {
      total = add(total, scale(fwd.aux_loss, cfg.aux_loss_coef));
    }
    return total;
  };

  auto params = model.parameters();
  {
    std::unique_ptr<debug::ScopedBackwardFault> fault;
    if (!options.fault_op.empty()) {
      fault = std::make_unique<debug::ScopedBackwardFault>(options.fault_op, options.fault_scale);
    }
    backward(loss());
  }

  std::map<std::string, GroupCheck> groups;
  std::vector<std::string> order;
  for (NamedParameter& p : params) {
    const std::string g = parameter_group(p.name);
    if (!groups.count(g)) {
      order.push_back(g);
      groups[g].group = g;
    }
    Tensor analytic = p.tensor.has_grad() ? p.tensor.grad_tensor()
                                          : Tensor::zeros(p.tensor.shape());
    Tensor numeric = finite_diff_grad_inplace(
        [&] {
          NoGradGuard guard;
          return loss().item();
        },
        p.tensor, options.step);
    GroupCheck& gc = groups[g];
    gc.count += p.tensor.size();
    gc.max_relative_error = std::max(gc.max_relative_error,
                                     gradient_relative_error(analytic, numeric));
  }
  report.all_pass = true;
  for (const std::string& g : order) {
    GroupCheck gc = groups[g];
    gc.pass = gc.max_relative_error < options.tolerance;
    report.all_pass = report.all_pass && gc.pass;
    report.groups.push_back(gc);
  }
  return report;
}

std::string gradcheck_table(const GradcheckReport& report) {
  std::string out = "group,count,max_relative_error,result\n";
  char line[256];
  for (const GroupCheck& g : report.groups) {
    std::snprintf(line, sizeof line, "%s,%zu,%.3e,%s\n", g.group.c_str(), g.count,
                  g.max_relative_error, g.pass ? "pass" : "FAIL");
    out += line;
  }
  return out;
}

}  // namespace hypermoe
