#include "hypermoe/hyperexpert.hpp"

#include <cmath>

#include "hypermoe/errors.hpp"
#include "hypermoe/ops.hpp"

namespace hypermoe {

namespace {

constexpr double kEmbeddingStd = 0.02;

Tensor fan_in_normal(Rng& rng, std::size_t in, std::size_t out) {
  return rng.gaussian_tensor({in, out}, 1.0 / std::sqrt(double(in)), true);
}

}  // namespace

Tensor SelectionMlp::forward(const Tensor& in) const {
  return add_row(matmul(relu(add_row(matmul(in, w1), b1)), w2), b2);
}

HyperNetParams make_hypernet(std::size_t hidden, std::size_t bottleneck,
                             std::size_t input_dim, Rng& rng) {
  if (bottleneck == 0 || bottleneck >= hidden) {
    throw ConfigError("bottleneck: b must satisfy 0 < b < h, got b=" +
                      std::to_string(bottleneck) +
                      " h=" + std::to_string(hidden));
  }
  // Variance 0.02^2 / sqrt(t_k): generated experts start close to zero.
  const double stddev = kEmbeddingStd / std::pow(double(input_dim), 0.25);
  HyperNetParams net;
  net.hidden = hidden;
  net.bottleneck = bottleneck;
  net.w_down = rng.gaussian_tensor({hidden * bottleneck, input_dim}, stddev, true);
  net.w_up = rng.gaussian_tensor({bottleneck * hidden, input_dim}, stddev, true);
  return net;
}

HyperExpertModule make_hyperexpert_module(const ModelConfig& cfg, Rng& rng) {
  HyperExpertModule m;
  const std::size_t t = cfg.selection_dim;
  const std::size_t tp = cfg.embedding_dim;
  const std::size_t hid = cfg.selection_hidden_width();
  const std::size_t mlp_in =
      cfg.embedding_source == EmbeddingSource::kNone ? cfg.hidden : tp;
  if (cfg.embedding_source == EmbeddingSource::kLearned) {
    m.tables.expert_embeddings =
        rng.gaussian_tensor({cfg.num_experts, tp}, kEmbeddingStd, true);
  }
  m.tables.layer_embeddings =
      rng.gaussian_tensor({cfg.num_layers, tp}, kEmbeddingStd, true);
  m.mlp.w1 = fan_in_normal(rng, mlp_in, hid);
  m.mlp.b1 = Tensor::zeros({1, hid}, true);
  m.mlp.w2 = fan_in_normal(rng, hid, t);
  m.mlp.b2 = Tensor::zeros({1, t}, true);
  m.projector.weight = fan_in_normal(rng, t + tp, cfg.hyper_input_dim);
  m.projector.bias = Tensor::zeros({1, cfg.hyper_input_dim}, true);
  m.net = make_hypernet(cfg.hidden, cfg.bottleneck, cfg.hyper_input_dim, rng);
  if (cfg.zero_hypernetwork) {
    for (double& v : m.net.w_down.mutable_data()) v = 0.0;
    for (double& v : m.net.w_up.mutable_data()) v = 0.0;
  }
  return m;
}

Tensor unselected_mask(const GateDecision& decision) {
  std::vector<double> values(decision.mask.data().begin(),
                             decision.mask.data().end());
  for (double& v : values) v = 1.0 - v;
  return Tensor::from(decision.mask.shape(), std::move(values));
}

Tensor aggregation_weights(const Tensor& mask) {
  const std::size_t t = mask.rows(), n = mask.cols();
  std::vector<double> w(mask.data().begin(), mask.data().end());
  for (std::size_t i = 0; i < t; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += w[i * n + j];
    if (total == 0.0) {
      throw DegenerateSelectionError(
          "token " + std::to_string(i) +
          " has no expert to aggregate; configure num_experts > top_k");
    }
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] /= total;
  }
  return Tensor::from({t, n}, std::move(w));
}

Tensor selection_embedding(const Tensor& mask, const Tensor& expert_embeddings,
                           const SelectionMlp& mlp) {
  if (mask.cols() != expert_embeddings.rows()) {
    throw DimensionError("selection embedding: mask covers " +
                         std::to_string(mask.cols()) + " experts, table has " +
                         std::to_string(expert_embeddings.rows()));
  }
  return mlp.forward(matmul(aggregation_weights(mask), expert_embeddings));
}

Tensor selection_embedding(const Tensor& mask, const EmbeddingTables& tables,
                           const SelectionMlp& mlp) {
  return selection_embedding(mask, tables.expert_embeddings, mlp);
}

Tensor combine_embeddings(const Tensor& p, std::size_t layer,
                          const EmbeddingTables& tables,
                          const Projector& projector) {
  const std::size_t num_layers = tables.layer_embeddings.rows();
  if (layer >= num_layers) {
    throw IndexError("layer index " + std::to_string(layer) +
                     " out of range for " + std::to_string(num_layers) +
                     " layer embeddings");
  }
  const std::vector<std::size_t> rows(p.rows(), layer);
  Tensor joined = concat_cols(p, gather_rows(tables.layer_embeddings, rows));
  return add_row(matmul(joined, projector.weight), projector.bias);
}

GeneratedExpert generate_hyperexpert(const Tensor& k, const HyperNetParams& net) {
  if (k.rank() != 2 || k.rows() != 1 || k.cols() != net.input_dim()) {
    throw DimensionError("hypernetwork input must be [1x" +
                         std::to_string(net.input_dim()) + "], got " +
                         shape_to_string(k.shape()));
  }
  Tensor column = transpose(k);
  return {reshape(matmul(net.w_down, column), {net.hidden, net.bottleneck}),
          reshape(matmul(net.w_up, column), {net.bottleneck, net.hidden})};
}

GeneratedExperts generate_hyperexperts(const Tensor& k,
                                       const HyperNetParams& net) {
  if (k.rank() != 2 || k.cols() != net.input_dim()) {
    throw DimensionError("hypernetwork input must have " +
                         std::to_string(net.input_dim()) + " columns, got " +
                         shape_to_string(k.shape()));
  }
  return {matmul(k, transpose(net.w_down)), matmul(k, transpose(net.w_up))};
}

Tensor hyperexpert_forward(const Tensor& x, const GeneratedExpert& gen) {
  return matmul(relu(matmul(x, gen.down)), gen.up);
}

Tensor hyperexpert_forward(const Tensor& x, const GeneratedExperts& gen,
                           const HyperNetParams& net) {
  Tensor hidden = relu(batched_vecmat(x, gen.down, net.bottleneck));
  return batched_vecmat(hidden, gen.up, net.hidden);
}

Tensor hyperexpert_term(const Tensor& x, const GateDecision& decision,
                        const HyperExpertModule& hyper, std::size_t layer,
                        const HyperExpertOptions& options) {
  Tensor p;
  if (options.source == EmbeddingSource::kNone) {
    p = hyper.mlp.forward(x);
  } else {
    Tensor mask = options.condition_on == ConditionOn::kUnselected
                      ? unselected_mask(decision)
                      : decision.mask;
    const Tensor& table = options.expert_embeddings_override.defined()
                              ? options.expert_embeddings_override
                              : hyper.tables.expert_embeddings;
    if (!table.defined()) {
      throw ConfigError("embedding_source: no expert embeddings available");
    }
    p = selection_embedding(mask, table, hyper.mlp);
  }
  Tensor k = combine_embeddings(p, layer, hyper.tables, hyper.projector);
  return hyperexpert_forward(x, generate_hyperexperts(k, hyper.net), hyper.net);
}

Tensor hypermoe_forward(const Tensor& x, const ExpertBank& bank,
                        const GateDecision& decision,
                        const HyperExpertModule& hyper, std::size_t layer,
                        const HyperExpertOptions& options) {
  Tensor routed =
      moe_forward(x, bank, decision, options.renormalize, options.stats);
  return add(routed, hyperexpert_term(x, decision, hyper, layer, options));
}

std::size_t ParamCountReport::total(std::size_t num_layers) const {
  const std::size_t per_layer = attention_per_layer + norms_per_layer +
                                dense_ffn_per_layer + gate_per_layer +
                                experts_per_layer + shared_mlp_per_layer;
  return token_embedding + value_projection + final_norm + head +
         num_layers * per_layer + hyperexpert_specific();
}

std::map<std::string, std::size_t> ParamCountReport::groups(
    std::size_t num_layers) const {
  std::map<std::string, std::size_t> out;
  auto put = [&out](const std::string& name, std::size_t count) {
    if (count) out[name] += count;
  };
  put("embed", token_embedding + value_projection);
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    put(prefix + "attn", attention_per_layer);
    put(prefix + "norm", norms_per_layer);
    put(prefix + "ffn", dense_ffn_per_layer);
    put(prefix + "gate", gate_per_layer);
    put(prefix + "experts", experts_per_layer);
    put(prefix + "shared", shared_mlp_per_layer);
  }
  put("final_norm", final_norm);
  put("head", head);
  put("hyper.w_down", hypernetwork / 2);
  put("hyper.w_up", hypernetwork / 2);
  put("hyper.expert_embeddings", expert_embeddings);
  put("hyper.layer_embeddings", layer_embeddings);
  put("hyper.selection_mlp", selection_mlp);
  put("hyper.projector", projector);
  return out;
}

ParamCountReport param_count_report(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden, ff = cfg.inner, n = cfg.num_experts;
  ParamCountReport r;
  r.token_embedding = cfg.vocab_size * h;
  r.value_projection = cfg.scalar_inputs ? h : 0;
  r.attention_per_layer = 4 * h * h;
  r.norms_per_layer = 4 * h;
  r.final_norm = 2 * h;
  r.head = h * cfg.output_dim + cfg.output_dim;
  const std::size_t ffn = h * ff + ff * h;
  switch (cfg.layer_kind) {
    case LayerKind::kDense:
      r.dense_ffn_per_layer = ffn;
      break;
    case LayerKind::kMoeShare:
      r.shared_mlp_per_layer = ffn;
      [[fallthrough]];
    case LayerKind::kMoe:
    case LayerKind::kHyperMoe:
      r.gate_per_layer = 2 * h * n;
      r.experts_per_layer = n * ffn;
      break;
  }
  if (cfg.layer_kind == LayerKind::kHyperMoe) {
    const std::size_t t = cfg.selection_dim, tp = cfg.embedding_dim;
    const std::size_t tk = cfg.hyper_input_dim, hid = cfg.selection_hidden_width();
    const std::size_t mlp_in = cfg.embedding_source == EmbeddingSource::kNone ? h : tp;
    r.hypernetwork = (h * cfg.bottleneck + cfg.bottleneck * h) * tk;
    r.expert_embeddings =
        cfg.embedding_source == EmbeddingSource::kLearned ? n * tp : 0;
    r.layer_embeddings = cfg.num_layers * tp;
    r.selection_mlp = mlp_in * hid + hid + hid * t + t;
    r.projector = (t + tp) * tk + tk;
  }
  return r;
}

}  // namespace hypermoe
