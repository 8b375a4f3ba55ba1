#include "hypermoe/model.hpp"

#include <cmath>

#include "hypermoe/errors.hpp"
#include "hypermoe/ops.hpp"

namespace hypermoe {

namespace {

std::uint64_t stream_id(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor fan_in(Rng& rng, std::size_t in, std::size_t out) {
  return rng.gaussian_tensor({in, out}, 1.0 / std::sqrt(double(in)), true);
}

NormParams make_norm(std::size_t h) {
  return {Tensor::full({1, h}, 1.0, true), Tensor::zeros({1, h}, true)};
}

Tensor positions(std::size_t batch, std::size_t seq_len, std::size_t h) {
  std::vector<double> pe(batch * seq_len * h);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t c = 0; c < h; ++c) {
      const double rate = std::pow(10000.0, -double(c / 2 * 2) / double(h));
      const double v = c % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate);
      for (std::size_t b = 0; b < batch; ++b) pe[(b * seq_len + pos) * h + c] = v;
    }
  }
  return Tensor::from({batch * seq_len, h}, std::move(pe));
}

// [batch x batch*seq_len] averaging matrix, one block of 1/seq_len per row.
Tensor pooling(std::size_t batch, std::size_t seq_len) {
  std::vector<double> p(batch * batch * seq_len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < seq_len; ++s) {
      p[b * batch * seq_len + b * seq_len + s] = 1.0 / double(seq_len);
    }
  }
  return Tensor::from({batch, batch * seq_len}, std::move(p));
}

}  // namespace

std::vector<NamedParameter> Model::parameters() const {
  std::vector<NamedParameter> out;
  auto put = [&out](std::string name, const Tensor& t) {
    if (t.defined()) out.push_back({std::move(name), t});
  };
  put("embed.token", token_embedding);
  put("embed.value", value_projection);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    put(p + "norm.ln1_gain", b.ln1.gain);
    put(p + "norm.ln1_bias", b.ln1.bias);
    put(p + "norm.ln2_gain", b.ln2.gain);
    put(p + "norm.ln2_bias", b.ln2.bias);
    put(p + "attn.wq", b.attn.wq);
    put(p + "attn.wk", b.attn.wk);
    put(p + "attn.wv", b.attn.wv);
    put(p + "attn.wo", b.attn.wo);
    put(p + "ffn.w1", b.ffn.w1);
    put(p + "ffn.w2", b.ffn.w2);
    put(p + "gate.w_gate", b.gate.w_gate);
    put(p + "gate.w_noise", b.gate.w_noise);
    for (std::size_t e = 0; e < b.experts.experts.size(); ++e) {
      put(p + "experts." + std::to_string(e) + ".w1", b.experts.experts[e].w1);
      put(p + "experts." + std::to_string(e) + ".w2", b.experts.experts[e].w2);
    }
    put(p + "shared.w1", b.shared.w1);
    put(p + "shared.w2", b.shared.w2);
  }
  put("final_norm.gain", final_norm.gain);
  put("final_norm.bias", final_norm.bias);
  put("head.weight", head_weight);
  put("head.bias", head_bias);
  if (hyper) {
    put("hyper.w_down", hyper->net.w_down);
    put("hyper.w_up", hyper->net.w_up);
    put("hyper.expert_embeddings", hyper->tables.expert_embeddings);
    put("hyper.layer_embeddings", hyper->tables.layer_embeddings);
    put("hyper.selection_mlp.w1", hyper->mlp.w1);
    put("hyper.selection_mlp.b1", hyper->mlp.b1);
    put("hyper.selection_mlp.w2", hyper->mlp.w2);
    put("hyper.selection_mlp.b2", hyper->mlp.b2);
    put("hyper.projector.weight", hyper->projector.weight);
    put("hyper.projector.bias", hyper->projector.bias);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.size();
  return total;
}

std::string parameter_group(const std::string& name) {
  const auto first = name.find('.');
  if (first == std::string::npos) return name;
  if (name.starts_with("layer") || name.starts_with("hyper.")) {
    const auto second = name.find('.', first + 1);
    if (second != std::string::npos) return name.substr(0, second);
    return name;
  }
  return name.substr(0, first);
}

Model build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const std::size_t h = cfg.hidden;
  auto stream = [&rng](const std::string& name) { return rng.fork(stream_id(name)); };

  Rng r = stream("embed.token");
  m.token_embedding = r.gaussian_tensor({cfg.vocab_size, h}, 1.0, true);
  if (cfg.scalar_inputs) {
    r = stream("embed.value");
    m.value_projection = r.gaussian_tensor({1, h}, 1.0, true);
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Block b;
    b.ln1 = make_norm(h);
    b.ln2 = make_norm(h);
    r = stream(p + "attn");
    b.attn = {fan_in(r, h, h), fan_in(r, h, h), fan_in(r, h, h), fan_in(r, h, h)};
    if (cfg.layer_kind == LayerKind::kDense) {
      r = stream(p + "ffn");
      b.ffn = make_expert(h, cfg.inner, r);
    } else {
      r = stream(p + "gate");
      b.gate.num_experts = cfg.num_experts;
      b.gate.top_k = cfg.top_k;
      b.gate.noise_enabled = cfg.noise_enabled;
      b.gate.w_gate = fan_in(r, h, cfg.num_experts);
      b.gate.w_noise = Tensor::zeros({h, cfg.num_experts}, true);
      r = stream(p + "experts");
      b.experts = make_expert_bank(cfg.num_experts, h, cfg.inner, r);
      if (cfg.layer_kind == LayerKind::kMoeShare) {
        r = stream(p + "shared");
        b.shared = make_expert(h, cfg.inner, r);
      }
    }
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = make_norm(h);
  r = stream("head");
  m.head_weight = fan_in(r, h, cfg.output_dim);
  m.head_bias = Tensor::zeros({1, cfg.output_dim}, true);
  if (cfg.layer_kind == LayerKind::kHyperMoe) {
    r = stream("hyper");
    m.hyper = make_hyperexpert_module(cfg, r);
    if (cfg.embedding_source == EmbeddingSource::kCompressed) {
      r = stream("hyper.compression");
      m.compression = ConvPipeline::make(
          ConvPipelineSpec::desk_scale(cfg.inner, h, cfg.embedding_dim), r);
    }
  }
  return m;
}

ForwardResult model_forward(const Model& model, const TaskBatch& batch,
                            Rng* noise, bool training) {
  const ModelConfig& cfg = model.cfg;
  if (batch.seq_len != cfg.seq_len) {
    throw DimensionError("batch sequence length " + std::to_string(batch.seq_len) +
                         " does not match model (" + std::to_string(cfg.seq_len) + ")");
  }
  const std::size_t rows = batch.batch * batch.seq_len;
  Tensor x = gather_rows(model.token_embedding, batch.tokens);
  if (cfg.scalar_inputs) {
    x = add(x, matmul(Tensor::from({rows, 1}, batch.values), model.value_projection));
  }
  x = add(x, positions(batch.batch, batch.seq_len, cfg.hidden));

  ForwardResult result;
  std::vector<Tensor> aux_terms;
  Rng quiet(0);
  Rng& gate_rng = noise ? *noise : quiet;
  const bool noisy = training && noise != nullptr;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const Block& b = model.blocks[l];
    Tensor a = layer_norm(x, b.ln1.gain, b.ln1.bias);
    Tensor att = sequence_attention(matmul(a, b.attn.wq), matmul(a, b.attn.wk),
                                    matmul(a, b.attn.wv), batch.seq_len);
    x = add(x, matmul(att, b.attn.wo));
    Tensor f = layer_norm(x, b.ln2.gain, b.ln2.bias);
    Tensor y;
    if (cfg.layer_kind == LayerKind::kDense) {
      y = expert_forward(f, b.ffn);
    } else {
      GateDecision d = noisy_topk_gate(f, b.gate, gate_rng, noisy);
      MoeStats stats;
      switch (cfg.layer_kind) {
        case LayerKind::kMoe:
          y = moe_forward(f, b.experts, d, cfg.renormalize_gates, &stats);
          break;
        case LayerKind::kMoeShare:
          y = moe_share_forward(f, b.experts, b.shared, d, cfg.renormalize_gates, &stats);
          break;
        default: {
          HyperExpertOptions opt;
          opt.condition_on = cfg.condition_on;
          opt.source = cfg.embedding_source;
          opt.renormalize = cfg.renormalize_gates;
          opt.stats = &stats;
          if (model.compression) {
            opt.expert_embeddings_override =
                compress_expert_weights(b.experts, *model.compression);
          }
          y = hypermoe_forward(f, b.experts, d, *model.hyper, l, opt);
        }
      }
      result.expert_evaluations += stats.expert_evaluations;
      result.utilization.push_back(expert_histogram(d));
      aux_terms.push_back(load_balance_loss(d));
    }
    x = add(x, y);
  }
  x = layer_norm(x, model.final_norm.gain, model.final_norm.bias);
  Tensor pooled = matmul(pooling(batch.batch, batch.seq_len), x);
  result.output = add_row(matmul(pooled, model.head_weight), model.head_bias);
  if (aux_terms.empty()) {
    result.aux_loss = Tensor::scalar(0.0);
  } else {
    Tensor total = aux_terms[0];
    for (std::size_t i = 1; i < aux_terms.size(); ++i) total = add(total, aux_terms[i]);
    result.aux_loss = scale(total, 1.0 / double(aux_terms.size()));
  }
  return result;
}

}  // namespace hypermoe
