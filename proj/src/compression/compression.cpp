#include "hypermoe/compression.hpp"

#include <cmath>
#include <optional>

#include "hypermoe/errors.hpp"
#include "hypermoe/ops.hpp"

namespace hypermoe {

namespace {

void require_image(const Tensor& x) {
  if (!x.defined() || x.rank() != 3) {
    throw DimensionError("conv stage expects a [C x H x W] input, got " +
                         (x.defined() ? shape_to_string(x.shape())
                                      : std::string("undefined")));
  }
}

}  // namespace

ConvStage ConvStage::depthwise(std::size_t channels, std::size_t kh,
                               std::size_t kw, std::size_t sh, std::size_t sw) {
  return {Kind::kDepthwise, kh, kw, sh, sw, channels, channels};
}

ConvStage ConvStage::pointwise(std::size_t in_channels,
                               std::size_t out_channels) {
  return {Kind::kPointwise, 1, 1, 1, 1, in_channels, out_channels};
}

ConvStage ConvStage::avg_pool(std::size_t channels, std::size_t ph,
                              std::size_t pw, std::size_t sh, std::size_t sw) {
  return {Kind::kAvgPool, ph, pw, sh, sw, channels, channels};
}

Shape ConvStage::output_shape(const Shape& input) const {
  if (input.size() != 3) {
    throw DimensionError("conv stage expects [C x H x W], got " +
                         shape_to_string(input));
  }
  if (input[0] != in_channels) {
    throw DimensionError("conv stage expects " + std::to_string(in_channels) +
                         " channels, got " + shape_to_string(input));
  }
  if (kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0) {
    throw ConfigError("conv stage kernel and stride extents must be positive");
  }
  if (kernel_h > input[1] || kernel_w > input[2]) {
    throw DimensionError("kernel " + std::to_string(kernel_h) + "x" +
                         std::to_string(kernel_w) + " larger than input " +
                         shape_to_string(input));
  }
  return {out_channels, (input[1] - kernel_h) / stride_h + 1,
          (input[2] - kernel_w) / stride_w + 1};
}

Shape ConvStage::kernel_shape() const {
  switch (kind) {
    case Kind::kDepthwise: return {in_channels, kernel_h, kernel_w};
    case Kind::kPointwise: return {out_channels, in_channels};
    case Kind::kAvgPool: return {};
  }
  return {};
}

std::vector<Shape> ConvPipelineSpec::shape_chain(const Shape& input) const {
  std::vector<Shape> chain{input};
  for (const ConvStage& stage : stages) {
    chain.push_back(stage.output_shape(chain.back()));
  }
  const Shape expected{output_dim, 1, 1};
  if (chain.back() != expected) {
    throw ConfigError("conv pipeline ends at " +
                      shape_to_string(chain.back()) + ", expected " +
                      shape_to_string(expected));
  }
  return chain;
}

ConvPipelineSpec ConvPipelineSpec::reference_scale() {
  ConvPipelineSpec spec;
  spec.stages = {ConvStage::depthwise(2, 5, 5, 5, 5),
                 ConvStage::pointwise(2, 32),
                 ConvStage::avg_pool(32, 16, 6, 16, 6),
                 ConvStage::depthwise(32, 3, 3, 3, 3),
                 ConvStage::pointwise(32, 128),
                 ConvStage::avg_pool(128, 8, 8, 8, 8)};
  spec.output_dim = 128;
  return spec;
}

ConvPipelineSpec ConvPipelineSpec::desk_scale(std::size_t inner,
                                              std::size_t hidden,
                                              std::size_t output_dim) {
  const std::size_t kh = std::min<std::size_t>(2, inner);
  const std::size_t kw = std::min<std::size_t>(2, hidden);
  const std::size_t h1 = (inner - kh) / kh + 1;
  const std::size_t w1 = (hidden - kw) / kw + 1;
  ConvPipelineSpec spec;
  spec.stages = {ConvStage::depthwise(2, kh, kw, kh, kw),
                 ConvStage::pointwise(2, output_dim),
                 ConvStage::avg_pool(output_dim, h1, w1, h1, w1)};
  spec.output_dim = output_dim;
  return spec;
}

ConvPipeline ConvPipeline::make(ConvPipelineSpec spec, Rng& rng) {
  ConvPipeline pipeline;
  for (const ConvStage& stage : spec.stages) {
    const Shape shape = stage.kernel_shape();
    if (shape.empty()) {
      pipeline.kernels.emplace_back();
      continue;
    }
    const double fan_in = stage.kind == ConvStage::Kind::kDepthwise
                              ? double(stage.kernel_h * stage.kernel_w)
                              : double(stage.in_channels);
    pipeline.kernels.push_back(rng.gaussian_tensor(shape, 1.0 / std::sqrt(fan_in)));
  }
  pipeline.spec = std::move(spec);
  return pipeline;
}

Tensor ConvPipeline::forward(const Tensor& image) const {
  require_image(image);
  spec.shape_chain(image.shape());
  Tensor x = image;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    x = conv_stage_forward(x, spec.stages[s], kernels[s]);
  }
  return x;
}

Tensor conv_stage_forward(const Tensor& x, const ConvStage& stage,
                          const Tensor& kernel) {
  require_image(x);
  const Shape out_shape = stage.output_shape(x.shape());
  const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t c_out = out_shape[0], ho = out_shape[1], wo = out_shape[2];
  const std::size_t kh = stage.kernel_h, kw = stage.kernel_w;
  const std::size_t sh = stage.stride_h, sw = stage.stride_w;
  const auto in = x.data();
  std::vector<double> out(c_out * ho * wo, 0.0);

  if (stage.kind != ConvStage::Kind::kAvgPool &&
      (!kernel.defined() || kernel.shape() != stage.kernel_shape())) {
    throw DimensionError("conv stage kernel must be " +
                         shape_to_string(stage.kernel_shape()));
  }

  switch (stage.kind) {
    case ConvStage::Kind::kDepthwise:
    case ConvStage::Kind::kAvgPool: {
      const bool pool = stage.kind == ConvStage::Kind::kAvgPool;
      const double inv_area = 1.0 / double(kh * kw);
      const auto kd = pool ? std::span<const double>{} : kernel.data();
      for (std::size_t c = 0; c < c_in; ++c) {
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            double acc = 0.0;
            for (std::size_t a = 0; a < kh; ++a) {
              for (std::size_t b = 0; b < kw; ++b) {
                const double v = in[(c * h + i * sh + a) * w + j * sw + b];
                acc += pool ? v : v * kd[(c * kh + a) * kw + b];
              }
            }
            out[(c * ho + i) * wo + j] = pool ? acc * inv_area : acc;
          }
        }
      }
      std::vector<Tensor> inputs{x};
      if (!pool) inputs.push_back(kernel);
      return Tensor::make_result(
          out_shape, std::move(out), inputs,
          [=](detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node* pk = pool ? nullptr : self.parents[1].get();
            for (std::size_t c = 0; c < c_in; ++c) {
              for (std::size_t i = 0; i < ho; ++i) {
                for (std::size_t j = 0; j < wo; ++j) {
                  const double g = self.grad[(c * ho + i) * wo + j];
                  for (std::size_t a = 0; a < kh; ++a) {
                    for (std::size_t b = 0; b < kw; ++b) {
                      const std::size_t xi = (c * h + i * sh + a) * w + j * sw + b;
                      const std::size_t ki = (c * kh + a) * kw + b;
                      if (px.requires_grad) {
                        px.grad_buffer()[xi] += g * (pool ? inv_area : pk->data[ki]);
                      }
                      if (pk && pk->requires_grad) {
                        pk->grad_buffer()[ki] += g * px.data[xi];
                      }
                    }
                  }
                }
              }
            }
          });
    }
    case ConvStage::Kind::kPointwise: {
      const auto kd = kernel.data();
      const std::size_t plane = h * w;
      for (std::size_t o = 0; o < c_out; ++o) {
        for (std::size_t c = 0; c < c_in; ++c) {
          const double weight = kd[o * c_in + c];
          for (std::size_t p = 0; p < plane; ++p) {
            out[o * plane + p] += weight * in[c * plane + p];
          }
        }
      }
      return Tensor::make_result(
          out_shape, std::move(out), {x, kernel},
          [=](detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node& pk = *self.parents[1];
            for (std::size_t o = 0; o < c_out; ++o) {
              for (std::size_t c = 0; c < c_in; ++c) {
                double acc = 0.0;
                for (std::size_t p = 0; p < plane; ++p) {
                  const double g = self.grad[o * plane + p];
                  if (px.requires_grad) {
                    px.grad_buffer()[c * plane + p] += g * pk.data[o * c_in + c];
                  }
                  acc += g * px.data[c * plane + p];
                }
                if (pk.requires_grad) pk.grad_buffer()[o * c_in + c] += acc;
              }
            }
          });
    }
  }
  throw ContractError("unknown conv stage kind");
}

Tensor stack_expert_weights(const ExpertWeights& expert) {
  const std::size_t inner = expert.w1.cols(), hidden = expert.w1.rows();
  if (expert.w2.shape() != Shape{inner, hidden}) {
    throw ConfigError("expert weights: W2 must be " +
                      shape_to_string({inner, hidden}) + ", got " +
                      shape_to_string(expert.w2.shape()));
  }
  return reshape(concat_rows({transpose(expert.w1), expert.w2}),
                 {2, inner, hidden});
}

Tensor compress_expert_weights(const ExpertBank& bank,
                               const ConvPipeline& pipeline,
                               bool differentiable) {
  std::optional<NoGradGuard> frozen;
  if (!differentiable) frozen.emplace();
  std::vector<Tensor> rows;
  rows.reserve(bank.size());
  for (const ExpertWeights& expert : bank.experts) {
    Tensor image = stack_expert_weights(expert);
    try {
      pipeline.spec.shape_chain(image.shape());
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("conv pipeline does not fit expert weights: ") +
                        e.what());
    }
    rows.push_back(reshape(pipeline.forward(image), {1, pipeline.spec.output_dim}));
  }
  return concat_rows(rows);
}

}  // namespace hypermoe
