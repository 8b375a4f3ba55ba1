#pragma once

#include <cstddef>
#include <vector>

#include "hypermoe/moe.hpp"
#include "hypermoe/rng.hpp"
#include "hypermoe/tensor.hpp"

namespace hypermoe {

// Valid (unpadded) convolution / pooling stage over a [C x H x W] image.
// Output extents are floor((H - kh) / sh) + 1 and likewise for W.
struct ConvStage {
  enum class Kind { kDepthwise, kPointwise, kAvgPool };

  Kind kind = Kind::kDepthwise;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;  // pointwise only; others keep in_channels

  static ConvStage depthwise(std::size_t channels, std::size_t kh,
                             std::size_t kw, std::size_t sh, std::size_t sw);
  static ConvStage pointwise(std::size_t in_channels, std::size_t out_channels);
  static ConvStage avg_pool(std::size_t channels, std::size_t ph,
                            std::size_t pw, std::size_t sh, std::size_t sw);

  Shape output_shape(const Shape& input) const;
  // Kernel tensor shape; empty for pooling.
  Shape kernel_shape() const;
};

struct ConvPipelineSpec {
  std::vector<ConvStage> stages;
  std::size_t output_dim = 0;

  /// Input shape followed by every stage's output shape. Throws DimensionError
  /// when a stage does not fit its input, ConfigError when the chain does not
  /// end at [output_dim x 1 x 1].
  std::vector<Shape> shape_chain(const Shape& input) const;

  // The depthwise-separable stack used on 3072 x 768 expert weights.
  static ConvPipelineSpec reference_scale();
  // Same stage pattern sized for an inner x hidden expert and t' outputs.
  static ConvPipelineSpec desk_scale(std::size_t inner, std::size_t hidden,
                                     std::size_t output_dim);
};

/// A spec with its frozen kernels (one per conv stage, none for pooling).
struct ConvPipeline {
  ConvPipelineSpec spec;
  std::vector<Tensor> kernels;

  static ConvPipeline make(ConvPipelineSpec spec, Rng& rng);
  Tensor forward(const Tensor& image) const;
};

// Depthwise kernel is [C x kh x kw]; pointwise kernel is [C_out x C_in];
// pooling takes no kernel.
Tensor conv_stage_forward(const Tensor& x, const ConvStage& stage,
                          const Tensor& kernel = {});

// Channel 0 = W1^T, channel 1 = W2, both [d_ff x h].
Tensor stack_expert_weights(const ExpertWeights& expert);

/// Per expert, run the stacked weights through the pipeline and flatten to a
/// t'-vector; result is [N x t']. Gradients reach the expert weights only
/// when `differentiable` is set.
Tensor compress_expert_weights(const ExpertBank& bank,
                               const ConvPipeline& pipeline,
                               bool differentiable = false);

}  // namespace hypermoe
