// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "vital/tensor.hpp"

// Convolution kernels. The default path lowers to im2col + GEMM with OpenMP
// over the lowered rows; `reference` holds direct loop-nest versions that the
// tests and the benchmark compare against.
namespace vital::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Shape3 output_shape(const Shape3& in) const;
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

// Weights are laid out [out][in][ky][kx]; bias may be empty.
FeatureMap conv2d_forward(const ConvGeometry& g, std::span<const double> weight,
                          std::span<const double> bias, const FeatureMap& input);

FeatureMap conv2d_backward_input(const ConvGeometry& g, std::span<const double> weight,
                                 const FeatureMap& grad_out, const Shape3& input_shape);

// Accumulates into grad_weight / grad_bias (grad_bias may be empty).
void conv2d_backward_params(const ConvGeometry& g, const FeatureMap& input,
                            const FeatureMap& grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias);

namespace reference {

FeatureMap conv2d_forward(const ConvGeometry& g, std::span<const double> weight,
                          std::span<const double> bias, const FeatureMap& input);
FeatureMap conv2d_backward_input(const ConvGeometry& g, std::span<const double> weight,
                                 const FeatureMap& grad_out, const Shape3& input_shape);
void conv2d_backward_params(const ConvGeometry& g, const FeatureMap& input,
                            const FeatureMap& grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias);

}  // namespace reference

}  // namespace vital::kernels
