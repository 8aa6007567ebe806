// SPDX-License-Identifier: Apache-2.0
#include "vital/kernels.hpp"

#include <Eigen/Core>
#include <vector>

#include "vital/errors.hpp"

namespace vital::kernels {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapConst = Eigen::Map<const RowMatrix>;
using MapMut = Eigen::Map<RowMatrix>;

void check_input(const ConvGeometry& g, const Shape3& in) {
  if (in.channels != g.in_channels) {
    throw ValidationError("conv2d expects " + std::to_string(g.in_channels) +
                          " input channels, got " + to_string(in));
  }
}

// Lowered matrix of shape (in*k*k) x (out_h*out_w).
std::vector<double> im2col(const ConvGeometry& g, const FeatureMap& input, const Shape3& out) {
  const Shape3& in = input.shape();
  const int k = g.kernel;
  const int rows = g.in_channels * k * k;
  const std::size_t cols = out.spatial();
  std::vector<double> lowered(static_cast<std::size_t>(rows) * cols, 0.0);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int ci = r / (k * k);
    const int ky = (r / k) % k;
    const int kx = r % k;
    double* dst = lowered.data() + static_cast<std::size_t>(r) * cols;
    for (int oy = 0; oy < out.height; ++oy) {
      const int iy = oy * g.stride - g.pad + ky;
      if (iy < 0 || iy >= in.height) continue;
      for (int ox = 0; ox < out.width; ++ox) {
        const int ix = ox * g.stride - g.pad + kx;
        if (ix < 0 || ix >= in.width) continue;
        dst[oy * out.width + ox] = input.at(ci, iy, ix);
      }
    }
  }
  return lowered;
}

// Scatter-add of a lowered gradient back to image layout. Parallel over input
// channels so that no two threads write the same element.
FeatureMap col2im(const ConvGeometry& g, const std::vector<double>& lowered, const Shape3& in,
                  const Shape3& out) {
  FeatureMap result(in);
  const int k = g.kernel;
  const std::size_t cols = out.spatial();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.in_channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int r = (ci * k + ky) * k + kx;
        const double* src = lowered.data() + static_cast<std::size_t>(r) * cols;
        for (int oy = 0; oy < out.height; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < out.width; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= in.width) continue;
            result.at(ci, iy, ix) += src[oy * out.width + ox];
          }
        }
      }
    }
  }
  return result;
}

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

Shape3 ConvGeometry::output_shape(const Shape3& in) const {
  const int h = (in.height + 2 * pad - kernel) / stride + 1;
  const int w = (in.width + 2 * pad - kernel) / stride + 1;
  if (h <= 0 || w <= 0) {
    throw ValidationError("conv2d output would be empty for input " + to_string(in));
  }
  return {out_channels, h, w};
}

FeatureMap conv2d_forward(const ConvGeometry& g, std::span<const double> weight,
                          std::span<const double> bias, const FeatureMap& input) {
  check_input(g, input.shape());
  const Shape3 out = g.output_shape(input.shape());
  const int rows = g.in_channels * g.kernel * g.kernel;
  const auto cols = static_cast<Eigen::Index>(out.spatial());

  FeatureMap result(out);
  MapConst w(weight.data(), g.out_channels, rows);
  MapMut y(result.data(), g.out_channels, cols);
  if (is_pointwise(g)) {
    y.noalias() = w * MapConst(input.data(), rows, cols);
  } else {
    const std::vector<double> lowered = im2col(g, input, out);
    y.noalias() = w * MapConst(lowered.data(), rows, cols);
  }
  if (!bias.empty()) {
    for (int co = 0; co < g.out_channels; ++co) y.row(co).array() += bias[co];
  }
  return result;
}

FeatureMap conv2d_backward_input(const ConvGeometry& g, std::span<const double> weight,
                                 const FeatureMap& grad_out, const Shape3& input_shape) {
  check_input(g, input_shape);
  const Shape3 out = g.output_shape(input_shape);
  if (grad_out.shape() != out) {
    throw ValidationError("conv2d gradient shape " + to_string(grad_out.shape()) +
                          " does not match output " + to_string(out));
  }
  const int rows = g.in_channels * g.kernel * g.kernel;
  const auto cols = static_cast<Eigen::Index>(out.spatial());
  MapConst w(weight.data(), g.out_channels, rows);
  MapConst dy(grad_out.data(), g.out_channels, cols);
  if (is_pointwise(g)) {
    FeatureMap result(input_shape);
    MapMut(result.data(), rows, cols).noalias() = w.transpose() * dy;
    return result;
  }
  std::vector<double> lowered(static_cast<std::size_t>(rows) * cols);
  MapMut(lowered.data(), rows, cols).noalias() = w.transpose() * dy;
  return col2im(g, lowered, input_shape, out);
}

void conv2d_backward_params(const ConvGeometry& g, const FeatureMap& input,
                            const FeatureMap& grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  check_input(g, input.shape());
  const Shape3 out = g.output_shape(input.shape());
  if (grad_out.shape() != out) {
    throw ValidationError("conv2d gradient shape mismatch in parameter backward");
  }
  const int rows = g.in_channels * g.kernel * g.kernel;
  const auto cols = static_cast<Eigen::Index>(out.spatial());
  MapMut dw(grad_weight.data(), g.out_channels, rows);
  MapConst dy(grad_out.data(), g.out_channels, cols);
  if (is_pointwise(g)) {
    dw.noalias() += dy * MapConst(input.data(), rows, cols).transpose();
  } else {
    const std::vector<double> lowered = im2col(g, input, out);
    dw.noalias() += dy * MapConst(lowered.data(), rows, cols).transpose();
  }
  if (!grad_bias.empty()) {
    for (int co = 0; co < g.out_channels; ++co) grad_bias[co] += dy.row(co).sum();
  }
}

namespace reference {

FeatureMap conv2d_forward(const ConvGeometry& g, std::span<const double> weight,
                          std::span<const double> bias, const FeatureMap& input) {
  check_input(g, input.shape());
  const Shape3 in = input.shape();
  const Shape3 out = g.output_shape(in);
  const int k = g.kernel;
  FeatureMap result(out);
  for (int co = 0; co < out.channels; ++co) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (int ci = 0; ci < in.channels; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= in.width) continue;
              acc += weight[((static_cast<std::size_t>(co) * in.channels + ci) * k + ky) * k + kx] *
                     input.at(ci, iy, ix);
            }
          }
        }
        result.at(co, oy, ox) = acc;
      }
    }
  }
  return result;
}

FeatureMap conv2d_backward_input(const ConvGeometry& g, std::span<const double> weight,
                                 const FeatureMap& grad_out, const Shape3& input_shape) {
  check_input(g, input_shape);
  const Shape3 out = g.output_shape(input_shape);
  const int k = g.kernel;
  FeatureMap result(input_shape);
  for (int co = 0; co < out.channels; ++co) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        const double dy = grad_out.at(co, oy, ox);
        for (int ci = 0; ci < input_shape.channels; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= input_shape.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= input_shape.width) continue;
              result.at(ci, iy, ix) +=
                  weight[((static_cast<std::size_t>(co) * input_shape.channels + ci) * k + ky) * k +
                         kx] *
                  dy;
            }
          }
        }
      }
    }
  }
  return result;
}

void conv2d_backward_params(const ConvGeometry& g, const FeatureMap& input,
                            const FeatureMap& grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  check_input(g, input.shape());
  const Shape3 in = input.shape();
  const Shape3 out = g.output_shape(in);
  const int k = g.kernel;
  for (int co = 0; co < out.channels; ++co) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        const double dy = grad_out.at(co, oy, ox);
        if (!grad_bias.empty()) grad_bias[co] += dy;
        for (int ci = 0; ci < in.channels; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= in.width) continue;
              grad_weight[((static_cast<std::size_t>(co) * in.channels + ci) * k + ky) * k + kx] +=
                  input.at(ci, iy, ix) * dy;
            }
          }
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace vital::kernels
