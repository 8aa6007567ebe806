// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vital/kernels.hpp"
#include "vital/tensor.hpp"

namespace vital {

enum class BlockKind { plain, residual };
enum class Activation { relu, identity };

struct BlockSpec {
  std::string id;
  BlockKind kind = BlockKind::residual;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
};

struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;
};

/// A named block output that can be captured and matched.
struct LayerTap {
  std::string layer_id;
  int channel_count = 0;
  int spatial_size = 0;
  Shape3 shape;
};

struct ModelSpec {
  std::string architecture;
  Shape3 input;
  int class_count = 0;
  Normalization normalization;
  std::vector<BlockSpec> blocks;
  Activation activation = Activation::relu;
  bool use_bias = true;

  /// Throws ValidationError on an inconsistent spec.
  void validate() const;
};

/// Residual CNN: one residual block per width, the first at stride 1 and the
/// rest at stride 2, followed by global average pooling and a linear head.
ModelSpec resnet_desk(Shape3 input, int class_count, std::vector<int> widths,
                      Normalization norm);
/// Same block geometry with single-conv blocks and no skip connections.
ModelSpec plain_desk(Shape3 input, int class_count, std::vector<int> widths,
                     Normalization norm);

struct ConvParams {
  kernels::ConvGeometry geometry;
  std::vector<double> weight;
  std::vector<double> bias;
};

struct BlockParams {
  ConvParams conv1;
  std::optional<ConvParams> conv2;
  std::optional<ConvParams> shortcut;
};

struct LinearParams {
  int in_features = 0;
  int out_features = 0;
  std::vector<double> weight;  // [out][in]
  std::vector<double> bias;
};

struct NetworkParams {
  std::vector<BlockParams> blocks;
  LinearParams head;

  NetworkParams zeros_like() const;
  /// Visits every parameter array with a stable hierarchical name.
  template <typename Fn>
  void for_each(Fn&& fn);
  template <typename Fn>
  void for_each(Fn&& fn) const;
};

struct BlockTrace {
  FeatureMap input;
  FeatureMap pre1;
  FeatureMap act1;       // residual blocks only
  FeatureMap pre2;       // residual blocks only
  FeatureMap shortcut;   // projection output; empty for identity skips
  FeatureMap pre_out;    // input of the block's final nonlinearity
  FeatureMap output;
};

/// Per-call forward state; owns everything a backward pass needs.
struct ForwardTrace {
  FeatureMap normalized;
  std::vector<BlockTrace> blocks;
  std::vector<double> pooled;
  std::vector<double> logits;
};

enum class ReluBackward { standard, guided };

struct BackwardSeeds {
  std::map<std::size_t, FeatureMap> block_outputs;  // keyed by block index
  std::vector<double> pooled;                       // optional
  std::vector<double> logits;                       // optional
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, NetworkParams params);

  /// He-normal convolution weights, zero biases.
  static Model initialize(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<LayerTap>& taps() const { return taps_; }
  const NetworkParams& params() const { return params_; }
  NetworkParams& mutable_params() { return params_; }
  int class_count() const { return spec_.class_count; }
  Shape3 input_shape() const { return spec_.input; }
  int embedding_width() const { return params_.head.in_features; }

  const LayerTap& tap(std::string_view layer_id) const;
  std::size_t tap_index(std::string_view layer_id) const;
  /// The deepest tap, whose pooled output feeds the classifier head.
  const LayerTap& penultimate_tap() const { return taps_.back(); }

  /// Full forward pass. The image is in [0,1] pixel space; normalisation is
  /// applied here.
  ForwardTrace trace(const FeatureMap& image) const;
  ForwardTrace trace_until(const FeatureMap& image, std::size_t last_block) const;

  /// Backpropagates the seeded gradients to the pixel-space image. When
  /// `grads` is given, parameter gradients are accumulated into it; when
  /// `captured` is given, it receives the gradient at every block output the
  /// backward pass reached.
  FeatureMap backward(const ForwardTrace& trace, const BackwardSeeds& seeds,
                      ReluBackward mode = ReluBackward::standard, NetworkParams* grads = nullptr,
                      std::map<std::size_t, FeatureMap>* captured = nullptr) const;

  /// SHA-256 of the serialized weight archive.
  std::string weights_hash() const;

 private:
  ModelSpec spec_;
  NetworkParams params_;
  std::vector<LayerTap> taps_;
};

struct TapCapture {
  std::map<std::string, ActivationTensor> activations;
  std::vector<double> logits;
};

TapCapture forward_with_taps(const Model& model, const FeatureMap& image,
                             std::span<const std::string> taps);

/// Gradient of sum_l <seed_l, A_l(image)> with respect to the pixel image.
FeatureMap image_gradient(const Model& model, const FeatureMap& image,
                          const std::map<std::string, ActivationTensor>& tap_seeds);

/// One row per image: the pooled features feeding the classifier head.
Eigen::MatrixXd penultimate_embedding(const Model& model, std::span<const FeatureMap> images);

double activation_derivative(Activation a, double pre);

template <typename Fn>
void NetworkParams::for_each(Fn&& fn) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b + 1) + "/";
    auto& blk = blocks[b];
    fn(prefix + "conv1/weight", blk.conv1.weight);
    fn(prefix + "conv1/bias", blk.conv1.bias);
    if (blk.conv2) {
      fn(prefix + "conv2/weight", blk.conv2->weight);
      fn(prefix + "conv2/bias", blk.conv2->bias);
    }
    if (blk.shortcut) {
      fn(prefix + "shortcut/weight", blk.shortcut->weight);
      fn(prefix + "shortcut/bias", blk.shortcut->bias);
    }
  }
  fn(std::string("head/weight"), head.weight);
  fn(std::string("head/bias"), head.bias);
}

template <typename Fn>
void NetworkParams::for_each(Fn&& fn) const {
  const_cast<NetworkParams*>(this)->for_each(
      [&fn](const std::string& name, std::vector<double>& v) {
        fn(name, static_cast<const std::vector<double>&>(v));
      });
}

}  // namespace vital
