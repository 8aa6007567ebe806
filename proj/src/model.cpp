// SPDX-License-Identifier: Apache-2.0
#include "vital/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vital/archive.hpp"
#include "vital/errors.hpp"
#include "vital/hash.hpp"

namespace vital {

namespace {

double activate(Activation a, double v) {
  return a == Activation::relu ? (v > 0.0 ? v : 0.0) : v;
}

FeatureMap apply_activation(Activation a, const FeatureMap& pre) {
  if (a == Activation::identity) return pre;
  FeatureMap out(pre.shape());
  const auto& src = pre.values();
  auto& dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = activate(a, src[i]);
  return out;
}

// grad_out -> grad_pre through the nonlinearity; guided mode additionally
// zeroes negative upstream gradients.
FeatureMap activation_backward(Activation a, const FeatureMap& pre, const FeatureMap& grad_out,
                               ReluBackward mode) {
  FeatureMap g(grad_out.shape());
  const auto& p = pre.values();
  const auto& go = grad_out.values();
  auto& dst = g.values();
  for (std::size_t i = 0; i < go.size(); ++i) {
    double v = go[i] * activation_derivative(a, p[i]);
    if (mode == ReluBackward::guided && a == Activation::relu && go[i] < 0.0) v = 0.0;
    dst[i] = v;
  }
  return g;
}

void add_into(FeatureMap& dst, const FeatureMap& src) {
  auto& d = dst.values();
  const auto& s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

ConvParams make_conv(int in, int out, int kernel, int stride, bool bias) {
  ConvParams p;
  p.geometry = {in, out, kernel, stride, kernel / 2};
  p.weight.assign(p.geometry.weight_count(), 0.0);
  if (bias) p.bias.assign(static_cast<std::size_t>(out), 0.0);
  return p;
}

NetworkParams allocate(const ModelSpec& spec) {
  NetworkParams params;
  for (const auto& b : spec.blocks) {
    BlockParams bp;
    bp.conv1 = make_conv(b.in_channels, b.out_channels, 3, b.stride, spec.use_bias);
    if (b.kind == BlockKind::residual) {
      bp.conv2 = make_conv(b.out_channels, b.out_channels, 3, 1, spec.use_bias);
      if (b.in_channels != b.out_channels || b.stride != 1) {
        bp.shortcut = make_conv(b.in_channels, b.out_channels, 1, b.stride, spec.use_bias);
      }
    }
    params.blocks.push_back(std::move(bp));
  }
  params.head.in_features = spec.blocks.back().out_channels;
  params.head.out_features = spec.class_count;
  params.head.weight.assign(
      static_cast<std::size_t>(params.head.in_features) * params.head.out_features, 0.0);
  params.head.bias.assign(static_cast<std::size_t>(spec.class_count), 0.0);
  return params;
}

void check_params(const ModelSpec& spec, const NetworkParams& params) {
  const NetworkParams expected = allocate(spec);
  std::vector<std::pair<std::string, std::size_t>> want;
  expected.for_each([&](const std::string& n, const std::vector<double>& v) {
    want.emplace_back(n, v.size());
  });
  std::size_t i = 0;
  bool ok = params.blocks.size() == expected.blocks.size();
  if (ok) {
    params.for_each([&](const std::string& n, const std::vector<double>& v) {
      if (i >= want.size() || want[i].first != n || want[i].second != v.size()) ok = false;
      ++i;
    });
  }
  if (!ok || i != want.size()) {
    throw ValidationError("parameters do not match architecture '" + spec.architecture + "'");
  }
}

ModelSpec desk_spec(std::string name, BlockKind kind, Shape3 input, int class_count,
                    std::vector<int> widths, Normalization norm) {
  ModelSpec spec;
  spec.architecture = std::move(name);
  spec.input = input;
  spec.class_count = class_count;
  spec.normalization = std::move(norm);
  int in = input.channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    spec.blocks.push_back(
        {"block" + std::to_string(i + 1), kind, in, widths[i], i == 0 ? 1 : 2});
    in = widths[i];
  }
  spec.validate();
  return spec;
}

}  // namespace

double activation_derivative(Activation a, double pre) {
  return a == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0;
}

void ModelSpec::validate() const {
  if (class_count < 2) throw ValidationError("class_count must be >= 2");
  if (input.channels < 1 || input.height < 1 || input.width < 1) {
    throw ValidationError("input geometry must be positive");
  }
  if (normalization.mean.size() != static_cast<std::size_t>(input.channels) ||
      normalization.std.size() != static_cast<std::size_t>(input.channels)) {
    throw ValidationError("normalization constants must have one entry per input channel");
  }
  for (double s : normalization.std) {
    if (!(s > 0.0)) throw ValidationError("normalization std must be strictly positive");
  }
  if (blocks.empty()) throw ValidationError("model needs at least one block");
  int in = input.channels;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (b.in_channels != in || b.out_channels < 1 || b.stride < 1) {
      throw ValidationError("block '" + b.id + "' has inconsistent channel geometry");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (blocks[j].id == b.id) throw ValidationError("duplicate block id '" + b.id + "'");
    }
    in = b.out_channels;
  }
}

ModelSpec resnet_desk(Shape3 input, int class_count, std::vector<int> widths, Normalization norm) {
  return desk_spec("resnet-desk", BlockKind::residual, input, class_count, std::move(widths),
                   std::move(norm));
}

ModelSpec plain_desk(Shape3 input, int class_count, std::vector<int> widths, Normalization norm) {
  return desk_spec("plain-desk", BlockKind::plain, input, class_count, std::move(widths),
                   std::move(norm));
}

NetworkParams NetworkParams::zeros_like() const {
  NetworkParams z = *this;
  z.for_each([](const std::string&, std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
  return z;
}

Model::Model(ModelSpec spec, NetworkParams params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  check_params(spec_, params_);
  Shape3 shape = spec_.input;
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    shape = params_.blocks[i].conv1.geometry.output_shape(shape);
    taps_.push_back({spec_.blocks[i].id, shape.channels, static_cast<int>(shape.spatial()), shape});
  }
}

Model Model::initialize(ModelSpec spec, std::uint64_t seed) {
  spec.validate();
  NetworkParams params = allocate(spec);
  std::mt19937_64 rng(seed);
  auto he = [&rng](ConvParams& c, double gain) {
    const double fan_in =
        static_cast<double>(c.geometry.in_channels) * c.geometry.kernel * c.geometry.kernel;
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    for (auto& w : c.weight) w = dist(rng);
  };
  for (auto& b : params.blocks) {
    he(b.conv1, 1.0);
    // Damped second conv keeps the residual sum's variance near the input's.
    if (b.conv2) he(*b.conv2, 0.5);
    if (b.shortcut) he(*b.shortcut, std::sqrt(0.5));
  }
  std::normal_distribution<double> head(0.0, std::sqrt(1.0 / params.head.in_features));
  for (auto& w : params.head.weight) w = head(rng);
  return Model(std::move(spec), std::move(params));
}

const LayerTap& Model::tap(std::string_view layer_id) const {
  return taps_[tap_index(layer_id)];
}

std::size_t Model::tap_index(std::string_view layer_id) const {
  for (std::size_t i = 0; i < taps_.size(); ++i) {
    if (taps_[i].layer_id == layer_id) return i;
  }
  throw TapNotFoundError(std::string(layer_id));
}

ForwardTrace Model::trace(const FeatureMap& image) const {
  return trace_until(image, spec_.blocks.size());
}

ForwardTrace Model::trace_until(const FeatureMap& image, std::size_t last_block) const {
  if (image.shape() != spec_.input) {
    throw ValidationError("image shape " + to_string(image.shape()) + " does not match model input " +
                          to_string(spec_.input));
  }
  if (!image.all_finite()) throw ValidationError("image contains non-finite values");

  ForwardTrace t;
  t.normalized = FeatureMap(image.shape());
  for (int c = 0; c < image.shape().channels; ++c) {
    const double m = spec_.normalization.mean[c];
    const double s = spec_.normalization.std[c];
    auto src = image.channel(c);
    auto dst = t.normalized.channel(c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - m) / s;
  }

  const Activation act = spec_.activation;
  const std::size_t n_blocks = std::min(last_block, spec_.blocks.size());
  t.blocks.reserve(n_blocks);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const auto& p = params_.blocks[b];
    BlockTrace bt;
    bt.input = b == 0 ? t.normalized : t.blocks[b - 1].output;
    bt.pre1 = kernels::conv2d_forward(p.conv1.geometry, p.conv1.weight, p.conv1.bias, bt.input);
    if (spec_.blocks[b].kind == BlockKind::residual) {
      bt.act1 = apply_activation(act, bt.pre1);
      bt.pre2 = kernels::conv2d_forward(p.conv2->geometry, p.conv2->weight, p.conv2->bias, bt.act1);
      bt.pre_out = bt.pre2;
      if (p.shortcut) {
        bt.shortcut = kernels::conv2d_forward(p.shortcut->geometry, p.shortcut->weight,
                                              p.shortcut->bias, bt.input);
        add_into(bt.pre_out, bt.shortcut);
      } else {
        add_into(bt.pre_out, bt.input);
      }
    } else {
      bt.pre_out = bt.pre1;
    }
    bt.output = apply_activation(act, bt.pre_out);
    t.blocks.push_back(std::move(bt));
  }

  if (n_blocks == spec_.blocks.size()) {
    const FeatureMap& last = t.blocks.back().output;
    const int d = last.shape().channels;
    t.pooled.assign(static_cast<std::size_t>(d), 0.0);
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (double v : last.channel(c)) acc += v;
      t.pooled[c] = acc / static_cast<double>(last.shape().spatial());
    }
    const auto& h = params_.head;
    t.logits.assign(static_cast<std::size_t>(h.out_features), 0.0);
    for (int k = 0; k < h.out_features; ++k) {
      double acc = h.bias.empty() ? 0.0 : h.bias[k];
      for (int i = 0; i < h.in_features; ++i) {
        acc += h.weight[static_cast<std::size_t>(k) * h.in_features + i] * t.pooled[i];
      }
      t.logits[k] = acc;
    }
  }
  return t;
}

FeatureMap Model::backward(const ForwardTrace& t, const BackwardSeeds& seeds, ReluBackward mode,
                           NetworkParams* grads,
                           std::map<std::size_t, FeatureMap>* captured) const {
  const std::size_t n_blocks = t.blocks.size();
  for (const auto& [idx, g] : seeds.block_outputs) {
    if (idx >= n_blocks) throw ValidationError("gradient seed beyond traced depth");
    if (g.shape() != t.blocks[idx].output.shape()) {
      throw ValidationError("gradient seed shape mismatch at " + spec_.blocks[idx].id);
    }
  }

  // Gradient arriving at the current block's output.
  std::optional<FeatureMap> carry;
  if (!seeds.logits.empty() || !seeds.pooled.empty()) {
    if (t.logits.empty()) throw ValidationError("head gradient requires a full forward trace");
    const auto& h = params_.head;
    std::vector<double> dpooled = seeds.pooled;
    dpooled.resize(static_cast<std::size_t>(h.in_features), 0.0);
    if (!seeds.logits.empty()) {
      if (seeds.logits.size() != static_cast<std::size_t>(h.out_features)) {
        throw ValidationError("logit gradient has wrong length");
      }
      for (int k = 0; k < h.out_features; ++k) {
        const double gk = seeds.logits[k];
        if (gk == 0.0) continue;
        for (int i = 0; i < h.in_features; ++i) {
          dpooled[i] += h.weight[static_cast<std::size_t>(k) * h.in_features + i] * gk;
        }
        if (grads) {
          for (int i = 0; i < h.in_features; ++i) {
            grads->head.weight[static_cast<std::size_t>(k) * h.in_features + i] += gk * t.pooled[i];
          }
          if (!grads->head.bias.empty()) grads->head.bias[k] += gk;
        }
      }
    }
    const FeatureMap& last = t.blocks.back().output;
    FeatureMap g(last.shape());
    const double inv = 1.0 / static_cast<double>(last.shape().spatial());
    for (int c = 0; c < last.shape().channels; ++c) {
      for (double& v : g.channel(c)) v = dpooled[c] * inv;
    }
    carry = std::move(g);
  }

  const Activation act = spec_.activation;
  for (std::size_t bi = n_blocks; bi-- > 0;) {
    if (auto it = seeds.block_outputs.find(bi); it != seeds.block_outputs.end()) {
      if (carry) {
        add_into(*carry, it->second);
      } else {
        carry = it->second;
      }
    }
    if (!carry) continue;
    if (captured) (*captured)[bi] = *carry;

    const BlockTrace& bt = t.blocks[bi];
    const BlockParams& p = params_.blocks[bi];
    BlockParams* gp = grads ? &grads->blocks[bi] : nullptr;
    const FeatureMap g_pre = activation_backward(act, bt.pre_out, *carry, mode);

    FeatureMap g_in;
    if (spec_.blocks[bi].kind == BlockKind::residual) {
      if (gp) {
        kernels::conv2d_backward_params(p.conv2->geometry, bt.act1, g_pre, gp->conv2->weight,
                                        gp->conv2->bias);
      }
      const FeatureMap g_act1 =
          kernels::conv2d_backward_input(p.conv2->geometry, p.conv2->weight, g_pre, bt.act1.shape());
      const FeatureMap g_pre1 = activation_backward(act, bt.pre1, g_act1, mode);
      if (gp) {
        kernels::conv2d_backward_params(p.conv1.geometry, bt.input, g_pre1, gp->conv1.weight,
                                        gp->conv1.bias);
      }
      g_in = kernels::conv2d_backward_input(p.conv1.geometry, p.conv1.weight, g_pre1,
                                            bt.input.shape());
      if (p.shortcut) {
        if (gp) {
          kernels::conv2d_backward_params(p.shortcut->geometry, bt.input, g_pre,
                                          gp->shortcut->weight, gp->shortcut->bias);
        }
        add_into(g_in, kernels::conv2d_backward_input(p.shortcut->geometry, p.shortcut->weight,
                                                      g_pre, bt.input.shape()));
      } else {
        add_into(g_in, g_pre);
      }
    } else {
      if (gp) {
        kernels::conv2d_backward_params(p.conv1.geometry, bt.input, g_pre, gp->conv1.weight,
                                        gp->conv1.bias);
      }
      g_in = kernels::conv2d_backward_input(p.conv1.geometry, p.conv1.weight, g_pre,
                                            bt.input.shape());
    }
    carry = std::move(g_in);
  }

  FeatureMap grad(spec_.input);
  if (carry) {
    for (int c = 0; c < spec_.input.channels; ++c) {
      const double s = spec_.normalization.std[c];
      auto src = carry->channel(c);
      auto dst = grad.channel(c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / s;
    }
  }
  return grad;
}

std::string Model::weights_hash() const {
  ArrayArchive archive;
  params_.for_each([&](const std::string& name, const std::vector<double>& v) {
    archive[name] = {{static_cast<std::int64_t>(v.size())}, v};
  });
  return sha256_hex(serialize_archive(archive));
}

TapCapture forward_with_taps(const Model& model, const FeatureMap& image,
                             std::span<const std::string> taps) {
  for (const auto& id : taps) model.tap_index(id);
  const ForwardTrace t = model.trace(image);
  TapCapture out;
  for (const auto& id : taps) {
    const std::size_t idx = model.tap_index(id);
    out.activations.emplace(id, ActivationTensor::from_map(id, t.blocks[idx].output));
  }
  out.logits = t.logits;
  return out;
}

FeatureMap image_gradient(const Model& model, const FeatureMap& image,
                          const std::map<std::string, ActivationTensor>& tap_seeds) {
  BackwardSeeds seeds;
  std::size_t deepest = 0;
  for (const auto& [id, seed] : tap_seeds) {
    const std::size_t idx = model.tap_index(id);
    const LayerTap& tap = model.taps()[idx];
    if (seed.channels != static_cast<std::size_t>(tap.channel_count) ||
        seed.spatial != static_cast<std::size_t>(tap.spatial_size)) {
      throw ValidationError("gradient seed for '" + id + "' has the wrong shape");
    }
    seeds.block_outputs.emplace(idx, FeatureMap(tap.shape, seed.values));
    deepest = std::max(deepest, idx + 1);
  }
  if (seeds.block_outputs.empty()) return FeatureMap(model.input_shape());
  const ForwardTrace t = model.trace_until(image, deepest);
  return model.backward(t, seeds);
}

Eigen::MatrixXd penultimate_embedding(const Model& model, std::span<const FeatureMap> images) {
  if (images.empty()) throw ValidationError("penultimate_embedding needs a nonempty batch");
  const int d = model.embedding_width();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), d);
  const auto n = static_cast<std::ptrdiff_t>(images.size());
  std::vector<std::string> errors(images.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const ForwardTrace t = model.trace(images[static_cast<std::size_t>(i)]);
      for (int j = 0; j < d; ++j) out(i, j) = t.pooled[j];
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(i)] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw ValidationError(e);
  }
  return out;
}

}  // namespace vital
