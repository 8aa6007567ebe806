// SPDX-License-Identifier: Apache-2.0
#include "vital/attribution.hpp"

#include <cmath>
#include <limits>

#include "vital/errors.hpp"
#include "vital/hash.hpp"
#include "vital/kernels.hpp"

namespace vital {

using nlohmann::json;

namespace {

// Denominator stabiliser; zero counts as positive so the result is never 0.
double stabilize(double z, double eps) { return z + (z >= 0.0 ? eps : -eps); }

double standard_deviation(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

double layer_epsilon(const LrpOptions& o, std::span<const double> z) {
  return o.relative_epsilon > 0.0 ? o.epsilon + o.relative_epsilon * standard_deviation(z) : o.epsilon;
}

FeatureMap divide_stabilized(const FeatureMap& r, const FeatureMap& z, const LrpOptions& opt) {
  FeatureMap out(r.shape());
  const auto& rv = r.values();
  const auto& zv = z.values();
  const double eps = layer_epsilon(opt, zv);
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = rv[i] / stabilize(zv[i], eps);
  return out;
}

void multiply_into(FeatureMap& dst, const FeatureMap& a) {
  auto& d = dst.values();
  const auto& s = a.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= s[i];
}

void add_into(FeatureMap& dst, const FeatureMap& src) {
  auto& d = dst.values();
  const auto& s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// x (.) W^T s for one convolution.
FeatureMap conv_redistribute(const ConvParams& p, const FeatureMap& x, const FeatureMap& s) {
  FeatureMap out = kernels::conv2d_backward_input(p.geometry, p.weight, s, x.shape());
  multiply_into(out, x);
  return out;
}

// Relevance at a block's output -> relevance at its input.
FeatureMap lrp_block(const BlockSpec& spec, const BlockParams& p, const BlockTrace& bt,
                     const FeatureMap& r_out, const LrpOptions& opt) {
  const FeatureMap s = divide_stabilized(r_out, bt.pre_out, opt);
  if (spec.kind == BlockKind::plain) return conv_redistribute(p.conv1, bt.input, s);

  // One epsilon-rule over the summed pre-activation; each branch keeps its
  // share of the contribution.
  const FeatureMap r_act1 = conv_redistribute(*p.conv2, bt.act1, s);
  FeatureMap r_in = conv_redistribute(p.conv1, bt.input, divide_stabilized(r_act1, bt.pre1, opt));
  if (p.shortcut) {
    add_into(r_in, conv_redistribute(*p.shortcut, bt.input, s));
  } else {
    FeatureMap skip = s;
    multiply_into(skip, bt.input);
    add_into(r_in, skip);
  }
  return r_in;
}

// Head logits relevance -> relevance at the last block output.
FeatureMap lrp_head(const Model& model, const ForwardTrace& t, const std::vector<double>& r_logits,
                    const LrpOptions& opt) {
  const auto& h = model.params().head;
  const double eps = layer_epsilon(opt, t.logits);
  const double eps_pooled = layer_epsilon(opt, t.pooled);
  std::vector<double> r_pooled(static_cast<std::size_t>(h.in_features), 0.0);
  for (int k = 0; k < h.out_features; ++k) {
    if (r_logits[k] == 0.0) continue;
    const double s = r_logits[k] / stabilize(t.logits[k], eps);
    for (int i = 0; i < h.in_features; ++i) {
      r_pooled[i] += t.pooled[i] * h.weight[static_cast<std::size_t>(k) * h.in_features + i] * s;
    }
  }
  const FeatureMap& last = t.blocks.back().output;
  FeatureMap r(last.shape());
  const double inv = 1.0 / static_cast<double>(last.shape().spatial());
  for (int c = 0; c < last.shape().channels; ++c) {
    const double s = r_pooled[c] / stabilize(t.pooled[c], eps_pooled);
    auto a = last.channel(c);
    auto dst = r.channel(c);
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = a[i] * inv * s;
  }
  return r;
}

std::vector<std::size_t> checked_tap_indices(const Model& model, const AttributionTarget& target,
                                             std::span<const std::string> taps) {
  target.validate(model);
  const std::size_t depth = target.start_depth(model);
  std::vector<std::size_t> idx;
  for (const auto& id : taps) {
    const std::size_t i = model.tap_index(id);
    if (i >= depth) {
      throw ConfigError("tap '" + id + "' is not shallower than the attribution target");
    }
    idx.push_back(i);
  }
  return idx;
}

std::size_t traced_depth(const Model& model, const AttributionTarget& target) {
  const std::size_t d = target.start_depth(model);
  return d >= model.spec().blocks.size() ? model.spec().blocks.size() : d + 1;
}

}  // namespace

AttributionTarget AttributionTarget::class_neuron(int class_id) {
  AttributionTarget t;
  t.kind = Kind::class_neuron;
  t.class_id = class_id;
  return t;
}

AttributionTarget AttributionTarget::intermediate_neuron(std::string layer_id, int channel) {
  AttributionTarget t;
  t.kind = Kind::intermediate_neuron;
  t.layer_id = std::move(layer_id);
  t.channel = channel;
  return t;
}

AttributionTarget AttributionTarget::concept_direction(std::string layer_id,
                                                       std::vector<double> direction) {
  AttributionTarget t;
  t.kind = Kind::concept_direction;
  t.layer_id = std::move(layer_id);
  t.direction = std::move(direction);
  return t;
}

void AttributionTarget::validate(const Model& model) const {
  switch (kind) {
    case Kind::class_neuron:
      if (class_id < 0 || class_id >= model.class_count()) {
        throw ValidationError("class id " + std::to_string(class_id) + " out of range [0, " +
                              std::to_string(model.class_count()) + ")");
      }
      if (!layer_id.empty() || channel >= 0 || !direction.empty()) {
        throw ValidationError("class target must not carry a layer, channel, or direction");
      }
      return;
    case Kind::intermediate_neuron: {
      const LayerTap& tap = model.tap(layer_id);
      if (channel < 0 || channel >= tap.channel_count) {
        throw ValidationError("channel " + std::to_string(channel) + " out of range for '" +
                              layer_id + "'");
      }
      if (class_id >= 0 || !direction.empty()) {
        throw ValidationError("neuron target must not carry a class id or direction");
      }
      return;
    }
    case Kind::concept_direction: {
      const LayerTap& tap = model.tap(layer_id);
      if (layer_id != model.penultimate_tap().layer_id) {
        throw ConfigError("concept directions live in the penultimate layer '" +
                          model.penultimate_tap().layer_id + "', not '" + layer_id + "'");
      }
      if (direction.size() != static_cast<std::size_t>(tap.channel_count)) {
        throw ValidationError("concept direction has length " + std::to_string(direction.size()) +
                              ", layer has " + std::to_string(tap.channel_count) + " channels");
      }
      double norm = 0.0;
      for (double v : direction) {
        if (!std::isfinite(v)) throw ValidationError("concept direction is not finite");
        norm += v * v;
      }
      if (norm == 0.0) throw ValidationError("concept direction is zero");
      if (class_id >= 0 || channel >= 0) {
        throw ValidationError("concept target must not carry a class id or channel");
      }
      return;
    }
  }
}

std::size_t AttributionTarget::start_depth(const Model& model) const {
  if (kind == Kind::class_neuron) return model.spec().blocks.size();
  return model.tap_index(layer_id);
}

std::string AttributionTarget::label() const {
  switch (kind) {
    case Kind::class_neuron:
      return "class" + std::to_string(class_id);
    case Kind::intermediate_neuron:
      return layer_id + "-c" + std::to_string(channel);
    case Kind::concept_direction:
      return "concept-" + sha256_hex(json(direction).dump()).substr(0, 12);
  }
  return {};
}

json AttributionTarget::to_json() const {
  switch (kind) {
    case Kind::class_neuron:
      return {{"kind", "class"}, {"class", class_id}};
    case Kind::intermediate_neuron:
      return {{"kind", "neuron"}, {"layer", layer_id}, {"channel", channel}};
    case Kind::concept_direction:
      return {{"kind", "concept"}, {"layer", layer_id}, {"direction", direction}};
  }
  return {};
}

AttributionTarget AttributionTarget::from_json(const json& j) {
  const std::string kind = j.at("kind");
  if (kind == "class") return class_neuron(j.at("class"));
  if (kind == "neuron") return intermediate_neuron(j.at("layer"), j.at("channel"));
  if (kind == "concept") {
    return concept_direction(j.at("layer"), j.at("direction").get<std::vector<double>>());
  }
  throw ValidationError("unknown target kind '" + kind + "'");
}

std::string to_string(RelevanceMode mode) {
  switch (mode) {
    case RelevanceMode::none:
      return "none";
    case RelevanceMode::lrp:
      return "lrp";
    case RelevanceMode::guided:
      return "guided";
  }
  return "none";
}

RelevanceMode relevance_mode_from_string(const std::string& s) {
  if (s == "none") return RelevanceMode::none;
  if (s == "lrp") return RelevanceMode::lrp;
  if (s == "guided") return RelevanceMode::guided;
  throw ValidationError("unknown relevance mode '" + s + "' (expected none, lrp, or guided)");
}

FeatureMap concept_relevance_init(const FeatureMap& a, std::span<const double> direction) {
  const Shape3 shape = a.shape();
  if (direction.size() != static_cast<std::size_t>(shape.channels)) {
    throw ValidationError("concept direction length does not match channel count");
  }
  double dnorm = 0.0;
  for (double v : direction) dnorm += v * v;
  dnorm = std::sqrt(dnorm);
  if (!(dnorm > 0.0) || !std::isfinite(dnorm)) {
    throw ValidationError("concept direction must be finite and nonzero");
  }

  const std::size_t positions = shape.spatial();
  std::size_t best = positions;
  double best_cos = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < positions; ++p) {
    double dot = 0.0;
    double norm = 0.0;
    for (int c = 0; c < shape.channels; ++c) {
      const double v = a.channel(c)[p];
      dot += v * direction[c];
      norm += v * v;
    }
    if (norm == 0.0) continue;
    const double cosine = dot / (std::sqrt(norm) * dnorm);
    if (cosine > best_cos) {
      best_cos = cosine;
      best = p;
    }
  }
  if (best == positions) {
    throw DegenerateInputError("every position has a zero channel vector; no concept location");
  }
  FeatureMap init(shape);
  for (int c = 0; c < shape.channels; ++c) init.channel(c)[best] = direction[c];
  return init;
}

FeatureMap concept_relevance_init(const Model& model, const FeatureMap& image,
                                  const std::string& layer_id, std::span<const double> direction) {
  const auto target =
      AttributionTarget::concept_direction(layer_id, {direction.begin(), direction.end()});
  target.validate(model);
  const ForwardTrace t = model.trace_until(image, model.tap_index(layer_id) + 1);
  return concept_relevance_init(t.blocks.back().output, direction);
}

FeatureMap target_initial_relevance(const Model& model, const ForwardTrace& t,
                                    const AttributionTarget& target) {
  switch (target.kind) {
    case AttributionTarget::Kind::class_neuron: {
      FeatureMap r(Shape3{1, 1, model.class_count()});
      r.values()[target.class_id] = t.logits.at(target.class_id);
      return r;
    }
    case AttributionTarget::Kind::intermediate_neuron: {
      const FeatureMap& a = t.blocks.at(model.tap_index(target.layer_id)).output;
      FeatureMap r(a.shape());
      double gap = 0.0;
      for (double v : a.channel(target.channel)) gap += v;
      const double p = static_cast<double>(a.shape().spatial());
      gap /= p;
      for (double& v : r.channel(target.channel)) v = gap / p;
      return r;
    }
    case AttributionTarget::Kind::concept_direction:
      return concept_relevance_init(t.blocks.at(model.tap_index(target.layer_id)).output,
                                    target.direction);
  }
  return {};
}

std::map<std::string, RelevanceMap> lrp_relevance(const Model& model, const FeatureMap& image,
                                                  const AttributionTarget& target,
                                                  std::span<const std::string> taps,
                                                  const LrpOptions& options) {
  checked_tap_indices(model, target, taps);
  return lrp_relevance(model, model.trace_until(image, traced_depth(model, target)), target, taps,
                       options);
}

std::map<std::string, RelevanceMap> lrp_relevance(const Model& model, const ForwardTrace& t,
                                                  const AttributionTarget& target,
                                                  std::span<const std::string> taps,
                                                  const LrpOptions& options) {
  const std::vector<std::size_t> tap_idx = checked_tap_indices(model, target, taps);
  std::map<std::string, RelevanceMap> out;
  if (tap_idx.empty()) return out;
  std::size_t shallowest = tap_idx.front();
  for (std::size_t i : tap_idx) shallowest = std::min(shallowest, i);

  FeatureMap init = target_initial_relevance(model, t, target);
  for (double& v : init.values()) v *= options.initial_scale;

  const std::size_t depth = target.start_depth(model);
  FeatureMap r;
  std::size_t at;  // block whose output `r` belongs to
  if (target.kind == AttributionTarget::Kind::class_neuron) {
    if (t.logits.empty()) throw ValidationError("class relevance requires a full forward trace");
    r = lrp_head(model, t, init.values(), options);
    at = depth - 1;
  } else {
    if (t.blocks.size() <= depth) throw ValidationError("forward trace is shallower than the target");
    r = std::move(init);
    at = depth;
  }

  const auto& blocks = model.spec().blocks;
  for (;;) {
    for (std::size_t k = 0; k < tap_idx.size(); ++k) {
      if (tap_idx[k] == at) out[std::string(taps[k])] = ActivationTensor::from_map(taps[k], r);
    }
    if (at == shallowest) break;
    r = lrp_block(blocks[at], model.params().blocks[at], t.blocks[at], r, options);
    --at;
  }
  return out;
}

std::map<std::string, RelevanceMap> guided_backprop_relevance(const Model& model,
                                                              const FeatureMap& image,
                                                              const AttributionTarget& target,
                                                              std::span<const std::string> taps) {
  checked_tap_indices(model, target, taps);
  return guided_backprop_relevance(model, model.trace_until(image, traced_depth(model, target)),
                                   target, taps);
}

std::map<std::string, RelevanceMap> guided_backprop_relevance(const Model& model,
                                                              const ForwardTrace& t,
                                                              const AttributionTarget& target,
                                                              std::span<const std::string> taps) {
  const std::vector<std::size_t> tap_idx = checked_tap_indices(model, target, taps);
  std::map<std::string, RelevanceMap> out;
  if (tap_idx.empty()) return out;

  BackwardSeeds seeds;
  switch (target.kind) {
    case AttributionTarget::Kind::class_neuron:
      if (t.logits.empty()) throw ValidationError("class relevance requires a full forward trace");
      seeds.logits.assign(static_cast<std::size_t>(model.class_count()), 0.0);
      seeds.logits[target.class_id] = 1.0;
      break;
    case AttributionTarget::Kind::intermediate_neuron: {
      const std::size_t idx = model.tap_index(target.layer_id);
      const Shape3 shape = t.blocks.at(idx).output.shape();
      FeatureMap g(shape);
      for (double& v : g.channel(target.channel)) v = 1.0 / static_cast<double>(shape.spatial());
      seeds.block_outputs.emplace(idx, std::move(g));
      break;
    }
    case AttributionTarget::Kind::concept_direction: {
      const std::size_t idx = model.tap_index(target.layer_id);
      seeds.block_outputs.emplace(idx, target_initial_relevance(model, t, target));
      break;
    }
  }
  std::map<std::size_t, FeatureMap> captured;
  model.backward(t, seeds, ReluBackward::guided, nullptr, &captured);
  for (std::size_t k = 0; k < tap_idx.size(); ++k) {
    auto it = captured.find(tap_idx[k]);
    const FeatureMap g = it != captured.end() ? it->second
                                              : FeatureMap(t.blocks.at(tap_idx[k]).output.shape());
    out[std::string(taps[k])] = ActivationTensor::from_map(taps[k], g);
  }
  return out;
}

std::map<std::string, RelevanceMap> relevance(RelevanceMode mode, const Model& model,
                                              const ForwardTrace& trace,
                                              const AttributionTarget& target,
                                              std::span<const std::string> taps,
                                              const LrpOptions& lrp) {
  switch (mode) {
    case RelevanceMode::lrp:
      return lrp_relevance(model, trace, target, taps, lrp);
    case RelevanceMode::guided:
      return guided_backprop_relevance(model, trace, target, taps);
    case RelevanceMode::none:
      break;
  }
  throw ConfigError("relevance requested with mode 'none'");
}

ActivationTensor relevance_weighted_activation(const ActivationTensor& activation,
                                               const RelevanceMap& relevance) {
  if (!activation.same_shape(relevance)) {
    throw ValidationError("relevance shape does not match activation shape for '" +
                          activation.layer_id + "'");
  }
  ActivationTensor out(activation.layer_id, activation.channels, activation.spatial);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = activation.values[i] * relevance.values[i];
  }
  return out;
}

ArrayArchive relevance_to_archive(const std::map<std::string, RelevanceMap>& maps) {
  ArrayArchive archive;
  for (const auto& [id, r] : maps) {
    archive[id + "/relevance"] = {
        {static_cast<std::int64_t>(r.channels), static_cast<std::int64_t>(r.spatial)}, r.values};
  }
  return archive;
}

}  // namespace vital
