// SPDX-License-Identifier: Apache-2.0
#include "vital/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vital/hash.hpp"
#include "vital/image.hpp"
#include "vital/optim.hpp"
#include "vital/reference.hpp"

namespace vital {

using nlohmann::json;

void SynthesisConfig::validate() const {
  if (steps < 1) throw ValidationError("steps must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning rate must be finite and nonnegative");
  }
  if (!(alpha_tv >= 0.0) || !(alpha_l2 >= 0.0)) {
    throw ValidationError("regulariser weights must be nonnegative");
  }
  if (jitter < 0) throw ValidationError("jitter amplitude must be nonnegative");
}

json SynthesisConfig::to_json() const {
  return {{"steps", steps},
          {"learning_rate", learning_rate},
          {"alpha_tv", alpha_tv},
          {"alpha_l2", alpha_l2},
          {"plan", plan.to_json()},
          {"jitter", jitter},
          {"seed", seed},
          {"relevance", to_string(relevance)}};
}

json LossBreakdown::to_json() const {
  json sm_terms = json::object();
  for (const auto& [id, v] : sm) sm_terms[id] = v;
  return {{"total", total}, {"sm", sm_terms}, {"tv", tv}, {"l2", l2}};
}

double tv_loss(const FeatureMap& image) {
  const Shape3 s = image.shape();
  double acc = 0.0;
  std::size_t pairs = 0;
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        if (x + 1 < s.width) {
          const double d = image.at(c, y, x + 1) - image.at(c, y, x);
          acc += d * d;
          ++pairs;
        }
        if (y + 1 < s.height) {
          const double d = image.at(c, y + 1, x) - image.at(c, y, x);
          acc += d * d;
          ++pairs;
        }
      }
    }
  }
  return pairs == 0 ? 0.0 : acc / static_cast<double>(pairs);
}

FeatureMap tv_gradient(const FeatureMap& image) {
  const Shape3 s = image.shape();
  FeatureMap g(s);
  const std::size_t pairs = static_cast<std::size_t>(s.channels) *
                            (static_cast<std::size_t>(s.height) * (s.width - 1) +
                             static_cast<std::size_t>(s.height - 1) * s.width);
  if (pairs == 0) return g;
  const double k = 2.0 / static_cast<double>(pairs);
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        if (x + 1 < s.width) {
          const double d = k * (image.at(c, y, x + 1) - image.at(c, y, x));
          g.at(c, y, x + 1) += d;
          g.at(c, y, x) -= d;
        }
        if (y + 1 < s.height) {
          const double d = k * (image.at(c, y + 1, x) - image.at(c, y, x));
          g.at(c, y + 1, x) += d;
          g.at(c, y, x) -= d;
        }
      }
    }
  }
  return g;
}

double l2_loss(const FeatureMap& image) {
  if (image.size() == 0) return 0.0;
  double acc = 0.0;
  for (double v : image.values()) acc += v * v;
  return acc / static_cast<double>(image.size());
}

FeatureMap l2_gradient(const FeatureMap& image) {
  FeatureMap g(image.shape());
  const double k = 2.0 / static_cast<double>(std::max<std::size_t>(image.size(), 1));
  for (std::size_t i = 0; i < image.size(); ++i) g.values()[i] = k * image.values()[i];
  return g;
}

LossBreakdown total_loss(const std::map<std::string, ActivationTensor>& features,
                         const ReferenceDistribution& reference, const MatchPlan& plan,
                         const FeatureMap& image, double alpha_tv, double alpha_l2) {
  const MultiLayerLoss sm = sm_loss_multilayer(features, reference, plan, false);
  LossBreakdown out;
  for (const auto& m : sm.layers) out.sm.emplace_back(m.layer_id, m.weight * m.loss);
  out.tv = alpha_tv > 0.0 ? alpha_tv * tv_loss(image) : 0.0;
  out.l2 = alpha_l2 > 0.0 ? alpha_l2 * l2_loss(image) : 0.0;
  out.total = sm.total + out.tv + out.l2;
  return out;
}

std::pair<int, int> jitter_offsets(int amplitude, std::uint64_t seed, int step) {
  if (amplitude <= 0) return {0, 0};
  const auto span = static_cast<std::uint64_t>(2 * amplitude + 1);
  const std::uint64_t h = splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(step));
  const int dy = static_cast<int>(h % span) - amplitude;
  const int dx = static_cast<int>((h >> 32) % span) - amplitude;
  return {dy, dx};
}

FeatureMap jitter(const FeatureMap& image, int amplitude, std::uint64_t seed, int step) {
  const Shape3 s = image.shape();
  if (amplitude < 0 || (amplitude > 0 && amplitude >= std::min(s.height, s.width))) {
    throw ValidationError("jitter amplitude " + std::to_string(amplitude) +
                          " must lie in [0, min(H, W))");
  }
  const auto [dy, dx] = jitter_offsets(amplitude, seed, step);
  return roll(image, dy, dx);
}

TransparencyAccumulator::TransparencyAccumulator(Shape3 shape)
    : shape_(shape), sum_(shape.spatial(), 0.0) {}

void TransparencyAccumulator::add(const FeatureMap& gradient) {
  if (gradient.shape() != shape_) throw ValidationError("transparency gradient shape mismatch");
  for (int c = 0; c < shape_.channels; ++c) {
    const auto g = gradient.channel(c);
    for (std::size_t i = 0; i < g.size(); ++i) sum_[i] += std::abs(g[i]);
  }
  ++count_;
}

std::vector<double> transparency_map(const TransparencyAccumulator& acc) {
  if (acc.count() < 1) throw ValidationError("transparency needs at least one gradient");
  std::vector<double> alpha(acc.sum().size());
  const double inv = 1.0 / static_cast<double>(acc.count());
  double peak = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    alpha[i] = acc.sum()[i] * inv;
    peak = std::max(peak, alpha[i]);
  }
  if (peak > 0.0) {
    for (double& a : alpha) a = std::min(1.0, a / peak);
  }
  return alpha;
}

FeatureMap initial_image(const Shape3& shape, std::uint64_t seed) {
  // Box-Muller over splitmix64 draws keeps the noise identical across
  // standard libraries.
  FeatureMap img(shape);
  std::uint64_t state = splitmix64(seed ^ 0x1d2c3b4a59687766ULL);
  auto uniform = [&state]() {
    state = splitmix64(state);
    return (static_cast<double>(state >> 11) + 0.5) * 0x1.0p-53;
  };
  auto& v = img.values();
  for (std::size_t i = 0; i < v.size(); i += 2) {
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    v[i] = std::clamp(0.5 + 0.1 * r * std::cos(theta), 0.0, 1.0);
    if (i + 1 < v.size()) v[i + 1] = std::clamp(0.5 + 0.1 * r * std::sin(theta), 0.0, 1.0);
  }
  return img;
}

namespace {

void check_reference(const ReferenceDistribution& reference, const Model& model,
                     const MatchPlan& plan) {
  for (const auto& id : plan.layers()) {
    const LayerTap& tap = model.tap(id);
    const SortedChannelProfile& p = reference.profile(id);
    if (p.channels() != static_cast<std::size_t>(tap.channel_count) ||
        p.spatial() != static_cast<std::size_t>(tap.spatial_size)) {
      throw ValidationError("reference profile '" + id + "' does not match the model geometry");
    }
  }
}

}  // namespace

SynthesisResult synthesize(const std::optional<AttributionTarget>& target,
                           const ReferenceDistribution& reference, const Model& model,
                           const SynthesisConfig& config, const StepCallback& on_step) {
  config.validate();
  if (config.plan.entries().empty()) throw ValidationError("synthesis needs a nonempty match plan");
  check_reference(reference, model, config.plan);
  if (config.relevance != RelevanceMode::none && !target) {
    throw ConfigError("relevance mode '" + to_string(config.relevance) +
                      "' needs an attribution target");
  }
  if (to_string(config.relevance) != reference.provenance.relevance_mode) {
    throw ConfigError("reference distribution was built with relevance '" +
                      reference.provenance.relevance_mode + "', synthesis uses '" +
                      to_string(config.relevance) + "'");
  }
  if (target) target->validate(model);

  const Shape3 shape = model.input_shape();
  if (config.jitter > 0 && config.jitter >= std::min(shape.height, shape.width)) {
    throw ValidationError("jitter amplitude exceeds the image size");
  }
  const std::vector<std::string> layers = config.plan.layers();
  const std::size_t depth = required_depth(model, layers, config.relevance, target);

  SynthesisResult result;
  result.config = config;
  result.target = target;
  result.image = initial_image(shape, config.seed);
  Adam adam(result.image.size(), AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8});
  TransparencyAccumulator alpha(shape);

  for (int step = 0; step < config.steps; ++step) {
    const auto [dy, dx] = jitter_offsets(config.jitter, config.seed, step);
    const FeatureMap shifted = roll(result.image, dy, dx);
    const ForwardTrace t = model.trace_until(shifted, depth);
    std::map<std::string, RelevanceMap> rel;
    const auto features = matched_features(model, t, layers, config.relevance, target, &rel);
    const MultiLayerLoss sm = sm_loss_multilayer(features, reference, config.plan, true);

    LossBreakdown entry;
    for (const auto& m : sm.layers) entry.sm.emplace_back(m.layer_id, m.weight * m.loss);
    entry.tv = config.alpha_tv > 0.0 ? config.alpha_tv * tv_loss(result.image) : 0.0;
    entry.l2 = config.alpha_l2 > 0.0 ? config.alpha_l2 * l2_loss(result.image) : 0.0;
    entry.total = sm.total + entry.tv + entry.l2;
    result.trace.push_back(entry);
    if (!std::isfinite(entry.total)) throw DivergenceError(step, result.trace);
    if (on_step) on_step(step, entry);

    BackwardSeeds seeds;
    for (const auto& m : sm.layers) {
      const std::size_t idx = model.tap_index(m.layer_id);
      FeatureMap g(t.blocks[idx].output.shape(), m.weighted_grad.values);
      // d(A (.) R)/dA with R held fixed.
      if (auto it = rel.find(m.layer_id); it != rel.end()) {
        auto& gv = g.values();
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= it->second.values[i];
      }
      seeds.block_outputs.emplace(idx, std::move(g));
    }
    FeatureMap grad = roll(model.backward(t, seeds), -dy, -dx);
    if (config.alpha_tv > 0.0) {
      const FeatureMap g = tv_gradient(result.image);
      for (std::size_t i = 0; i < grad.size(); ++i) grad.values()[i] += config.alpha_tv * g.values()[i];
    }
    if (config.alpha_l2 > 0.0) {
      const FeatureMap g = l2_gradient(result.image);
      for (std::size_t i = 0; i < grad.size(); ++i) grad.values()[i] += config.alpha_l2 * g.values()[i];
    }
    if (!grad.all_finite()) throw DivergenceError(step, result.trace);
    alpha.add(grad);

    adam.step(result.image.values(), grad.values());
    for (double& v : result.image.values()) v = std::clamp(v, 0.0, 1.0);
  }

  result.transparency = transparency_map(alpha);
  const ForwardTrace t = model.trace_until(result.image, depth);
  const auto features = matched_features(model, t, layers, config.relevance, target);
  result.final_loss = total_loss(features, reference, config.plan, result.image, config.alpha_tv,
                                 config.alpha_l2);
  return result;
}

}  // namespace vital
