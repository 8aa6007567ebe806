// SPDX-License-Identifier: Apache-2.0
#include "vital/baseline.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include "vital/hash.hpp"
#include "vital/image.hpp"
#include "vital/optim.hpp"

namespace vital {

using nlohmann::json;

namespace {

// The FFTW planner is not thread-safe; execution is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

// Orthonormal 2-D transforms of one H x W channel.
void forward_r2c(int h, int w, const double* in, std::complex<double>* out) {
  std::vector<double> buf(in, in + static_cast<std::size_t>(h) * w);
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_r2c_2d(h, w, buf.data(), reinterpret_cast<fftw_complex*>(out),
                                FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
  const double k = 1.0 / std::sqrt(static_cast<double>(h) * w);
  const std::size_t n = static_cast<std::size_t>(h) * (w / 2 + 1);
  for (std::size_t i = 0; i < n; ++i) out[i] *= k;
}

void inverse_c2r(int h, int w, const std::complex<double>* in, double* out) {
  // c2r overwrites its input.
  std::vector<std::complex<double>> buf(in, in + static_cast<std::size_t>(h) * (w / 2 + 1));
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_c2r_2d(h, w, reinterpret_cast<fftw_complex*>(buf.data()), out,
                                FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
  const double k = 1.0 / std::sqrt(static_cast<double>(h) * w);
  for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) out[i] *= k;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Pre-sigmoid image.
FeatureMap decode_raw(const SpectrumParam& p) {
  const Shape3 s = p.shape;
  const std::vector<double> scale = spectrum_scale(s, p.decay);
  const std::size_t half = static_cast<std::size_t>(s.height) * p.half_width();
  FeatureMap raw(s);
  std::vector<std::complex<double>> scaled(half);
  for (int c = 0; c < s.channels; ++c) {
    const std::complex<double>* src = p.coeffs.data() + c * half;
    for (std::size_t i = 0; i < half; ++i) scaled[i] = src[i] * scale[i];
    inverse_c2r(s.height, s.width, scaled.data(), raw.channel(c).data());
  }
  return raw;
}

}  // namespace

SpectrumParam SpectrumParam::zeros(Shape3 shape, double decay) {
  SpectrumParam p;
  p.shape = shape;
  p.decay = decay;
  p.coeffs.assign(static_cast<std::size_t>(shape.channels) * shape.height * (shape.width / 2 + 1),
                  {0.0, 0.0});
  return p;
}

SpectrumParam SpectrumParam::random(Shape3 shape, std::uint64_t seed, double scale, double decay) {
  SpectrumParam p = zeros(shape, decay);
  std::uint64_t state = splitmix64(seed ^ 0x7f4a7c159e3779b9ULL);
  auto uniform = [&state]() {
    state = splitmix64(state);
    return (static_cast<double>(state >> 11) + 0.5) * 0x1.0p-53;
  };
  for (auto& c : p.coeffs) {
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    c = {scale * r * std::cos(theta), scale * r * std::sin(theta)};
  }
  return p;
}

bool SpectrumParam::all_finite() const {
  return std::all_of(coeffs.begin(), coeffs.end(), [](const std::complex<double>& c) {
    return std::isfinite(c.real()) && std::isfinite(c.imag());
  });
}

std::vector<double> spectrum_scale(const Shape3& s, double decay) {
  const int hw = s.width / 2 + 1;
  std::vector<double> out(static_cast<std::size_t>(s.height) * hw);
  const double floor = 1.0 / static_cast<double>(std::max(s.height, s.width));
  for (int y = 0; y < s.height; ++y) {
    const int ky = y <= s.height / 2 ? y : y - s.height;
    const double fy = static_cast<double>(ky) / s.height;
    for (int x = 0; x < hw; ++x) {
      const double fx = static_cast<double>(x) / s.width;
      const double f = std::max(std::sqrt(fx * fx + fy * fy), floor);
      out[static_cast<std::size_t>(y) * hw + x] = std::pow(f, -decay);
    }
  }
  return out;
}

FeatureMap decode_spectrum(const SpectrumParam& param) {
  if (!param.all_finite()) throw ValidationError("spectrum coefficients are not finite");
  FeatureMap img = decode_raw(param);
  for (double& v : img.values()) v = sigmoid(v);
  return img;
}

SpectrumParam encode_spectrum(const FeatureMap& image, double decay) {
  const Shape3 s = image.shape();
  SpectrumParam p = SpectrumParam::zeros(s, decay);
  const std::vector<double> scale = spectrum_scale(s, decay);
  const std::size_t half = static_cast<std::size_t>(s.height) * p.half_width();
  std::vector<double> logit(s.spatial());
  for (int c = 0; c < s.channels; ++c) {
    const auto ch = image.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      const double v = std::clamp(ch[i], 1e-12, 1.0 - 1e-12);
      logit[i] = std::log(v / (1.0 - v));
    }
    std::complex<double>* dst = p.coeffs.data() + c * half;
    forward_r2c(s.height, s.width, logit.data(), dst);
    for (std::size_t i = 0; i < half; ++i) dst[i] /= scale[i];
  }
  return p;
}

std::vector<std::complex<double>> spectrum_gradient(const SpectrumParam& param,
                                                    const FeatureMap& decoded,
                                                    const FeatureMap& image_grad) {
  const Shape3 s = param.shape;
  if (decoded.shape() != s || image_grad.shape() != s) {
    throw ValidationError("spectrum gradient shape mismatch");
  }
  const std::vector<double> scale = spectrum_scale(s, param.decay);
  const int hw = s.width / 2 + 1;
  const std::size_t half = static_cast<std::size_t>(s.height) * hw;
  std::vector<std::complex<double>> out(param.coeffs.size());
  std::vector<double> g_raw(s.spatial());
  for (int c = 0; c < s.channels; ++c) {
    const auto y = decoded.channel(c);
    const auto g = image_grad.channel(c);
    for (std::size_t i = 0; i < g_raw.size(); ++i) g_raw[i] = g[i] * y[i] * (1.0 - y[i]);
    std::complex<double>* dst = out.data() + c * half;
    forward_r2c(s.height, s.width, g_raw.data(), dst);
    // Columns other than DC and Nyquist stand for a conjugate pair in the
    // full spectrum, so they enter the image twice.
    for (int r = 0; r < s.height; ++r) {
      for (int x = 0; x < hw; ++x) {
        const bool self_conjugate = x == 0 || (s.width % 2 == 0 && x == s.width / 2);
        const std::size_t i = static_cast<std::size_t>(r) * hw + x;
        dst[i] *= (self_conjugate ? 1.0 : 2.0) * scale[i];
      }
    }
  }
  return out;
}

void BaselineConfig::validate() const {
  if (steps < 1) throw ValidationError("steps must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning rate must be finite and nonnegative");
  }
  if (jitter < 0) throw ValidationError("jitter amplitude must be nonnegative");
  if (!(init_scale >= 0.0)) throw ValidationError("initial spectrum scale must be nonnegative");
}

json BaselineConfig::to_json() const {
  return {{"steps", steps},   {"learning_rate", learning_rate}, {"jitter", jitter},
          {"seed", seed},     {"decay", decay},                 {"init_scale", init_scale}};
}

double target_score(const Model& model, const ForwardTrace& t, const AttributionTarget& target) {
  switch (target.kind) {
    case AttributionTarget::Kind::class_neuron:
      return t.logits.at(target.class_id);
    case AttributionTarget::Kind::intermediate_neuron: {
      const FeatureMap& a = t.blocks.at(model.tap_index(target.layer_id)).output;
      double acc = 0.0;
      for (double v : a.channel(target.channel)) acc += v;
      return acc / static_cast<double>(a.shape().spatial());
    }
    case AttributionTarget::Kind::concept_direction:
      break;
  }
  throw ConfigError("the activation-maximisation baseline supports class and neuron targets only");
}

SynthesisResult activation_max_synthesize(const AttributionTarget& target, const Model& model,
                                          const BaselineConfig& config,
                                          const StepCallback& on_step) {
  config.validate();
  target.validate(model);
  if (target.kind == AttributionTarget::Kind::concept_direction) {
    throw ConfigError("the activation-maximisation baseline supports class and neuron targets only");
  }
  const Shape3 shape = model.input_shape();
  if (config.jitter > 0 && config.jitter >= std::min(shape.height, shape.width)) {
    throw ValidationError("jitter amplitude exceeds the image size");
  }
  const bool is_class = target.kind == AttributionTarget::Kind::class_neuron;
  const std::size_t depth =
      is_class ? model.spec().blocks.size() : model.tap_index(target.layer_id) + 1;

  SpectrumParam param = SpectrumParam::random(shape, config.seed, config.init_scale, config.decay);
  std::span<double> flat(reinterpret_cast<double*>(param.coeffs.data()), 2 * param.coeffs.size());
  Adam adam(flat.size(), AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8});
  TransparencyAccumulator alpha(shape);

  SynthesisResult result;
  result.config.steps = config.steps;
  result.config.learning_rate = config.learning_rate;
  result.config.jitter = config.jitter;
  result.config.seed = config.seed;
  result.target = target;

  for (int step = 0; step < config.steps; ++step) {
    const FeatureMap image = decode_spectrum(param);
    const auto [dy, dx] = jitter_offsets(config.jitter, config.seed, step);
    const ForwardTrace t = model.trace_until(roll(image, dy, dx), depth);
    const double score = target_score(model, t, target);

    LossBreakdown entry;
    entry.sm.emplace_back("activation", -score);
    entry.total = -score;
    result.trace.push_back(entry);
    if (!std::isfinite(score)) throw DivergenceError(step, result.trace);
    if (on_step) on_step(step, entry);

    BackwardSeeds seeds;
    if (is_class) {
      seeds.logits.assign(static_cast<std::size_t>(model.class_count()), 0.0);
      seeds.logits[target.class_id] = -1.0;
    } else {
      const std::size_t idx = model.tap_index(target.layer_id);
      FeatureMap g(t.blocks[idx].output.shape());
      const double k = -1.0 / static_cast<double>(g.shape().spatial());
      for (double& v : g.channel(target.channel)) v = k;
      seeds.block_outputs.emplace(idx, std::move(g));
    }
    const FeatureMap grad = roll(model.backward(t, seeds), -dy, -dx);
    if (!grad.all_finite()) throw DivergenceError(step, result.trace);
    alpha.add(grad);

    const auto cg = spectrum_gradient(param, image, grad);
    adam.step(flat, std::span<const double>(reinterpret_cast<const double*>(cg.data()),
                                            2 * cg.size()));
  }

  result.image = decode_spectrum(param);
  result.transparency = transparency_map(alpha);
  const ForwardTrace t = model.trace_until(result.image, depth);
  const double score = target_score(model, t, target);
  result.final_loss.sm.emplace_back("activation", -score);
  result.final_loss.total = -score;
  return result;
}

}  // namespace vital
