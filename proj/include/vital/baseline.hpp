// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "vital/attribution.hpp"
#include "vital/model.hpp"
#include "vital/synthesis.hpp"

namespace vital {

/// Image parameterised by per-channel half-spectrum coefficients
/// (H x (W/2+1) each), scaled by 1/max(|f|, 1/max(H,W))^decay before the
/// inverse transform.
struct SpectrumParam {
  Shape3 shape;
  double decay = 1.0;
  std::vector<std::complex<double>> coeffs;

  static SpectrumParam zeros(Shape3 shape, double decay = 1.0);
  /// Coefficients drawn from N(0, scale^2) per real and imaginary part.
  static SpectrumParam random(Shape3 shape, std::uint64_t seed, double scale = 0.01,
                              double decay = 1.0);
  std::size_t half_width() const { return static_cast<std::size_t>(shape.width / 2 + 1); }
  bool all_finite() const;
};

/// Per-frequency multiplier applied to the coefficients.
std::vector<double> spectrum_scale(const Shape3& shape, double decay);

/// sigmoid(irfft2(scale * coeffs)) per channel, with orthonormal transforms.
FeatureMap decode_spectrum(const SpectrumParam& param);
/// A parameter that decodes to `image` (values are clipped into (0,1) first).
SpectrumParam encode_spectrum(const FeatureMap& image, double decay = 1.0);
/// Chain rule from d loss / d image (of the decoded image) to the coefficients,
/// as d/dRe + i d/dIm.
std::vector<std::complex<double>> spectrum_gradient(const SpectrumParam& param,
                                                    const FeatureMap& decoded,
                                                    const FeatureMap& image_grad);

struct BaselineConfig {
  int steps = 512;
  double learning_rate = 0.05;
  int jitter = 4;
  std::uint64_t seed = 0;
  double decay = 1.0;
  double init_scale = 0.01;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Score maximised by the baseline: the class logit or the channel's GAP.
double target_score(const Model& model, const ForwardTrace& trace,
                    const AttributionTarget& target);

/// Gradient ascent on target_score over a Fourier parameterisation. The trace
/// records the negated score as the single `activation` term.
SynthesisResult activation_max_synthesize(const AttributionTarget& target, const Model& model,
                                          const BaselineConfig& config,
                                          const StepCallback& on_step = {});

}  // namespace vital
