// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "vital/attribution.hpp"
#include "vital/errors.hpp"
#include "vital/model.hpp"
#include "vital/sortmatch.hpp"

namespace vital {

struct SynthesisConfig {
  int steps = 512;
  double learning_rate = 1.0;
  double alpha_tv = 0.0;
  double alpha_l2 = 0.0;
  MatchPlan plan;
  int jitter = 4;
  std::uint64_t seed = 0;
  RelevanceMode relevance = RelevanceMode::none;

  /// Throws ValidationError on steps < 1, a non-positive rate, or negative
  /// regulariser weights. A rate of exactly 0 is accepted for dry runs.
  void validate() const;
  nlohmann::json to_json() const;
};

/// Weighted loss terms; `total` is their sum.
struct LossBreakdown {
  double total = 0.0;
  std::vector<std::pair<std::string, double>> sm;  // weight * per-layer loss
  double tv = 0.0;                                 // alpha_tv * tv_loss
  double l2 = 0.0;                                 // alpha_l2 * l2_loss

  nlohmann::json to_json() const;
};

struct SynthesisResult {
  FeatureMap image;
  std::vector<double> transparency;  // H*W, row-major
  std::vector<LossBreakdown> trace;  // one entry per step, evaluated before the update
  LossBreakdown final_loss;          // on the returned image, without jitter
  SynthesisConfig config;
  std::optional<AttributionTarget> target;
};

class DivergenceError : public Error {
 public:
  DivergenceError(int step, std::vector<LossBreakdown> trace)
      : Error("loss became non-finite at step " + std::to_string(step)),
        step_(step),
        trace_(std::move(trace)) {}
  int step() const { return step_; }
  const std::vector<LossBreakdown>& trace() const { return trace_; }

 private:
  int step_;
  std::vector<LossBreakdown> trace_;
};

/// Mean squared difference over horizontally and vertically adjacent pixels.
double tv_loss(const FeatureMap& image);
FeatureMap tv_gradient(const FeatureMap& image);
/// Mean squared pixel value.
double l2_loss(const FeatureMap& image);
FeatureMap l2_gradient(const FeatureMap& image);

/// SM term from matched features plus the weighted regularisers of `image`.
LossBreakdown total_loss(const std::map<std::string, ActivationTensor>& features,
                         const ReferenceDistribution& reference, const MatchPlan& plan,
                         const FeatureMap& image, double alpha_tv, double alpha_l2);

/// Offsets (dy, dx) in [-amplitude, amplitude], fixed by (seed, step).
std::pair<int, int> jitter_offsets(int amplitude, std::uint64_t seed, int step);
/// Circular translation by jitter_offsets. Throws ValidationError when the
/// amplitude is negative or not below min(H, W).
FeatureMap jitter(const FeatureMap& image, int amplitude, std::uint64_t seed, int step);

/// Sums channel-summed absolute gradients over steps.
class TransparencyAccumulator {
 public:
  explicit TransparencyAccumulator(Shape3 shape);
  void add(const FeatureMap& gradient);
  int count() const { return count_; }
  const std::vector<double>& sum() const { return sum_; }

 private:
  Shape3 shape_;
  std::vector<double> sum_;
  int count_ = 0;
};

/// Mean accumulated magnitude divided by its maximum; all-zero stays zero.
std::vector<double> transparency_map(const TransparencyAccumulator& acc);

/// Seeded starting image: Gaussian noise around 0.5 (std 0.1), clamped.
FeatureMap initial_image(const Shape3& shape, std::uint64_t seed);

using StepCallback = std::function<void(int step, const LossBreakdown&)>;

/// Optimises a pixel image so its (relevance-weighted) activations match
/// `reference` on every plan layer.
SynthesisResult synthesize(const std::optional<AttributionTarget>& target,
                           const ReferenceDistribution& reference, const Model& model,
                           const SynthesisConfig& config, const StepCallback& on_step = {});

}  // namespace vital
