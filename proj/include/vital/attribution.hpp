// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vital/archive.hpp"
#include "vital/model.hpp"
#include "vital/tensor.hpp"

namespace vital {

/// The neuron, channel, or direction whose relevance is traced back.
struct AttributionTarget {
  enum class Kind { class_neuron, intermediate_neuron, concept_direction };

  Kind kind = Kind::class_neuron;
  int class_id = -1;
  std::string layer_id;
  int channel = -1;
  std::vector<double> direction;

  static AttributionTarget class_neuron(int class_id);
  static AttributionTarget intermediate_neuron(std::string layer_id, int channel);
  static AttributionTarget concept_direction(std::string layer_id, std::vector<double> direction);

  /// Throws ValidationError/TapNotFoundError when the target does not exist in
  /// `model`.
  void validate(const Model& model) const;
  /// Block index the relevance starts from; the head counts as one past the
  /// last block.
  std::size_t start_depth(const Model& model) const;
  /// Short filesystem-safe label, e.g. `class3`, `block3-c5`, `concept-<hash>`.
  std::string label() const;
  nlohmann::json to_json() const;
  static AttributionTarget from_json(const nlohmann::json& j);
};

/// Relevance scores congruent with a layer's activations (signed).
using RelevanceMap = ActivationTensor;

enum class RelevanceMode { none, lrp, guided };
std::string to_string(RelevanceMode mode);
RelevanceMode relevance_mode_from_string(const std::string& s);

inline constexpr double kLrpEpsilon = 1e-6;

struct LrpOptions {
  double epsilon = kLrpEpsilon;
  /// Adds this multiple of each layer's pre-activation standard deviation to
  /// `epsilon`. Zero keeps the plain rule.
  double relative_epsilon = 0.0;
  /// Multiplies the target's initial relevance.
  double initial_scale = 1.0;
};

/// Options used when relevance weights activations for matching. The plain
/// rule divides by pre-activations near zero, which makes A (.) R jump under
/// tiny input changes.
inline constexpr LrpOptions kMatchingLrp{kLrpEpsilon, 0.25, 1.0};

/// Epsilon-rule relevance propagation from `target` down to each tap. Taps
/// must be strictly shallower than the target.
std::map<std::string, RelevanceMap> lrp_relevance(const Model& model, const FeatureMap& image,
                                                  const AttributionTarget& target,
                                                  std::span<const std::string> taps,
                                                  const LrpOptions& options = {});
std::map<std::string, RelevanceMap> lrp_relevance(const Model& model, const ForwardTrace& trace,
                                                  const AttributionTarget& target,
                                                  std::span<const std::string> taps,
                                                  const LrpOptions& options = {});

/// Gradient of the target score with rectifiers passing only positive
/// upstream gradient, captured at each tap.
std::map<std::string, RelevanceMap> guided_backprop_relevance(const Model& model,
                                                              const FeatureMap& image,
                                                              const AttributionTarget& target,
                                                              std::span<const std::string> taps);
std::map<std::string, RelevanceMap> guided_backprop_relevance(const Model& model,
                                                              const ForwardTrace& trace,
                                                              const AttributionTarget& target,
                                                              std::span<const std::string> taps);

/// Dispatches on `mode`; `none` is rejected. `lrp` configures the lrp mode.
std::map<std::string, RelevanceMap> relevance(RelevanceMode mode, const Model& model,
                                              const ForwardTrace& trace,
                                              const AttributionTarget& target,
                                              std::span<const std::string> taps,
                                              const LrpOptions& lrp = kMatchingLrp);

/// Elementwise product A (.) R.
ActivationTensor relevance_weighted_activation(const ActivationTensor& activation,
                                               const RelevanceMap& relevance);

/// Places `direction` at the spatial position whose channel vector has the
/// highest cosine similarity with it (lowest index on ties); zeros elsewhere.
/// Zero-norm positions are skipped.
FeatureMap concept_relevance_init(const FeatureMap& layer_activation,
                                  std::span<const double> direction);
FeatureMap concept_relevance_init(const Model& model, const FeatureMap& image,
                                  const std::string& layer_id, std::span<const double> direction);

/// Relevance at the target's own layer before propagation: the class score at
/// the head, the channel's GAP spread evenly over its positions, or the
/// concept initialisation.
FeatureMap target_initial_relevance(const Model& model, const ForwardTrace& trace,
                                    const AttributionTarget& target);

/// Entries named `<layer_id>/relevance` with dims {channels, spatial}.
ArrayArchive relevance_to_archive(const std::map<std::string, RelevanceMap>& maps);

}  // namespace vital
