// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "vital/archive.hpp"
#include "vital/tensor.hpp"

namespace vital {

class Model;

/// Per-channel ascending value arrays averaged over a reference set.
class SortedChannelProfile {
 public:
  SortedChannelProfile() = default;
  /// Throws ValidationError if any row decreases.
  explicit SortedChannelProfile(ActivationTensor sorted_rows);

  const std::string& layer_id() const { return rows_.layer_id; }
  std::size_t channels() const { return rows_.channels; }
  std::size_t spatial() const { return rows_.spatial; }
  std::span<const double> row(std::size_t c) const { return rows_.row(c); }
  const ActivationTensor& tensor() const { return rows_; }

 private:
  ActivationTensor rows_;
};

struct ReferenceProvenance {
  std::string fingerprint;
  std::string relevance_mode = "none";
  std::size_t reference_count = 0;
  int corruption = 0;
};

/// The matching target: one sorted profile per tapped layer.
struct ReferenceDistribution {
  std::map<std::string, SortedChannelProfile> profiles;
  ReferenceProvenance provenance;

  const SortedChannelProfile& profile(const std::string& layer_id) const;
};

/// Ordered (layer, weight) pairs; the global loss multiplier is folded in.
class MatchPlan {
 public:
  MatchPlan() = default;
  /// Throws ValidationError on negative weights, duplicates, or all-zero weights.
  explicit MatchPlan(std::vector<std::pair<std::string, double>> entries);

  static MatchPlan all_taps(const Model& model, double weight = 1.0);
  /// Only the shallowest and deepest taps.
  static MatchPlan first_last(const Model& model, double weight = 1.0);

  const std::vector<std::pair<std::string, double>>& entries() const { return entries_; }
  std::vector<std::string> layers() const;
  MatchPlan scaled(double factor) const;
  nlohmann::json to_json() const;
  static MatchPlan from_json(const nlohmann::json& j);

 private:
  std::vector<std::pair<std::string, double>> entries_;
};

/// Mean over references of each channel's ascending-sorted values.
SortedChannelProfile sorted_reference(std::span<const ActivationTensor> references);

/// Target z^r: per channel, the k-th smallest profile value lands where z holds
/// its k-th smallest value. Ties in z are ranked by position (stable sort).
ActivationTensor reorder_to_generated(const ActivationTensor& z, const SortedChannelProfile& profile);

/// Mean squared difference over all channels and positions.
double sm_loss(const ActivationTensor& z, const ActivationTensor& target);
/// d sm_loss / dz with the target held constant.
ActivationTensor sm_loss_gradient(const ActivationTensor& z, const ActivationTensor& target);

struct LayerMatch {
  std::string layer_id;
  double weight = 0.0;
  double loss = 0.0;                 // unweighted sm_loss
  ActivationTensor weighted_grad;    // weight * d sm_loss / dz
};

struct MultiLayerLoss {
  double total = 0.0;
  std::vector<LayerMatch> layers;
};

/// sum_l weight_l * sm_loss(z_l, reorder_to_generated(z_l, profile_l)).
MultiLayerLoss sm_loss_multilayer(const std::map<std::string, ActivationTensor>& activations,
                                  const ReferenceDistribution& reference, const MatchPlan& plan,
                                  bool with_gradients = true);

/// Entries are named `<layer_id>/profile` with dims {channels, spatial}.
ArrayArchive profiles_to_archive(const ReferenceDistribution& reference);
nlohmann::json provenance_to_json(const ReferenceProvenance& p);

/// Writes `profiles.varc` and `meta.json` into `dir`.
void save_reference_distribution(const std::filesystem::path& dir,
                                 const ReferenceDistribution& reference,
                                 const nlohmann::json& extra_meta = {});
/// Loads and, when `model` is given, checks every profile against its tap shape.
ReferenceDistribution load_reference_distribution(const std::filesystem::path& dir,
                                                  const Model* model = nullptr);

}  // namespace vital
