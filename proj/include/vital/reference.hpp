// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vital/attribution.hpp"
#include "vital/dataset.hpp"
#include "vital/image.hpp"
#include "vital/model.hpp"
#include "vital/sortmatch.hpp"

namespace vital {

struct ImageSource {
  std::string id;
  std::optional<CropRect> crop;

  nlohmann::json to_json() const;
  static ImageSource from_json(const nlohmann::json& j);
  bool operator==(const ImageSource&) const = default;
};

/// Real images (or patches of them) whose activations define the target
/// distribution.
struct ReferenceSet {
  AttributionTarget target;
  std::vector<ImageSource> sources;
  std::uint64_t seed = 0;
  int corruption = 0;
  std::vector<std::string> foreign_ids;  // members swapped in by corruption

  std::size_t size() const { return sources.size(); }
  /// Throws ValidationError on an empty set, repeated ids, or crops outside
  /// `geometry`.
  void validate(const Shape3& geometry) const;
  nlohmann::json to_json() const;
};

struct PatchScore {
  std::string image_id;
  CropRect crop;
  double score = 0.0;
};

struct PatchOptions {
  int patch_size = 16;
  /// Crop stride; 0 means patch_size / 2.
  int stride = 0;
  /// Upper bound on scanned source images (0 scans all). When the dataset is
  /// larger, a seeded subset is scanned.
  std::size_t candidate_limit = 0;
};

/// Deterministic pseudo-random ordering of `ids`; depends only on (seed, id).
std::vector<std::size_t> seeded_order(const std::vector<std::string>& ids, std::uint64_t seed);

/// N distinct images of `class_id`, chosen by seed.
ReferenceSet select_class_references(const Dataset& dataset, int class_id, std::size_t n,
                                     std::uint64_t seed);

/// Every sliding crop of every candidate image, scored by the GAP of the
/// channel's activation map after resizing the crop to the model input.
std::vector<PatchScore> score_patches(const Dataset& dataset, const Model& model,
                                      const std::string& layer_id, int channel,
                                      const PatchOptions& options, std::uint64_t seed);

/// As score_patches, with the score being the GAP of the activations
/// projected onto `direction`.
std::vector<PatchScore> score_direction_patches(const Dataset& dataset, const Model& model,
                                                const std::string& layer_id,
                                                std::span<const double> direction,
                                                const PatchOptions& options, std::uint64_t seed);

/// Descending by score (ties by image id, then crop position), keeping only
/// the best patch of each source image, truncated to k.
std::vector<PatchScore> top_distinct_patches(std::vector<PatchScore> scores, std::size_t k);

/// Top-k GAP-scored patches from distinct images.
ReferenceSet select_neuron_patches(const Dataset& dataset, const Model& model,
                                   const std::string& layer_id, int channel, std::size_t k,
                                   const PatchOptions& options, std::uint64_t seed);

/// Top-k patches from distinct images by projected GAP along `direction`.
ReferenceSet select_concept_patches(const Dataset& dataset, const Model& model,
                                    const std::string& layer_id, std::span<const double> direction,
                                    std::size_t k, const PatchOptions& options, std::uint64_t seed);

/// Replaces m seeded members with images from `pool` that are foreign to the
/// set: another class for class targets, any non-member otherwise.
ReferenceSet corrupt_references(const ReferenceSet& refs, std::size_t m, const Dataset& pool,
                                std::uint64_t seed);

/// Loads a source image, crops it, and resizes it to `input` when needed.
FeatureMap load_source(const DatasetSplits& data, const ImageSource& source, const Shape3& input);

/// Per tapped layer, A or A (.) R for the given trace. When `relevance_out`
/// is given it receives the relevance maps used (empty for mode none).
std::map<std::string, ActivationTensor> matched_features(
    const Model& model, const ForwardTrace& trace, const std::vector<std::string>& layers,
    RelevanceMode mode, const std::optional<AttributionTarget>& target,
    std::map<std::string, RelevanceMap>* relevance_out = nullptr);

/// Number of blocks a forward pass must cover for these layers and target.
std::size_t required_depth(const Model& model, const std::vector<std::string>& layers,
                           RelevanceMode mode, const std::optional<AttributionTarget>& target);

struct BuildOptions {
  /// Cache root; empty disables caching.
  std::filesystem::path cache_dir;
};

struct BuildResult {
  ReferenceDistribution distribution;
  bool cache_hit = false;
  std::filesystem::path cache_path;
  nlohmann::json fingerprint_input;
};

/// Canonical description hashed into the cache fingerprint.
nlohmann::json fingerprint_input(const ReferenceSet& refs, const Model& model,
                                 const MatchPlan& plan, RelevanceMode mode,
                                 const std::optional<AttributionTarget>& target);

BuildResult build_reference_distribution(const ReferenceSet& refs, const DatasetSplits& data,
                                         const Model& model, const MatchPlan& plan,
                                         RelevanceMode mode,
                                         const std::optional<AttributionTarget>& target,
                                         const BuildOptions& options = {});

}  // namespace vital
