// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vital/model.hpp"
#include "vital/tensor.hpp"

namespace vital {

/// In-memory labeled image collection stored as 8-bit pixels.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, std::string split, Shape3 geometry,
          std::vector<std::string> class_names);

  void add(std::string id, int label, std::vector<std::uint8_t> pixels);
  /// Adds a [0,1] image, quantised to 8 bits.
  void add(std::string id, int label, const FeatureMap& image);

  const std::string& name() const { return name_; }
  const std::string& split() const { return split_; }
  const Shape3& geometry() const { return geometry_; }
  int class_count() const { return static_cast<int>(class_names_.size()); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }

  FeatureMap image(std::size_t i) const;
  int label(std::size_t i) const { return labels_.at(i); }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  std::optional<std::size_t> find(const std::string& id) const;
  std::vector<std::size_t> indices_of_class(int label) const;

 private:
  std::string name_;
  std::string split_;
  Shape3 geometry_;
  std::vector<std::string> class_names_;
  std::vector<std::uint8_t> pixels_;
  std::vector<int> labels_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;

  /// Resolves an image id from either split.
  FeatureMap image(const std::string& id) const;
  int label(const std::string& id) const;
  bool contains(const std::string& id) const;
};

/// Procedural 10-class 32x32 RGB dataset of textured shapes on noisy
/// backgrounds; fully determined by (per_class, seed).
Dataset generate_shapes10(int per_class, std::uint64_t seed, const std::string& split);
/// Two classes: a bright blob in the left or right half of a 3x16x16 image.
Dataset generate_blobs2(int per_class, std::uint64_t seed, const std::string& split);

/// Reads the CIFAR-10 binary batches under `root/cifar-10-batches-bin`. When
/// missing and `allow_download` is set, fetches the archive into `root`,
/// verifies its MD5 checksum, and extracts it.
DatasetSplits load_cifar10(const std::filesystem::path& root, bool allow_download);

/// Class-folder layout: `root/<class>/*.png`, or `root/train/<class>` and
/// `root/test/<class>` when both exist. Without explicit splits every fifth
/// image (in sorted order) goes to the test split.
DatasetSplits load_image_folder(const std::filesystem::path& root, Shape3 geometry);

/// Dataset spec strings:
///   shapes10[:train_per_class[:test_per_class[:seed]]]
///   blobs2[:train_per_class[:test_per_class[:seed]]]
///   cifar10             (under data_root, auto-downloaded if absent)
///   folder:<path>       (32x32 RGB)
DatasetSplits load_dataset(const std::string& spec, const std::filesystem::path& data_root);

/// Per-channel pixel mean and standard deviation.
Normalization channel_statistics(const Dataset& dataset);

}  // namespace vital
