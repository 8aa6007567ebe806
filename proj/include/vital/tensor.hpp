// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vital {

struct Shape3 {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t spatial() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return spatial() * channels; }
  bool operator==(const Shape3&) const = default;
};

std::string to_string(const Shape3& s);

/// Dense channel-major (C, H, W) array of doubles.
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(Shape3 shape, double fill = 0.0)
      : shape_(shape), data_(shape.size(), fill) {}
  FeatureMap(Shape3 shape, std::vector<double> data);

  const Shape3& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }

  std::span<double> channel(int c) {
    return {data_.data() + static_cast<std::size_t>(c) * shape_.spatial(), shape_.spatial()};
  }
  std::span<const double> channel(int c) const {
    return {data_.data() + static_cast<std::size_t>(c) * shape_.spatial(), shape_.spatial()};
  }

  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool all_finite() const;

 private:
  Shape3 shape_;
  std::vector<double> data_;
};

/// A layer's feature map flattened to channels x spatial positions.
struct ActivationTensor {
  std::string layer_id;
  std::size_t channels = 0;
  std::size_t spatial = 0;
  std::vector<double> values;

  ActivationTensor() = default;
  ActivationTensor(std::string id, std::size_t c, std::size_t d)
      : layer_id(std::move(id)), channels(c), spatial(d), values(c * d, 0.0) {}
  ActivationTensor(std::string id, std::size_t c, std::size_t d, std::vector<double> v);
  static ActivationTensor from_map(std::string id, const FeatureMap& map);

  std::span<double> row(std::size_t c) { return {values.data() + c * spatial, spatial}; }
  std::span<const double> row(std::size_t c) const {
    return {values.data() + c * spatial, spatial};
  }
  bool same_shape(const ActivationTensor& other) const {
    return channels == other.channels && spatial == other.spatial;
  }
};

}  // namespace vital
