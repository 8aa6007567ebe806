// SPDX-License-Identifier: Apache-2.0
#include "vital/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "vital/errors.hpp"

namespace vital {

std::string to_string(const Shape3& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" +
         std::to_string(s.width);
}

FeatureMap::FeatureMap(Shape3 shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw ValidationError("feature map data length " + std::to_string(data_.size()) +
                          " does not match shape " + to_string(shape_));
  }
}

bool FeatureMap::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

ActivationTensor::ActivationTensor(std::string id, std::size_t c, std::size_t d,
                                   std::vector<double> v)
    : layer_id(std::move(id)), channels(c), spatial(d), values(std::move(v)) {
  if (values.size() != c * d) {
    throw ValidationError("activation tensor '" + layer_id + "' expects " +
                          std::to_string(c * d) + " values, got " +
                          std::to_string(values.size()));
  }
}

ActivationTensor ActivationTensor::from_map(std::string id, const FeatureMap& map) {
  return ActivationTensor(std::move(id), static_cast<std::size_t>(map.shape().channels),
                          map.shape().spatial(), map.values());
}

}  // namespace vital
