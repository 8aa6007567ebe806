// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vital/model.hpp"
#include "vital/tensor.hpp"

namespace vital::test {

inline Normalization unit_norm(int channels) {
  return {std::vector<double>(static_cast<std::size_t>(channels), 0.5),
          std::vector<double>(static_cast<std::size_t>(channels), 0.25)};
}

/// Small randomly initialised network on 3x8x8 inputs.
inline Model tiny_model(std::uint64_t seed, BlockKind kind = BlockKind::residual,
                        std::vector<int> widths = {4, 6, 8}, int classes = 3,
                        Shape3 input = {3, 8, 8}) {
  ModelSpec spec = kind == BlockKind::residual
                       ? resnet_desk(input, classes, std::move(widths), unit_norm(input.channels))
                       : plain_desk(input, classes, std::move(widths), unit_norm(input.channels));
  return Model::initialize(spec, seed);
}

inline FeatureMap random_image(Shape3 shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  FeatureMap img(shape);
  for (double& v : img.values()) v = u(rng);
  return img;
}

inline ActivationTensor random_tensor(std::size_t c, std::size_t d, std::mt19937_64& rng,
                                      const std::string& id = "l") {
  std::normal_distribution<double> n(0.0, 1.0);
  ActivationTensor t(id, c, d);
  for (double& v : t.values) v = n(rng);
  return t;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("vital-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace vital::test
