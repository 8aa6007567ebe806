// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>

#include "vital/tensor.hpp"

namespace vital {

struct CropRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  bool operator==(const CropRect&) const = default;
};

FeatureMap crop(const FeatureMap& image, const CropRect& rect);
/// Bilinear resampling with half-pixel centres.
FeatureMap resize_bilinear(const FeatureMap& image, int height, int width);

/// Circular shift by (dy, dx); positive values move content down/right.
FeatureMap roll(const FeatureMap& image, int dy, int dx);

/// 8-bit PNG: 1 channel -> gray, 3 channels -> RGB. Values are clamped to [0,1].
void write_png(const std::filesystem::path& path, const FeatureMap& image);
/// RGBA PNG whose alpha channel is `alpha` (H*W values in [0,1]).
void write_png_rgba(const std::filesystem::path& path, const FeatureMap& rgb,
                    std::span<const double> alpha);
/// Reads any 8-bit PNG as a 3-channel image in [0,1] (alpha is dropped).
FeatureMap read_png(const std::filesystem::path& path);
/// Reads an RGBA PNG, returning the RGB map and filling `alpha`.
FeatureMap read_png_rgba(const std::filesystem::path& path, std::vector<double>& alpha);

std::uint8_t to_byte(double v);

}  // namespace vital
