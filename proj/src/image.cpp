// SPDX-License-Identifier: Apache-2.0
#include "vital/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "vital/errors.hpp"

namespace vital {

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

FeatureMap crop(const FeatureMap& image, const CropRect& r) {
  const Shape3 s = image.shape();
  if (r.x < 0 || r.y < 0 || r.width < 1 || r.height < 1 || r.x + r.width > s.width ||
      r.y + r.height > s.height) {
    throw ValidationError("crop rectangle outside image bounds");
  }
  FeatureMap out({s.channels, r.height, r.width});
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < r.height; ++y) {
      for (int x = 0; x < r.width; ++x) out.at(c, y, x) = image.at(c, r.y + y, r.x + x);
    }
  }
  return out;
}

FeatureMap resize_bilinear(const FeatureMap& image, int height, int width) {
  const Shape3 s = image.shape();
  if (s.height == height && s.width == width) return image;
  FeatureMap out({s.channels, height, width});
  const double sy = static_cast<double>(s.height) / height;
  const double sx = static_cast<double>(s.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, s.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, s.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, s.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, s.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < s.channels; ++c) {
        const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const double bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

FeatureMap roll(const FeatureMap& image, int dy, int dx) {
  const Shape3 s = image.shape();
  FeatureMap out(s);
  auto wrap = [](int v, int n) { return ((v % n) + n) % n; };
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      const int ty = wrap(y + dy, s.height);
      for (int x = 0; x < s.width; ++x) out.at(c, ty, wrap(x + dx, s.width)) = image.at(c, y, x);
    }
  }
  return out;
}

namespace {

using FilePtr = std::unique_ptr<std::FILE, decltype(&std::fclose)>;

void write_rows(const std::filesystem::path& path, int width, int height, int color_type,
                int channels, const std::vector<std::uint8_t>& pixels) {
  FilePtr f(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!f) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const FeatureMap& image) {
  const Shape3 s = image.shape();
  if (s.channels != 1 && s.channels != 3) {
    throw ValidationError("write_png supports 1 or 3 channels, got " + to_string(s));
  }
  std::vector<std::uint8_t> px(s.size());
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      for (int c = 0; c < s.channels; ++c) {
        px[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] = to_byte(image.at(c, y, x));
      }
    }
  }
  write_rows(path, s.width, s.height, s.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
             s.channels, px);
}

void write_png_rgba(const std::filesystem::path& path, const FeatureMap& rgb,
                    std::span<const double> alpha) {
  const Shape3 s = rgb.shape();
  if (s.channels != 3) throw ValidationError("write_png_rgba expects a 3-channel image");
  if (alpha.size() != s.spatial()) throw ValidationError("alpha size does not match image");
  std::vector<std::uint8_t> px(s.spatial() * 4);
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * s.width + x;
      for (int c = 0; c < 3; ++c) px[p * 4 + c] = to_byte(rgb.at(c, y, x));
      px[p * 4 + 3] = to_byte(alpha[p]);
    }
  }
  write_rows(path, s.width, s.height, PNG_COLOR_TYPE_RGBA, 4, px);
}

FeatureMap read_png_rgba(const std::filesystem::path& path, std::vector<double>& alpha) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const int h = static_cast<int>(img.height);
  const int w = static_cast<int>(img.width);
  FeatureMap out({3, h, w});
  alpha.assign(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = buf[p * 4 + c] / 255.0;
      alpha[p] = buf[p * 4 + 3] / 255.0;
    }
  }
  return out;
}

FeatureMap read_png(const std::filesystem::path& path) {
  std::vector<double> alpha;
  return read_png_rgba(path, alpha);
}

}  // namespace vital
