// SPDX-License-Identifier: Apache-2.0
#include "vital/dataset.hpp"

#include <curl/curl.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "vital/archive.hpp"
#include "vital/errors.hpp"
#include "vital/hash.hpp"
#include "vital/image.hpp"

namespace vital {

namespace fs = std::filesystem;

Dataset::Dataset(std::string name, std::string split, Shape3 geometry,
                 std::vector<std::string> class_names)
    : name_(std::move(name)),
      split_(std::move(split)),
      geometry_(geometry),
      class_names_(std::move(class_names)) {}

void Dataset::add(std::string id, int label, std::vector<std::uint8_t> pixels) {
  if (pixels.size() != geometry_.size()) {
    throw ValidationError("image '" + id + "' has " + std::to_string(pixels.size()) +
                          " pixels, expected " + std::to_string(geometry_.size()));
  }
  if (label < 0 || label >= class_count()) {
    throw ValidationError("label " + std::to_string(label) + " out of range for '" + id + "'");
  }
  if (index_.count(id)) throw ValidationError("duplicate image id '" + id + "'");
  index_.emplace(id, labels_.size());
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  labels_.push_back(label);
  ids_.push_back(std::move(id));
}

void Dataset::add(std::string id, int label, const FeatureMap& image) {
  if (image.shape() != geometry_) {
    throw ValidationError("image '" + id + "' has shape " + to_string(image.shape()));
  }
  std::vector<std::uint8_t> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(image.values()[i]);
  add(std::move(id), label, std::move(px));
}

FeatureMap Dataset::image(std::size_t i) const {
  if (i >= size()) throw ValidationError("image index out of range");
  FeatureMap out(geometry_);
  const std::uint8_t* src = pixels_.data() + i * geometry_.size();
  for (std::size_t k = 0; k < geometry_.size(); ++k) out.values()[k] = src[k] / 255.0;
  return out;
}

std::optional<std::size_t> Dataset::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> Dataset::indices_of_class(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == label) out.push_back(i);
  }
  return out;
}

FeatureMap DatasetSplits::image(const std::string& id) const {
  if (auto i = train.find(id)) return train.image(*i);
  if (auto i = test.find(id)) return test.image(*i);
  throw ValidationError("unknown image id '" + id + "'");
}

int DatasetSplits::label(const std::string& id) const {
  if (auto i = train.find(id)) return train.label(*i);
  if (auto i = test.find(id)) return test.label(*i);
  throw ValidationError("unknown image id '" + id + "'");
}

bool DatasetSplits::contains(const std::string& id) const {
  return train.find(id).has_value() || test.find(id).has_value();
}

namespace {

std::string make_id(const std::string& name, const std::string& split, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return name + "/" + split + "/" + buf;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double f = h * 6.0;
  const int i = static_cast<int>(f) % 6;
  const double frac = f - std::floor(f);
  const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

const std::vector<std::string> kShapeNames = {"disc",     "square", "triangle", "hstripes",
                                              "vstripes", "checker", "ring",    "cross",
                                              "diagonal", "dots"};
constexpr std::array<double, 10> kShapeHues = {0.0, 0.08, 0.15, 0.33, 0.5,
                                               0.62, 0.75, 0.88, 0.25, 0.42};

struct ShapeParams {
  int kind = 0;
  double cx = 16, cy = 16, size = 8, aux = 2, period = 6, phase = 0;
  bool flip = false;
  std::vector<std::array<double, 3>> dots;  // x, y, r
};

bool inside(const ShapeParams& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double h = p.size;
  auto in_box = [&] { return std::abs(dx) <= h && std::abs(dy) <= h; };
  auto band = [&](double coord) {
    return static_cast<long>(std::floor((coord + p.phase) / (p.period / 2))) % 2 == 0;
  };
  switch (p.kind) {
    case 0: return dx * dx + dy * dy <= h * h;
    case 1: return in_box();
    case 2: {
      const double top = p.cy - h;
      if (y < top || y > p.cy + h) return false;
      return std::abs(dx) <= (y - top) / 2.0 + 0.5;
    }
    case 3: return in_box() && band(y);
    case 4: return in_box() && band(x);
    case 5: {
      if (!in_box()) return false;
      const long a = static_cast<long>(std::floor((x + p.phase) / p.aux));
      const long b = static_cast<long>(std::floor((y + p.phase) / p.aux));
      return ((a + b) % 2 + 2) % 2 == 0;
    }
    case 6: {
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= h && d >= h - p.aux;
    }
    case 7:
      return (std::abs(dx) <= p.aux && std::abs(dy) <= h) ||
             (std::abs(dy) <= p.aux && std::abs(dx) <= h);
    case 8: return in_box() && band(p.flip ? x - y + 64 : x + y);
    default:
      for (const auto& d : p.dots) {
        const double ex = x - d[0], ey = y - d[1];
        if (ex * ex + ey * ey <= d[2] * d[2]) return true;
      }
      return false;
  }
}

FeatureMap render_shape(int kind, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };

  ShapeParams p;
  p.kind = kind;
  p.cx = uni(11, 21);
  p.cy = uni(11, 21);
  p.period = uni(4.0, 7.0);
  p.phase = uni(0.0, 8.0);
  p.flip = u(rng) < 0.5;
  switch (kind) {
    case 0: p.size = uni(6, 10); break;
    case 1: p.size = uni(5, 9); break;
    case 2: p.size = uni(6, 10); break;
    case 3: case 4: case 8: p.size = uni(8, 12); break;
    case 5: p.size = uni(8, 12); p.aux = std::floor(uni(2, 4.99)); break;
    case 6: p.size = uni(7, 11); p.aux = uni(2.0, 3.5); break;
    case 7: p.size = uni(7, 11); p.aux = uni(1.5, 2.5); break;
    default: {
      const int n = static_cast<int>(uni(6, 11));
      for (int i = 0; i < n; ++i) p.dots.push_back({uni(3, 29), uni(3, 29), uni(1.5, 2.5)});
    }
  }

  const double hue = u(rng) < 0.25 ? u(rng) : kShapeHues[kind] + uni(-0.06, 0.06);
  const auto fg = hsv_to_rgb(hue, uni(0.6, 1.0), uni(0.65, 1.0));
  const auto bg = hsv_to_rgb(u(rng), uni(0.0, 0.4), uni(0.1, 0.5));
  const double gx = uni(-0.1, 0.1), gy = uni(-0.1, 0.1);
  std::normal_distribution<double> noise(0.0, 0.04);

  FeatureMap img({3, 32, 32});
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 3; ++sy) {
        for (int sx = 0; sx < 3; ++sx) {
          hits += inside(p, x + (sx + 0.5) / 3.0, y + (sy + 0.5) / 3.0) ? 1 : 0;
        }
      }
      const double cov = hits / 9.0;
      const double shade = gx * (x - 16) / 16.0 + gy * (y - 16) / 16.0;
      for (int c = 0; c < 3; ++c) {
        const double v = (bg[c] + shade) * (1 - cov) + fg[c] * cov + noise(rng);
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

// ---- CIFAR-10 --------------------------------------------------------------

constexpr const char* kCifarUrl = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
constexpr const char* kCifarMd5 = "c32a1d4ab5d03f1284b67883e8d87530";
const std::vector<std::string> kCifarClasses = {"airplane", "automobile", "bird",  "cat",  "deer",
                                                "dog",      "frog",       "horse", "ship", "truck"};

std::size_t curl_write(char* data, std::size_t size, std::size_t n, void* user) {
  auto* out = static_cast<std::ofstream*>(user);
  out->write(data, static_cast<std::streamsize>(size * n));
  return *out ? size * n : 0;
}

void download(const std::string& url, const fs::path& dest) {
  fs::create_directories(dest.parent_path());
  const fs::path part = dest.string() + ".part";
  {
    std::ofstream out(part, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + part.string());
    CURL* curl = curl_easy_init();
    if (!curl) throw IoError("libcurl initialisation failed");
    curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
    curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
    curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
    curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, &curl_write);
    curl_easy_setopt(curl, CURLOPT_WRITEDATA, &out);
    const CURLcode rc = curl_easy_perform(curl);
    curl_easy_cleanup(curl);
    if (rc != CURLE_OK) {
      out.close();
      fs::remove(part);
      throw IoError("download of " + url + " failed: " + curl_easy_strerror(rc));
    }
  }
  fs::rename(part, dest);
}

// Extracts regular files of a gzip-compressed ustar archive into `dest`.
void extract_tar_gz(const fs::path& archive, const fs::path& dest) {
  gzFile gz = gzopen(archive.c_str(), "rb");
  if (!gz) throw IoError("cannot open " + archive.string());
  std::string tar;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(gz, buf.data(), buf.size())) > 0) tar.append(buf.data(), n);
  gzclose(gz);
  if (n < 0) throw IoError("corrupt gzip stream in " + archive.string());

  std::size_t pos = 0;
  while (pos + 512 <= tar.size()) {
    const char* hdr = tar.data() + pos;
    if (hdr[0] == '\0') break;
    std::string name(hdr, strnlen(hdr, 100));
    const std::size_t size = std::stoul(std::string(hdr + 124, 12), nullptr, 8);
    const char type = hdr[156];
    pos += 512;
    if (pos + size > tar.size()) throw IoError("truncated tar entry " + name);
    if (name.find("..") != std::string::npos) throw IoError("unsafe tar entry " + name);
    if (type == '0' || type == '\0') {
      write_file_atomic(dest / name, std::string_view(tar.data() + pos, size));
    }
    pos += (size + 511) / 512 * 512;
  }
}

void read_cifar_batch(const fs::path& file, Dataset& out) {
  const std::string bytes = read_file(file);
  constexpr std::size_t kRecord = 1 + 3072;
  if (bytes.size() % kRecord != 0) throw IoError("malformed CIFAR batch " + file.string());
  for (std::size_t r = 0; r < bytes.size() / kRecord; ++r) {
    const auto* rec = reinterpret_cast<const std::uint8_t*>(bytes.data() + r * kRecord);
    std::vector<std::uint8_t> px(rec + 1, rec + kRecord);
    out.add(make_id("cifar10", out.split(), out.size()), rec[0], std::move(px));
  }
}

}  // namespace

Dataset generate_shapes10(int per_class, std::uint64_t seed, const std::string& split) {
  if (per_class < 1) throw ValidationError("shapes10 needs at least one image per class");
  Dataset ds("shapes10", split, {3, 32, 32}, kShapeNames);
  // Separate streams per split so train/test never share images.
  std::uint32_t tag = 2166136261u;
  for (char ch : split) tag = (tag ^ static_cast<std::uint8_t>(ch)) * 16777619u;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  std::mt19937_64 rng(seq);
  for (int i = 0; i < per_class; ++i) {
    for (int k = 0; k < 10; ++k) {
      ds.add(make_id("shapes10", split, ds.size()), k, render_shape(k, rng));
    }
  }
  return ds;
}

Dataset generate_blobs2(int per_class, std::uint64_t seed, const std::string& split) {
  if (per_class < 1) throw ValidationError("blobs2 needs at least one image per class");
  Dataset ds("blobs2", split, {3, 16, 16}, {"left", "right"});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(split.size()), 7u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int i = 0; i < per_class; ++i) {
    for (int k = 0; k < 2; ++k) {
      const double cx = (k == 0 ? 2.0 : 10.0) + 4.0 * u(rng);
      const double cy = 3.0 + 10.0 * u(rng);
      FeatureMap img({3, 16, 16});
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 16; ++y) {
          for (int x = 0; x < 16; ++x) {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            img.at(c, y, x) = std::clamp(0.3 + 0.6 * std::exp(-r2 / (2 * 2.5 * 2.5)) + noise(rng),
                                         0.0, 1.0);
          }
        }
      }
      ds.add(make_id("blobs2", split, ds.size()), k, img);
    }
  }
  return ds;
}

DatasetSplits load_cifar10(const fs::path& root, bool allow_download) {
  const fs::path dir = root / "cifar-10-batches-bin";
  if (!fs::exists(dir / "test_batch.bin")) {
    if (!allow_download) {
      throw MissingInputError("CIFAR-10 binary batches not found under " + dir.string());
    }
    const fs::path archive = root / "cifar-10-binary.tar.gz";
    if (!fs::exists(archive)) download(kCifarUrl, archive);
    const std::string md5 = md5_file(archive);
    if (md5 != kCifarMd5) {
      throw IoError("CIFAR-10 archive checksum mismatch: got " + md5 + ", expected " + kCifarMd5);
    }
    extract_tar_gz(archive, root);
  }
  DatasetSplits splits{Dataset("cifar10", "train", {3, 32, 32}, kCifarClasses),
                       Dataset("cifar10", "test", {3, 32, 32}, kCifarClasses)};
  for (int b = 1; b <= 5; ++b) {
    read_cifar_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), splits.train);
  }
  read_cifar_batch(dir / "test_batch.bin", splits.test);
  return splits;
}

DatasetSplits load_image_folder(const fs::path& root, Shape3 geometry) {
  if (!fs::is_directory(root)) throw MissingInputError("dataset folder not found: " + root.string());
  const bool explicit_splits = fs::is_directory(root / "train") && fs::is_directory(root / "test");
  const fs::path class_root = explicit_splits ? root / "train" : root;

  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(class_root)) {
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw ValidationError("image folder needs at least two class folders");

  DatasetSplits splits{Dataset("folder", "train", geometry, classes),
                       Dataset("folder", "test", geometry, classes)};
  auto files_of = [](const fs::path& dir) {
    std::vector<fs::path> files;
    if (!fs::is_directory(dir)) return files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
  };
  auto load = [&](const fs::path& file) {
    FeatureMap img = read_png(file);
    if (geometry.channels != 3) throw ValidationError("folder datasets are RGB");
    return resize_bilinear(img, geometry.height, geometry.width);
  };
  for (int k = 0; k < static_cast<int>(classes.size()); ++k) {
    if (explicit_splits) {
      for (const auto& f : files_of(root / "train" / classes[k])) {
        splits.train.add("folder/train/" + classes[k] + "/" + f.filename().string(), k, load(f));
      }
      for (const auto& f : files_of(root / "test" / classes[k])) {
        splits.test.add("folder/test/" + classes[k] + "/" + f.filename().string(), k, load(f));
      }
    } else {
      const auto files = files_of(root / classes[k]);
      for (std::size_t i = 0; i < files.size(); ++i) {
        Dataset& dst = i % 5 == 4 ? splits.test : splits.train;
        dst.add("folder/" + dst.split() + "/" + classes[k] + "/" + files[i].filename().string(), k,
                load(files[i]));
      }
    }
  }
  if (splits.train.empty()) throw ValidationError("image folder contains no PNG images");
  return splits;
}

DatasetSplits load_dataset(const std::string& spec, const fs::path& data_root) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.empty()) throw ValidationError("empty dataset spec");

  auto num = [&](std::size_t i, long fallback) -> long {
    return parts.size() > i ? std::stol(parts[i]) : fallback;
  };
  if (parts[0] == "shapes10") {
    const auto seed = static_cast<std::uint64_t>(num(3, 2024));
    return {generate_shapes10(static_cast<int>(num(1, 600)), seed, "train"),
            generate_shapes10(static_cast<int>(num(2, 100)), seed, "test")};
  }
  if (parts[0] == "blobs2") {
    const auto seed = static_cast<std::uint64_t>(num(3, 7));
    return {generate_blobs2(static_cast<int>(num(1, 200)), seed, "train"),
            generate_blobs2(static_cast<int>(num(2, 100)), seed, "test")};
  }
  if (parts[0] == "cifar10") return load_cifar10(data_root, true);
  if (parts[0] == "folder" && parts.size() >= 2) {
    return load_image_folder(spec.substr(7), {3, 32, 32});
  }
  throw ValidationError("unknown dataset spec '" + spec + "'");
}

Normalization channel_statistics(const Dataset& dataset) {
  if (dataset.empty()) throw ValidationError("cannot compute statistics of an empty dataset");
  const Shape3 g = dataset.geometry();
  std::vector<double> sum(g.channels, 0.0), sq(g.channels, 0.0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const FeatureMap img = dataset.image(i);
    for (int c = 0; c < g.channels; ++c) {
      for (double v : img.channel(c)) {
        sum[c] += v;
        sq[c] += v * v;
      }
    }
  }
  const double n = static_cast<double>(dataset.size() * g.spatial());
  Normalization norm;
  for (int c = 0; c < g.channels; ++c) {
    const double m = sum[c] / n;
    norm.mean.push_back(m);
    norm.std.push_back(std::sqrt(std::max(sq[c] / n - m * m, 1e-12)));
  }
  return norm;
}

}  // namespace vital
