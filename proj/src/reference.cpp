// SPDX-License-Identifier: Apache-2.0
#include "vital/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <unistd.h>

#include "vital/archive.hpp"
#include "vital/errors.hpp"
#include "vital/hash.hpp"

namespace vital {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<CropRect> sliding_crops(const Shape3& geometry, int patch, int stride) {
  auto starts = [&](int extent) {
    std::vector<int> s;
    for (int p = 0; p + patch <= extent; p += stride) s.push_back(p);
    if (s.empty() || s.back() + patch < extent) s.push_back(extent - patch);
    return s;
  };
  std::vector<CropRect> out;
  for (int y : starts(geometry.height)) {
    for (int x : starts(geometry.width)) out.push_back({x, y, patch, patch});
  }
  return out;
}

bool crop_less(const CropRect& a, const CropRect& b) {
  return std::tie(a.y, a.x, a.height, a.width) < std::tie(b.y, b.x, b.height, b.width);
}

json crop_json(const CropRect& c) {
  return {{"x", c.x}, {"y", c.y}, {"width", c.width}, {"height", c.height}};
}

}  // namespace

json ImageSource::to_json() const {
  json j{{"id", id}};
  j["crop"] = crop ? crop_json(*crop) : json(nullptr);
  return j;
}

ImageSource ImageSource::from_json(const json& j) {
  ImageSource s{j.at("id").get<std::string>(), std::nullopt};
  if (j.contains("crop") && !j.at("crop").is_null()) {
    const auto& c = j.at("crop");
    s.crop = CropRect{c.at("x"), c.at("y"), c.at("width"), c.at("height")};
  }
  return s;
}

void ReferenceSet::validate(const Shape3& geometry) const {
  if (sources.empty()) throw ValidationError("reference set is empty");
  std::set<std::string> ids;
  for (const auto& s : sources) {
    if (!ids.insert(s.id).second) {
      throw ValidationError("reference set repeats image '" + s.id + "'");
    }
    if (s.crop) {
      const CropRect& c = *s.crop;
      if (c.width < 1 || c.height < 1 || c.x < 0 || c.y < 0 || c.x + c.width > geometry.width ||
          c.y + c.height > geometry.height) {
        throw ValidationError("crop of '" + s.id + "' lies outside the image");
      }
    }
  }
  if (corruption < 0 || static_cast<std::size_t>(corruption) > sources.size()) {
    throw ValidationError("corruption count out of range");
  }
}

json ReferenceSet::to_json() const {
  json src = json::array();
  for (const auto& s : sources) src.push_back(s.to_json());
  return {{"target", target.to_json()},
          {"sources", src},
          {"seed", seed},
          {"corruption", corruption},
          {"foreign_ids", foreign_ids}};
}

std::vector<std::size_t> seeded_order(const std::vector<std::string>& ids, std::uint64_t seed) {
  std::vector<std::uint64_t> keys(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) keys[i] = splitmix64(seed ^ fnv1a64(ids[i]));
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : ids[a] < ids[b];
  });
  return order;
}

ReferenceSet select_class_references(const Dataset& dataset, int class_id, std::size_t n,
                                     std::uint64_t seed) {
  if (class_id < 0 || class_id >= dataset.class_count()) {
    throw ValidationError("class id " + std::to_string(class_id) + " out of range");
  }
  if (n == 0) throw ValidationError("reference count must be at least 1");
  const auto members = dataset.indices_of_class(class_id);
  if (members.size() < n) {
    throw ValidationError("class " + std::to_string(class_id) + " (" +
                          dataset.class_names()[class_id] + ") has " +
                          std::to_string(members.size()) + " images, " + std::to_string(n) +
                          " requested");
  }
  std::vector<std::string> ids;
  for (std::size_t i : members) ids.push_back(dataset.id(i));
  const auto order = seeded_order(ids, seed);
  ReferenceSet refs;
  refs.target = AttributionTarget::class_neuron(class_id);
  refs.seed = seed;
  for (std::size_t k = 0; k < n; ++k) refs.sources.push_back({ids[order[k]], std::nullopt});
  return refs;
}

std::vector<PatchScore> score_patches(const Dataset& dataset, const Model& model,
                                      const std::string& layer_id, int channel,
                                      const PatchOptions& options, std::uint64_t seed) {
  AttributionTarget::intermediate_neuron(layer_id, channel).validate(model);
  std::vector<double> basis(static_cast<std::size_t>(model.tap(layer_id).channel_count), 0.0);
  basis[static_cast<std::size_t>(channel)] = 1.0;
  return score_direction_patches(dataset, model, layer_id, basis, options, seed);
}

std::vector<PatchScore> score_direction_patches(const Dataset& dataset, const Model& model,
                                                const std::string& layer_id,
                                                std::span<const double> direction,
                                                const PatchOptions& options, std::uint64_t seed) {
  const LayerTap& tap = model.tap(layer_id);
  if (direction.size() != static_cast<std::size_t>(tap.channel_count)) {
    throw ValidationError("direction length does not match the channel count of '" + layer_id + "'");
  }
  const Shape3 geo = dataset.geometry();
  const Shape3 input = model.input_shape();
  const int patch = options.patch_size;
  if (patch < 1 || patch > geo.height || patch > geo.width || patch > input.height ||
      patch > input.width) {
    throw ValidationError("patch size " + std::to_string(patch) +
                          " must lie in [1, min(image, model input)]");
  }
  const int stride = options.stride > 0 ? options.stride : std::max(1, patch / 2);
  const auto crops = sliding_crops(geo, patch, stride);

  std::vector<std::size_t> images(dataset.size());
  std::iota(images.begin(), images.end(), 0);
  if (options.candidate_limit > 0 && options.candidate_limit < dataset.size()) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < dataset.size(); ++i) ids.push_back(dataset.id(i));
    auto order = seeded_order(ids, seed);
    order.resize(options.candidate_limit);
    std::sort(order.begin(), order.end());
    images = std::move(order);
  }

  const std::size_t depth = model.tap_index(layer_id) + 1;
  const std::size_t per_image = crops.size();
  std::vector<PatchScore> out(images.size() * per_image);
  const auto n = static_cast<std::ptrdiff_t>(images.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::size_t idx = images[static_cast<std::size_t>(i)];
    const FeatureMap full = dataset.image(idx);
    for (std::size_t k = 0; k < per_image; ++k) {
      FeatureMap piece = crop(full, crops[k]);
      if (piece.shape() != input) piece = resize_bilinear(piece, input.height, input.width);
      const ForwardTrace t = model.trace_until(piece, depth);
      const FeatureMap& a = t.blocks.back().output;
      double gap = 0.0;
      for (int c = 0; c < a.shape().channels; ++c) {
        const double w = direction[static_cast<std::size_t>(c)];
        if (w == 0.0) continue;
        double sum = 0.0;
        for (double v : a.channel(c)) sum += v;
        gap += w * sum;
      }
      gap /= static_cast<double>(a.shape().spatial());
      out[static_cast<std::size_t>(i) * per_image + k] = {dataset.id(idx), crops[k], gap};
    }
  }
  return out;
}

std::vector<PatchScore> top_distinct_patches(std::vector<PatchScore> scores, std::size_t k) {
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) throw ValidationError("patch score for '" + s.image_id + "' is not finite");
  }
  std::sort(scores.begin(), scores.end(), [](const PatchScore& a, const PatchScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return crop_less(a.crop, b.crop);
  });
  std::set<std::string> used;
  std::vector<PatchScore> out;
  for (auto& s : scores) {
    if (out.size() == k) break;
    if (used.insert(s.image_id).second) out.push_back(std::move(s));
  }
  return out;
}

ReferenceSet select_neuron_patches(const Dataset& dataset, const Model& model,
                                   const std::string& layer_id, int channel, std::size_t k,
                                   const PatchOptions& options, std::uint64_t seed) {
  if (k == 0) throw ValidationError("k must be at least 1");
  auto top = top_distinct_patches(score_patches(dataset, model, layer_id, channel, options, seed), k);
  if (top.size() < k) {
    throw ValidationError("only " + std::to_string(top.size()) +
                          " distinct source images available, " + std::to_string(k) + " requested");
  }
  ReferenceSet refs;
  refs.target = AttributionTarget::intermediate_neuron(layer_id, channel);
  refs.seed = seed;
  for (const auto& p : top) refs.sources.push_back({p.image_id, p.crop});
  return refs;
}

ReferenceSet select_concept_patches(const Dataset& dataset, const Model& model,
                                    const std::string& layer_id, std::span<const double> direction,
                                    std::size_t k, const PatchOptions& options,
                                    std::uint64_t seed) {
  const auto target =
      AttributionTarget::concept_direction(layer_id, {direction.begin(), direction.end()});
  target.validate(model);
  if (k == 0) throw ValidationError("k must be at least 1");
  auto top = top_distinct_patches(
      score_direction_patches(dataset, model, layer_id, direction, options, seed), k);
  if (top.size() < k) {
    throw ValidationError("only " + std::to_string(top.size()) +
                          " distinct source images available, " + std::to_string(k) + " requested");
  }
  ReferenceSet refs;
  refs.target = target;
  refs.seed = seed;
  for (const auto& p : top) refs.sources.push_back({p.image_id, p.crop});
  return refs;
}

ReferenceSet corrupt_references(const ReferenceSet& refs, std::size_t m, const Dataset& pool,
                                std::uint64_t seed) {
  if (m > refs.size()) {
    throw ValidationError("cannot corrupt " + std::to_string(m) + " of " +
                          std::to_string(refs.size()) + " references");
  }
  ReferenceSet out = refs;
  if (m == 0) return out;

  std::set<std::string> members;
  for (const auto& s : refs.sources) members.insert(s.id);
  const bool by_class = refs.target.kind == AttributionTarget::Kind::class_neuron;
  std::vector<std::string> foreign;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (members.count(pool.id(i))) continue;
    if (by_class && pool.label(i) == refs.target.class_id) continue;
    foreign.push_back(pool.id(i));
  }
  if (foreign.size() < m) {
    throw ValidationError("foreign pool has " + std::to_string(foreign.size()) +
                          " eligible images, " + std::to_string(m) + " needed");
  }
  std::vector<std::string> ids;
  for (const auto& s : refs.sources) ids.push_back(s.id);
  auto victims = seeded_order(ids, splitmix64(seed) ^ 0x5bd1e995ULL);
  victims.resize(m);
  std::sort(victims.begin(), victims.end());
  const auto picks = seeded_order(foreign, seed);
  for (std::size_t j = 0; j < m; ++j) {
    out.sources[victims[j]] = {foreign[picks[j]], std::nullopt};
    out.foreign_ids.push_back(foreign[picks[j]]);
  }
  std::sort(out.foreign_ids.begin(), out.foreign_ids.end());
  out.corruption = refs.corruption + static_cast<int>(m);
  return out;
}

FeatureMap load_source(const DatasetSplits& data, const ImageSource& source, const Shape3& input) {
  if (!data.contains(source.id)) throw MissingInputError("unknown image id '" + source.id + "'");
  FeatureMap img = data.image(source.id);
  if (source.crop) img = crop(img, *source.crop);
  if (img.shape() != input) {
    if (img.shape().channels != input.channels) {
      throw ValidationError("image '" + source.id + "' has the wrong channel count");
    }
    img = resize_bilinear(img, input.height, input.width);
  }
  return img;
}

std::size_t required_depth(const Model& model, const std::vector<std::string>& layers,
                           RelevanceMode mode, const std::optional<AttributionTarget>& target) {
  std::size_t depth = 0;
  for (const auto& id : layers) depth = std::max(depth, model.tap_index(id) + 1);
  if (mode != RelevanceMode::none && target) {
    const std::size_t s = target->start_depth(model);
    depth = std::max(depth, std::min(s + 1, model.spec().blocks.size()));
  }
  return depth;
}

std::map<std::string, ActivationTensor> matched_features(
    const Model& model, const ForwardTrace& trace, const std::vector<std::string>& layers,
    RelevanceMode mode, const std::optional<AttributionTarget>& target,
    std::map<std::string, RelevanceMap>* relevance_out) {
  std::map<std::string, ActivationTensor> out;
  for (const auto& id : layers) {
    const std::size_t idx = model.tap_index(id);
    if (idx >= trace.blocks.size()) throw ValidationError("trace does not reach layer '" + id + "'");
    out.emplace(id, ActivationTensor::from_map(id, trace.blocks[idx].output));
  }
  if (mode == RelevanceMode::none) return out;
  if (!target) throw ConfigError("relevance mode '" + to_string(mode) + "' needs an attribution target");
  auto rel = relevance(mode, model, trace, *target, layers);
  for (auto& [id, a] : out) a = relevance_weighted_activation(a, rel.at(id));
  if (relevance_out) *relevance_out = std::move(rel);
  return out;
}

json fingerprint_input(const ReferenceSet& refs, const Model& model, const MatchPlan& plan,
                       RelevanceMode mode, const std::optional<AttributionTarget>& target) {
  std::vector<ImageSource> sorted = refs.sources;
  std::sort(sorted.begin(), sorted.end(), [](const ImageSource& a, const ImageSource& b) {
    if (a.id != b.id) return a.id < b.id;
    if (a.crop.has_value() != b.crop.has_value()) return !a.crop.has_value();
    return a.crop && crop_less(*a.crop, *b.crop);
  });
  json src = json::array();
  for (const auto& s : sorted) src.push_back(s.to_json());
  return {{"checkpoint", model.weights_hash()},
          {"sources", src},
          {"plan", plan.to_json()},
          {"relevance_mode", to_string(mode)},
          {"lrp", mode == RelevanceMode::lrp ? json{{"epsilon", kMatchingLrp.epsilon},
                                                    {"relative_epsilon", kMatchingLrp.relative_epsilon}}
                                             : json(nullptr)},
          {"target", target && mode != RelevanceMode::none ? target->to_json() : json(nullptr)}};
}

BuildResult build_reference_distribution(const ReferenceSet& refs, const DatasetSplits& data,
                                         const Model& model, const MatchPlan& plan,
                                         RelevanceMode mode,
                                         const std::optional<AttributionTarget>& target,
                                         const BuildOptions& options) {
  if (mode != RelevanceMode::none && !target) {
    throw ConfigError("relevance mode '" + to_string(mode) + "' needs an attribution target");
  }
  refs.validate(data.train.empty() ? data.test.geometry() : data.train.geometry());
  const std::vector<std::string> layers = plan.layers();
  if (mode != RelevanceMode::none) {
    target->validate(model);
    const std::size_t depth = target->start_depth(model);
    for (const auto& id : layers) {
      if (model.tap_index(id) >= depth) {
        throw ConfigError("plan layer '" + id + "' is not shallower than the attribution target");
      }
    }
  }

  BuildResult result;
  result.fingerprint_input = fingerprint_input(refs, model, plan, mode, target);
  const std::string canonical = result.fingerprint_input.dump();
  const std::string fingerprint = sha256_hex(canonical);

  if (!options.cache_dir.empty()) {
    result.cache_path = options.cache_dir / fingerprint;
    if (fs::exists(result.cache_path / "meta.json")) {
      const json meta = json::parse(read_file(result.cache_path / "meta.json"));
      if (meta.value("fingerprint_input", json()) != result.fingerprint_input) {
        throw CacheIntegrityError("cache entry " + fingerprint + " was built from different inputs");
      }
      if (meta.value("profiles_sha256", std::string()) !=
          sha256_file(result.cache_path / "profiles.varc")) {
        throw CacheIntegrityError("cache entry " + fingerprint + " has a corrupted profile archive");
      }
      result.distribution = load_reference_distribution(result.cache_path, &model);
      if (result.distribution.provenance.fingerprint != fingerprint) {
        throw CacheIntegrityError("cache entry " + fingerprint + " records another fingerprint");
      }
      result.cache_hit = true;
      return result;
    }
  }

  const Shape3 input = model.input_shape();
  const std::size_t depth = required_depth(model, layers, mode, target);
  const std::size_t n = refs.size();
  std::vector<std::map<std::string, ActivationTensor>> per_image(n);
  std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const auto u = static_cast<std::size_t>(i);
    try {
      const FeatureMap img = load_source(data, refs.sources[u], input);
      const ForwardTrace t = model.trace_until(img, depth);
      per_image[u] = matched_features(model, t, layers, mode, target);
    } catch (const std::exception& e) {
      errors[u] = refs.sources[u].id + ": " + e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw ValidationError("reference image failed: " + e);
  }

  ReferenceDistribution& dist = result.distribution;
  for (const auto& id : layers) {
    std::vector<ActivationTensor> acts;
    acts.reserve(n);
    for (auto& m : per_image) acts.push_back(std::move(m.at(id)));
    dist.profiles.emplace(id, sorted_reference(acts));
  }
  dist.provenance = {fingerprint, to_string(mode), n, refs.corruption};

  if (!options.cache_dir.empty()) {
    fs::create_directories(options.cache_dir);
    std::random_device rd;
    const fs::path tmp = options.cache_dir / (fingerprint + ".tmp-" + std::to_string(::getpid()) +
                                              "-" + std::to_string(rd()));
    fs::create_directories(tmp);
    const std::string archive = serialize_archive(profiles_to_archive(dist));
    json meta{{"fingerprint_input", result.fingerprint_input},
              {"profiles_sha256", sha256_hex(archive)},
              {"reference_set", refs.to_json()}};
    save_reference_distribution(tmp, dist, meta);
    std::error_code ec;
    fs::rename(tmp, result.cache_path, ec);
    // Another builder may have won the race; its entry has identical content.
    if (ec) fs::remove_all(tmp);
  }
  return result;
}

}  // namespace vital
