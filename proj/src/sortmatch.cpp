// SPDX-License-Identifier: Apache-2.0
#include "vital/sortmatch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "vital/errors.hpp"
#include "vital/model.hpp"

namespace vital {

using nlohmann::json;

SortedChannelProfile::SortedChannelProfile(ActivationTensor sorted_rows)
    : rows_(std::move(sorted_rows)) {
  for (std::size_t c = 0; c < rows_.channels; ++c) {
    const auto r = rows_.row(c);
    if (!std::is_sorted(r.begin(), r.end())) {
      throw ValidationError("profile row " + std::to_string(c) + " of '" + rows_.layer_id +
                            "' is not nondecreasing");
    }
  }
}

const SortedChannelProfile& ReferenceDistribution::profile(const std::string& layer_id) const {
  auto it = profiles.find(layer_id);
  if (it == profiles.end()) {
    throw ConfigError("reference distribution has no profile for layer '" + layer_id + "'");
  }
  return it->second;
}

MatchPlan::MatchPlan(std::vector<std::pair<std::string, double>> entries)
    : entries_(std::move(entries)) {
  std::set<std::string> seen;
  bool any_positive = false;
  for (const auto& [id, w] : entries_) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ValidationError("plan weight for '" + id + "' must be finite and nonnegative");
    }
    if (!seen.insert(id).second) throw ValidationError("plan lists layer '" + id + "' twice");
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) throw ValidationError("match plan needs at least one positive weight");
}

MatchPlan MatchPlan::all_taps(const Model& model, double weight) {
  std::vector<std::pair<std::string, double>> e;
  for (const auto& t : model.taps()) e.emplace_back(t.layer_id, weight);
  return MatchPlan(std::move(e));
}

MatchPlan MatchPlan::first_last(const Model& model, double weight) {
  const auto& taps = model.taps();
  std::vector<std::pair<std::string, double>> e{{taps.front().layer_id, weight}};
  if (taps.size() > 1) e.emplace_back(taps.back().layer_id, weight);
  return MatchPlan(std::move(e));
}

std::vector<std::string> MatchPlan::layers() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

MatchPlan MatchPlan::scaled(double factor) const {
  auto e = entries_;
  for (auto& [id, w] : e) w *= factor;
  return MatchPlan(std::move(e));
}

json MatchPlan::to_json() const {
  json out = json::array();
  for (const auto& [id, w] : entries_) out.push_back({{"layer", id}, {"weight", w}});
  return out;
}

MatchPlan MatchPlan::from_json(const json& j) {
  std::vector<std::pair<std::string, double>> e;
  for (const auto& item : j) e.emplace_back(item.at("layer"), item.at("weight"));
  return MatchPlan(std::move(e));
}

SortedChannelProfile sorted_reference(std::span<const ActivationTensor> references) {
  if (references.empty()) throw ValidationError("sorted_reference needs at least one reference");
  const ActivationTensor& first = references.front();
  for (const auto& r : references) {
    if (!r.same_shape(first)) {
      throw ValidationError("reference activations for '" + first.layer_id +
                            "' disagree in shape");
    }
  }
  ActivationTensor mean(first.layer_id, first.channels, first.spatial);
  const auto channels = static_cast<std::ptrdiff_t>(first.channels);
  const double inv = 1.0 / static_cast<double>(references.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < channels; ++c) {
    std::vector<double> buf(first.spatial);
    auto acc = mean.row(static_cast<std::size_t>(c));
    for (const auto& r : references) {
      const auto src = r.row(static_cast<std::size_t>(c));
      std::copy(src.begin(), src.end(), buf.begin());
      std::sort(buf.begin(), buf.end());
      // Accumulating from +0.0 also folds -0.0 into +0.0, so the result is
      // independent of where signed zeros sat in the input.
      for (std::size_t i = 0; i < buf.size(); ++i) acc[i] += buf[i];
    }
    for (double& v : acc) v *= inv;
  }
  return SortedChannelProfile(std::move(mean));
}

ActivationTensor reorder_to_generated(const ActivationTensor& z, const SortedChannelProfile& profile) {
  if (z.channels != profile.channels() || z.spatial != profile.spatial()) {
    throw ValidationError("cannot reorder '" + profile.layer_id() + "': generated shape " +
                          std::to_string(z.channels) + "x" + std::to_string(z.spatial) +
                          " vs reference " + std::to_string(profile.channels()) + "x" +
                          std::to_string(profile.spatial()));
  }
  ActivationTensor target(z.layer_id, z.channels, z.spatial);
  const auto channels = static_cast<std::ptrdiff_t>(z.channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < channels; ++c) {
    const auto row = z.row(static_cast<std::size_t>(c));
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    const auto sorted = profile.row(static_cast<std::size_t>(c));
    auto out = target.row(static_cast<std::size_t>(c));
    for (std::size_t k = 0; k < order.size(); ++k) out[order[k]] = sorted[k];
  }
  return target;
}

double sm_loss(const ActivationTensor& z, const ActivationTensor& target) {
  if (!z.same_shape(target)) throw ValidationError("sm_loss shape mismatch for '" + z.layer_id + "'");
  if (z.values.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    const double d = z.values[i] - target.values[i];
    acc += d * d;
  }
  return acc / static_cast<double>(z.values.size());
}

ActivationTensor sm_loss_gradient(const ActivationTensor& z, const ActivationTensor& target) {
  if (!z.same_shape(target)) throw ValidationError("sm_loss shape mismatch for '" + z.layer_id + "'");
  ActivationTensor g(z.layer_id, z.channels, z.spatial);
  const double scale = 2.0 / static_cast<double>(std::max<std::size_t>(z.values.size(), 1));
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    g.values[i] = scale * (z.values[i] - target.values[i]);
  }
  return g;
}

MultiLayerLoss sm_loss_multilayer(const std::map<std::string, ActivationTensor>& activations,
                                  const ReferenceDistribution& reference, const MatchPlan& plan,
                                  bool with_gradients) {
  MultiLayerLoss out;
  for (const auto& [layer, weight] : plan.entries()) {
    auto it = activations.find(layer);
    if (it == activations.end()) {
      throw ConfigError("plan layer '" + layer + "' missing from generated activations");
    }
    const SortedChannelProfile& profile = reference.profile(layer);
    const ActivationTensor target = reorder_to_generated(it->second, profile);
    LayerMatch m;
    m.layer_id = layer;
    m.weight = weight;
    m.loss = sm_loss(it->second, target);
    if (with_gradients) {
      m.weighted_grad = sm_loss_gradient(it->second, target);
      for (double& g : m.weighted_grad.values) g *= weight;
    }
    out.total += weight * m.loss;
    out.layers.push_back(std::move(m));
  }
  return out;
}

ArrayArchive profiles_to_archive(const ReferenceDistribution& reference) {
  ArrayArchive archive;
  for (const auto& [id, p] : reference.profiles) {
    archive[id + "/profile"] = {
        {static_cast<std::int64_t>(p.channels()), static_cast<std::int64_t>(p.spatial())},
        p.tensor().values};
  }
  return archive;
}

json provenance_to_json(const ReferenceProvenance& p) {
  return {{"fingerprint", p.fingerprint},
          {"relevance_mode", p.relevance_mode},
          {"reference_count", p.reference_count},
          {"corruption", p.corruption}};
}

void save_reference_distribution(const std::filesystem::path& dir,
                                 const ReferenceDistribution& reference, const json& extra_meta) {
  write_archive(dir / "profiles.varc", profiles_to_archive(reference));
  json meta = extra_meta.is_object() ? extra_meta : json::object();
  meta["provenance"] = provenance_to_json(reference.provenance);
  write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

ReferenceDistribution load_reference_distribution(const std::filesystem::path& dir,
                                                  const Model* model) {
  const ArrayArchive archive = read_archive(dir / "profiles.varc");
  const json meta = json::parse(read_file(dir / "meta.json"));
  ReferenceDistribution out;
  const auto& prov = meta.at("provenance");
  out.provenance.fingerprint = prov.at("fingerprint");
  out.provenance.relevance_mode = prov.at("relevance_mode");
  out.provenance.reference_count = prov.at("reference_count");
  out.provenance.corruption = prov.at("corruption");
  if (out.provenance.reference_count < 1) throw CacheIntegrityError("reference count must be >= 1");

  const std::string suffix = "/profile";
  for (const auto& [name, array] : archive) {
    if (name.size() <= suffix.size() ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
      continue;
    }
    const std::string layer = name.substr(0, name.size() - suffix.size());
    if (array.dims.size() != 2) throw IoError("profile '" + name + "' is not a matrix");
    const auto c = static_cast<std::size_t>(array.dims[0]);
    const auto d = static_cast<std::size_t>(array.dims[1]);
    if (model) {
      const LayerTap& tap = model->tap(layer);
      if (static_cast<std::size_t>(tap.channel_count) != c ||
          static_cast<std::size_t>(tap.spatial_size) != d) {
        throw ValidationError("profile '" + layer + "' does not match the model's tap shape");
      }
    }
    out.profiles.emplace(layer, SortedChannelProfile(ActivationTensor(layer, c, d, array.data)));
  }
  return out;
}

}  // namespace vital
