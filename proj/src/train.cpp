// SPDX-License-Identifier: Apache-2.0
#include "vital/train.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "vital/archive.hpp"
#include "vital/errors.hpp"
#include "vital/optim.hpp"

namespace vital {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Translate with edge replication, optionally mirrored horizontally.
FeatureMap augment(const FeatureMap& img, int dy, int dx, bool flip) {
  const Shape3 s = img.shape();
  FeatureMap out(s);
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      const int sy = std::clamp(y - dy, 0, s.height - 1);
      for (int x = 0; x < s.width; ++x) {
        int sx = std::clamp(x - dx, 0, s.width - 1);
        if (flip) sx = s.width - 1 - sx;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

// Softmax cross-entropy; writes dL/dlogits and returns the loss.
double cross_entropy(const std::vector<double>& logits, int label, std::vector<double>& grad) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  grad.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    grad[k] = std::exp(logits[k] - mx);
    z += grad[k];
  }
  for (auto& g : grad) g /= z;
  const double loss = -std::log(std::max(grad[static_cast<std::size_t>(label)], 1e-300));
  grad[static_cast<std::size_t>(label)] -= 1.0;
  return loss;
}

std::vector<double> flatten(const NetworkParams& p) {
  std::vector<double> flat;
  p.for_each([&](const std::string&, const std::vector<double>& v) {
    flat.insert(flat.end(), v.begin(), v.end());
  });
  return flat;
}

void unflatten(NetworkParams& p, const std::vector<double>& flat) {
  std::size_t off = 0;
  p.for_each([&](const std::string&, std::vector<double>& v) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()), v.begin());
    off += v.size();
  });
}

std::vector<bool> decay_mask(const NetworkParams& p) {
  std::vector<bool> mask;
  p.for_each([&](const std::string& name, const std::vector<double>& v) {
    const bool is_weight = name.size() >= 6 && name.compare(name.size() - 6, 6, "weight") == 0;
    mask.insert(mask.end(), v.size(), is_weight);
  });
  return mask;
}

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

json config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},
          {"shift_augment", c.shift_augment},
          {"flip_augment", c.flip_augment}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs");
  c.learning_rate = j.at("learning_rate");
  c.batch_size = j.at("batch_size");
  c.weight_decay = j.at("weight_decay");
  c.shift_augment = j.at("shift_augment");
  c.flip_augment = j.at("flip_augment");
  return c;
}

}  // namespace

double accuracy(const Model& model, const Dataset& data) {
  if (data.empty()) throw ValidationError("accuracy on an empty dataset");
  long correct = 0;
  const auto n = static_cast<std::ptrdiff_t>(data.size());
#pragma omp parallel for reduction(+ : correct) schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const ForwardTrace t = model.trace(data.image(static_cast<std::size_t>(i)));
    if (argmax(t.logits) == data.label(static_cast<std::size_t>(i))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Checkpoint train_desk_model(const ModelSpec& spec, const DatasetSplits& data,
                            const std::string& dataset_spec, const TrainConfig& config,
                            std::uint64_t seed, const ProgressFn& progress) {
  if (data.train.empty()) throw ValidationError("training dataset is empty");
  if (data.train.class_count() < 2) throw ValidationError("training needs at least two classes");
  if (data.train.class_count() != spec.class_count) {
    throw ValidationError("dataset has " + std::to_string(data.train.class_count()) +
                          " classes but the model expects " + std::to_string(spec.class_count));
  }
  if (data.train.geometry() != spec.input) {
    throw ValidationError("dataset geometry does not match model input");
  }
  if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0)) {
    throw ValidationError("training config needs epochs >= 1, batch_size >= 1, learning_rate > 0");
  }

  Model model = Model::initialize(spec, seed);
  std::vector<double> flat = flatten(model.params());
  const std::vector<bool> decay = decay_mask(model.params());
  Adam adam(flat.size(), {config.learning_rate});

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  const int threads = omp_get_max_threads();
  const std::size_t batches_per_epoch =
      (order.size() + static_cast<std::size_t>(config.batch_size) - 1) / config.batch_size;
  const double total_steps = static_cast<double>(batches_per_epoch) * config.epochs;
  long step = 0;
  double last_epoch_acc = 0.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    long epoch_correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const auto bsz = static_cast<std::ptrdiff_t>(end - start);

      // Per-sample augmentation draws happen serially to keep the RNG stream fixed.
      std::uniform_int_distribution<int> shift(-config.shift_augment, config.shift_augment);
      std::vector<std::array<int, 3>> aug(static_cast<std::size_t>(bsz));
      for (auto& a : aug) {
        a = {shift(rng), shift(rng), config.flip_augment ? static_cast<int>(rng() & 1U) : 0};
      }

      std::vector<NetworkParams> thread_grads(static_cast<std::size_t>(threads),
                                              model.params().zeros_like());
      std::vector<double> thread_loss(static_cast<std::size_t>(threads), 0.0);
      std::vector<long> thread_correct(static_cast<std::size_t>(threads), 0);
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t b = 0; b < bsz; ++b) {
        const int tid = omp_get_thread_num();
        const std::size_t idx = order[start + static_cast<std::size_t>(b)];
        const auto& a = aug[static_cast<std::size_t>(b)];
        const FeatureMap img = augment(data.train.image(idx), a[0], a[1], a[2] != 0);
        const ForwardTrace t = model.trace(img);
        BackwardSeeds seeds;
        const int label = data.train.label(idx);
        thread_loss[tid] += cross_entropy(t.logits, label, seeds.logits);
        if (argmax(t.logits) == label) ++thread_correct[tid];
        model.backward(t, seeds, ReluBackward::standard, &thread_grads[tid]);
      }

      std::vector<double> grad = flatten(thread_grads[0]);
      for (int tid = 1; tid < threads; ++tid) {
        const std::vector<double> g = flatten(thread_grads[tid]);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
      }
      for (auto& g : grad) g /= static_cast<double>(bsz);
      for (int tid = 0; tid < threads; ++tid) {
        epoch_loss += thread_loss[tid];
        epoch_correct += thread_correct[tid];
      }

      const double lr = config.learning_rate * 0.5 *
                        (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
      adam.set_learning_rate(lr);
      adam.step(flat, grad);
      for (std::size_t i = 0; i < flat.size(); ++i) {
        if (decay[i]) flat[i] -= lr * config.weight_decay * flat[i];
      }
      unflatten(model.mutable_params(), flat);
      ++step;
    }
    last_epoch_acc = static_cast<double>(epoch_correct) / static_cast<double>(order.size());
    if (progress) {
      progress(epoch + 1, epoch_loss / static_cast<double>(order.size()), last_epoch_acc);
    }
  }

  Checkpoint ckpt{std::move(model), {}};
  ckpt.meta.dataset = dataset_spec;
  ckpt.meta.seed = seed;
  ckpt.meta.config = config;
  ckpt.meta.train_accuracy = accuracy(ckpt.model, data.train);
  ckpt.meta.test_accuracy = data.test.empty() ? 0.0 : accuracy(ckpt.model, data.test);
  const double chance = 1.0 / spec.class_count;
  // Twice chance is unreachable-or-trivial with few classes; cap it halfway to 1.
  const double floor = std::min(2.0 * chance, 0.5 * (1.0 + chance));
  if (ckpt.meta.train_accuracy < floor) {
    ckpt.meta.warning = "training did not converge: train accuracy " +
                        std::to_string(ckpt.meta.train_accuracy) + " < " + std::to_string(floor);
  }
  ckpt.meta.weights_hash = ckpt.model.weights_hash();
  return ckpt;
}

json spec_to_json(const ModelSpec& spec) {
  json blocks = json::array();
  for (const auto& b : spec.blocks) {
    blocks.push_back({{"id", b.id},
                      {"kind", b.kind == BlockKind::residual ? "residual" : "plain"},
                      {"in_channels", b.in_channels},
                      {"out_channels", b.out_channels},
                      {"stride", b.stride}});
  }
  return {{"architecture", spec.architecture},
          {"input", {spec.input.channels, spec.input.height, spec.input.width}},
          {"class_count", spec.class_count},
          {"normalization", {{"mean", spec.normalization.mean}, {"std", spec.normalization.std}}},
          {"blocks", blocks},
          {"activation", spec.activation == Activation::relu ? "relu" : "identity"},
          {"use_bias", spec.use_bias}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.architecture = j.at("architecture");
  const auto& in = j.at("input");
  spec.input = {in.at(0), in.at(1), in.at(2)};
  spec.class_count = j.at("class_count");
  spec.normalization.mean = j.at("normalization").at("mean").get<std::vector<double>>();
  spec.normalization.std = j.at("normalization").at("std").get<std::vector<double>>();
  for (const auto& b : j.at("blocks")) {
    spec.blocks.push_back({b.at("id"),
                           b.at("kind") == "residual" ? BlockKind::residual : BlockKind::plain,
                           b.at("in_channels"), b.at("out_channels"), b.at("stride")});
  }
  spec.activation = j.at("activation") == "relu" ? Activation::relu : Activation::identity;
  spec.use_bias = j.at("use_bias");
  spec.validate();
  return spec;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  ArrayArchive archive;
  ckpt.model.params().for_each([&](const std::string& name, const std::vector<double>& v) {
    archive[name] = {{static_cast<std::int64_t>(v.size())}, v};
  });
  write_archive(dir / "weights.varc", archive);

  json taps = json::array();
  for (const auto& t : ckpt.model.taps()) {
    taps.push_back({{"layer_id", t.layer_id},
                    {"channel_count", t.channel_count},
                    {"spatial_size", t.spatial_size}});
  }
  json meta = {{"spec", spec_to_json(ckpt.model.spec())},
               {"taps", taps},
               {"dataset", ckpt.meta.dataset},
               {"seed", ckpt.meta.seed},
               {"train_accuracy", ckpt.meta.train_accuracy},
               {"test_accuracy", ckpt.meta.test_accuracy},
               {"config", config_to_json(ckpt.meta.config)},
               {"weights_hash", ckpt.model.weights_hash()}};
  if (ckpt.meta.warning) meta["warning"] = *ckpt.meta.warning;
  write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "weights.varc") || !fs::exists(dir / "meta.json")) {
    throw MissingInputError("no checkpoint at " + dir.string());
  }
  const json meta = json::parse(read_file(dir / "meta.json"));
  ModelSpec spec = spec_from_json(meta.at("spec"));
  const ArrayArchive archive = read_archive(dir / "weights.varc");

  Model shape_only = Model::initialize(spec, 0);
  NetworkParams params = shape_only.params();
  params.for_each([&](const std::string& name, std::vector<double>& v) {
    auto it = archive.find(name);
    if (it == archive.end()) throw IoError("checkpoint is missing array '" + name + "'");
    if (it->second.data.size() != v.size()) {
      throw IoError("checkpoint array '" + name + "' has the wrong size");
    }
    v = it->second.data;
  });

  Checkpoint ckpt{Model(std::move(spec), std::move(params)), {}};
  ckpt.meta.dataset = meta.value("dataset", "");
  ckpt.meta.seed = meta.value("seed", std::uint64_t{0});
  ckpt.meta.train_accuracy = meta.value("train_accuracy", 0.0);
  ckpt.meta.test_accuracy = meta.value("test_accuracy", 0.0);
  if (meta.contains("config")) ckpt.meta.config = config_from_json(meta.at("config"));
  if (meta.contains("warning")) ckpt.meta.warning = meta.at("warning").get<std::string>();
  ckpt.meta.weights_hash = ckpt.model.weights_hash();
  if (meta.contains("weights_hash") && meta.at("weights_hash") != ckpt.meta.weights_hash) {
    throw IoError("checkpoint weights do not match the recorded hash in " + dir.string());
  }
  return ckpt;
}

}  // namespace vital
