// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "json.hpp"

#include "vital/dataset.hpp"
#include "vital/model.hpp"

namespace vital {

struct TrainConfig {
  int epochs = 12;
  double learning_rate = 2e-3;
  int batch_size = 64;
  double weight_decay = 5e-4;
  int shift_augment = 2;      // max pixels of random translation
  bool flip_augment = true;   // random horizontal flips
};

struct CheckpointMeta {
  std::string dataset;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<std::string> warning;
  TrainConfig config;
  std::string weights_hash;
};

struct Checkpoint {
  Model model;
  CheckpointMeta meta;
};

using ProgressFn = std::function<void(int epoch, double loss, double train_acc)>;

/// Trains `spec` on the train split with Adam, cosine learning-rate decay,
/// decoupled weight decay, and shift/flip augmentation; held-out accuracy is
/// measured on the test split. Deterministic for a fixed OpenMP thread count.
Checkpoint train_desk_model(const ModelSpec& spec, const DatasetSplits& data,
                            const std::string& dataset_spec, const TrainConfig& config,
                            std::uint64_t seed, const ProgressFn& progress = {});

/// Top-1 accuracy of `model` on `data`.
double accuracy(const Model& model, const Dataset& data);

/// Directory with `weights.varc` (named arrays) and `meta.json`.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

}  // namespace vital
