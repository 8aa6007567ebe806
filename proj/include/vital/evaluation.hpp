// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vital/model.hpp"

namespace vital {

struct ClassificationRecord {
  std::string image_id;
  int label = -1;
  int predicted = -1;
  bool top1 = false;
  bool top5 = false;
};

/// Hit counts are kept as integers; rates are derived on demand.
struct ClassificationReport {
  std::size_t count = 0;
  std::size_t top1_hits = 0;
  std::size_t top5_hits = 0;
  std::vector<ClassificationRecord> records;

  double top1() const;
  double top5() const;
  nlohmann::json to_json() const;
};

/// True when `label` is among the k largest logits; ties rank the lower
/// class index first.
bool in_top_k(std::span<const double> logits, int label, int k);

ClassificationReport classify_visualizations(const Model& model, std::span<const FeatureMap> images,
                                             std::span<const int> labels,
                                             std::span<const std::string> ids = {});

/// Frechet distance between Gaussian fits of two row-sample sets, with
/// `epsilon * I` added to both covariances.
double fid_score(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double epsilon = 1e-6);

/// classify_visualizations under an independent judge. Throws ConfigError when
/// the judge's weights hash equals `target_hash`.
ClassificationReport cross_model_zeroshot(const Model& judge, const std::string& target_hash,
                                          std::span<const FeatureMap> images,
                                          std::span<const int> labels,
                                          std::span<const std::string> ids = {});

struct AucMad {
  double auc = 0.5;
  double mad = 0.0;
};

/// Mann-Whitney AUC (ties count half) and mean difference of two score sets.
AucMad auc_mad(std::span<const double> synthetic, std::span<const double> control);
/// GAP of the channel's activation for each image.
std::vector<double> channel_scores(const Model& model, const std::string& layer_id, int channel,
                                   std::span<const FeatureMap> images);
AucMad auc_mad(const Model& model, const std::string& layer_id, int channel,
               std::span<const FeatureMap> synthetic, std::span<const FeatureMap> control);

/// CSV with header `image_id,label,method,e_1..e_d` and one row per image.
void export_embeddings(const Model& model, std::span<const FeatureMap> images,
                       std::span<const int> labels, std::span<const std::string> ids,
                       const std::string& method, const std::filesystem::path& path);

struct NeuronScore {
  std::string layer_id;
  int channel = -1;
  AucMad value;
};

struct EvalReport {
  std::string method;
  std::string checkpoint_hash;
  ClassificationReport classification;
  std::optional<double> fid;
  std::optional<double> fid_judge;
  std::optional<ClassificationReport> zeroshot;
  std::vector<NeuronScore> neurons;
  std::vector<std::string> manifests;

  nlohmann::json to_json() const;
  static std::string csv_header();
  /// Absent metrics are written as `NA`.
  std::string csv_row() const;
};

}  // namespace vital
