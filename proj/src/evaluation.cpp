// SPDX-License-Identifier: Apache-2.0
#include "vital/evaluation.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vital/archive.hpp"
#include "vital/errors.hpp"

namespace vital {

using nlohmann::json;

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double mean_of(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mu) {
  const Eigen::MatrixXd centered = x.rowwise() - mu;
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double ClassificationReport::top1() const {
  return count == 0 ? 0.0 : static_cast<double>(top1_hits) / static_cast<double>(count);
}

double ClassificationReport::top5() const {
  return count == 0 ? 0.0 : static_cast<double>(top5_hits) / static_cast<double>(count);
}

json ClassificationReport::to_json() const {
  json recs = json::array();
  for (const auto& r : records) {
    recs.push_back({{"image_id", r.image_id},
                    {"label", r.label},
                    {"predicted", r.predicted},
                    {"top1", r.top1},
                    {"top5", r.top5}});
  }
  return {{"count", count},
          {"top1_hits", top1_hits},
          {"top5_hits", top5_hits},
          {"top1", top1()},
          {"top5", top5()},
          {"records", recs}};
}

bool in_top_k(std::span<const double> logits, int label, int k) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ValidationError("label " + std::to_string(label) + " is outside the logit range");
  }
  if (k < 1) throw ValidationError("k must be at least 1");
  const double ref = logits[static_cast<std::size_t>(label)];
  int ahead = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > ref || (logits[j] == ref && static_cast<int>(j) < label)) ++ahead;
  }
  return ahead < k;
}

ClassificationReport classify_visualizations(const Model& model, std::span<const FeatureMap> images,
                                             std::span<const int> labels,
                                             std::span<const std::string> ids) {
  if (images.empty()) throw ValidationError("classification needs at least one image");
  if (images.size() != labels.size()) throw ValidationError("image and label counts differ");
  if (!ids.empty() && ids.size() != images.size()) throw ValidationError("image and id counts differ");
  for (int l : labels) {
    if (l < 0 || l >= model.class_count()) throw ValidationError("label out of range");
  }
  ClassificationReport rep;
  rep.count = images.size();
  rep.records.resize(images.size());
  const auto n = static_cast<std::ptrdiff_t>(images.size());
  std::vector<std::string> errors(images.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    try {
      const ForwardTrace t = model.trace(images[u]);
      ClassificationRecord& r = rep.records[u];
      r.image_id = ids.empty() ? std::to_string(u) : ids[u];
      r.label = labels[u];
      r.predicted = static_cast<int>(std::max_element(t.logits.begin(), t.logits.end()) -
                                     t.logits.begin());
      r.top1 = r.predicted == r.label;
      r.top5 = in_top_k(t.logits, r.label, 5);
    } catch (const std::exception& e) {
      errors[u] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw ValidationError(e);
  }
  for (const auto& r : rep.records) {
    rep.top1_hits += r.top1 ? 1 : 0;
    rep.top5_hits += r.top5 ? 1 : 0;
  }
  return rep;
}

double fid_score(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double epsilon) {
  if (a.rows() < 2 || b.rows() < 2) throw ValidationError("FID needs at least two samples per set");
  if (a.cols() != b.cols()) throw ValidationError("FID embedding widths differ");
  if (!a.allFinite() || !b.allFinite()) throw ValidationError("FID embeddings are not finite");
  const Eigen::RowVectorXd mu_a = a.colwise().mean();
  const Eigen::RowVectorXd mu_b = b.colwise().mean();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(a.cols(), a.cols());
  const Eigen::MatrixXd sa = covariance(a, mu_a) + epsilon * eye;
  const Eigen::MatrixXd sb = covariance(b, mu_b) + epsilon * eye;
  // tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), and the inner matrix is
  // symmetric PSD.
  const Eigen::MatrixXd ra = psd_sqrt(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fid = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(fid, 0.0);
}

ClassificationReport cross_model_zeroshot(const Model& judge, const std::string& target_hash,
                                          std::span<const FeatureMap> images,
                                          std::span<const int> labels,
                                          std::span<const std::string> ids) {
  if (judge.weights_hash() == target_hash) {
    throw ConfigError("the judge model is the target model; use an independently trained judge");
  }
  return classify_visualizations(judge, images, labels, ids);
}

AucMad auc_mad(std::span<const double> synthetic, std::span<const double> control) {
  if (synthetic.empty() || control.empty()) throw ValidationError("AUC/MAD needs two nonempty sets");
  for (double v : synthetic) {
    if (!std::isfinite(v)) throw ValidationError("synthetic score is not finite");
  }
  for (double v : control) {
    if (!std::isfinite(v)) throw ValidationError("control score is not finite");
  }
  // Rank-sum form of the Mann-Whitney statistic with midranks for ties.
  std::vector<std::pair<double, int>> all;
  for (double v : synthetic) all.emplace_back(v, 0);
  for (double v : control) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end());
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second == 0) rank_sum += mid;
    }
    i = j;
  }
  const double n = static_cast<double>(synthetic.size());
  const double m = static_cast<double>(control.size());
  AucMad out;
  out.auc = (rank_sum - n * (n + 1.0) / 2.0) / (n * m);
  out.mad = mean_of(synthetic) - mean_of(control);
  return out;
}

std::vector<double> channel_scores(const Model& model, const std::string& layer_id, int channel,
                                   std::span<const FeatureMap> images) {
  const LayerTap& tap = model.tap(layer_id);
  if (channel < 0 || channel >= tap.channel_count) throw ValidationError("channel out of range");
  const std::size_t depth = model.tap_index(layer_id) + 1;
  std::vector<double> out(images.size());
  const auto n = static_cast<std::ptrdiff_t>(images.size());
  std::vector<std::string> errors(images.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    try {
      const ForwardTrace t = model.trace_until(images[u], depth);
      const auto row = t.blocks.back().output.channel(channel);
      double acc = 0.0;
      for (double v : row) acc += v;
      out[u] = acc / static_cast<double>(row.size());
    } catch (const std::exception& e) {
      errors[u] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw ValidationError(e);
  }
  return out;
}

AucMad auc_mad(const Model& model, const std::string& layer_id, int channel,
               std::span<const FeatureMap> synthetic, std::span<const FeatureMap> control) {
  if (synthetic.empty() || control.empty()) throw ValidationError("AUC/MAD needs two nonempty sets");
  const auto s = channel_scores(model, layer_id, channel, synthetic);
  const auto c = channel_scores(model, layer_id, channel, control);
  return auc_mad(s, c);
}

void export_embeddings(const Model& model, std::span<const FeatureMap> images,
                       std::span<const int> labels, std::span<const std::string> ids,
                       const std::string& method, const std::filesystem::path& path) {
  if (images.empty()) throw ValidationError("embedding export needs at least one image");
  if (labels.size() != images.size() || ids.size() != images.size()) {
    throw ValidationError("embedding export: images, labels, and ids differ in count");
  }
  const Eigen::MatrixXd e = penultimate_embedding(model, images);
  std::ostringstream os;
  os << "image_id,label,method";
  for (Eigen::Index j = 0; j < e.cols(); ++j) os << ",e_" << (j + 1);
  os << "\n";
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    os << ids[static_cast<std::size_t>(i)] << "," << labels[static_cast<std::size_t>(i)] << ","
       << method;
    for (Eigen::Index j = 0; j < e.cols(); ++j) os << "," << format_double(e(i, j));
    os << "\n";
  }
  try {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, os.str());
  } catch (const std::filesystem::filesystem_error& err) {
    throw IoError(std::string("cannot write embeddings: ") + err.what());
  }
}

json EvalReport::to_json() const {
  json j{{"method", method},
         {"checkpoint_hash", checkpoint_hash},
         {"classification", classification.count ? classification.to_json() : json("not-applicable")},
         {"fid", fid ? json(*fid) : json("not-applicable")},
         {"fid_judge", fid_judge ? json(*fid_judge) : json("not-applicable")},
         {"zeroshot", zeroshot ? zeroshot->to_json() : json("not-applicable")},
         {"manifests", manifests}};
  json rows = json::array();
  for (const auto& n : neurons) {
    rows.push_back({{"layer", n.layer_id}, {"channel", n.channel}, {"auc", n.value.auc}, {"mad", n.value.mad}});
  }
  j["neurons"] = neurons.empty() ? json("not-applicable") : rows;
  return j;
}

std::string EvalReport::csv_header() {
  return "method,checkpoint,count,top1,top5,fid,fid_judge,zeroshot_top1,zeroshot_top5,"
         "neurons,mean_auc,mean_mad";
}

std::string EvalReport::csv_row() const {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : "NA"; };
  std::ostringstream os;
  const bool cls = classification.count > 0;
  os << method << "," << checkpoint_hash.substr(0, 16) << "," << classification.count << ","
     << (cls ? format_double(classification.top1()) : "NA") << ","
     << (cls ? format_double(classification.top5()) : "NA") << ","
     << opt(fid) << "," << opt(fid_judge) << ","
     << (zeroshot ? format_double(zeroshot->top1()) : "NA") << ","
     << (zeroshot ? format_double(zeroshot->top5()) : "NA") << "," << neurons.size() << ",";
  if (neurons.empty()) {
    os << "NA,NA";
  } else {
    double auc = 0.0, mad = 0.0;
    for (const auto& n : neurons) {
      auc += n.value.auc;
      mad += n.value.mad;
    }
    os << format_double(auc / neurons.size()) << "," << format_double(mad / neurons.size());
  }
  return os.str();
}

}  // namespace vital
