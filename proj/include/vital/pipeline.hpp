// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "vital/attribution.hpp"
#include "vital/baseline.hpp"
#include "vital/dataset.hpp"
#include "vital/evaluation.hpp"
#include "vital/reference.hpp"
#include "vital/synthesis.hpp"
#include "vital/train.hpp"

namespace vital {

/// Every knob of every command. Keys of the JSON form match the field names.
struct RunConfig {
  std::string command;
  std::filesystem::path checkpoint;
  std::filesystem::path judge;
  std::string dataset = "shapes10";
  std::filesystem::path data_root = "data";
  std::filesystem::path cache_dir = "cache";
  std::filesystem::path output = "out";

  std::vector<int> classes;             // empty with no neurons: every class
  std::vector<std::string> neurons;     // "layer:channel"
  std::filesystem::path direction_file;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  int steps = 512;
  double learning_rate = 0.02;
  std::optional<double> alpha_tv;       // default depends on the target kind
  std::optional<double> alpha_l2;
  int jitter = 4;
  std::string plan = "auto";            // auto | all | first-last | shallower
  std::optional<std::string> relevance; // none | lrp | guided

  std::size_t references = 50;
  std::size_t patches = 50;
  int patch_size = 16;
  int patch_stride = 0;
  std::size_t candidate_limit = 1000;
  std::size_t corruption = 0;
  std::uint64_t reference_seed = 0;

  int baseline_steps = 512;
  double baseline_learning_rate = 0.05;

  std::vector<std::string> methods{"vital", "fourier-am"};
  std::size_t control_count = 50;

  std::string axis;                     // reference-size | corruption
  std::vector<int> axis_values;

  std::string architecture = "resnet";
  std::vector<int> widths{8, 16, 32, 32};
  int epochs = 10;
  double train_learning_rate = 2e-3;
  int batch_size = 64;
  std::uint64_t train_seed = 1;

  bool resume = false;
  int threads = 0;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  /// defaults <- file <- flags (RFC 7386 merge patches, later wins).
  static RunConfig layered(const nlohmann::json& file, const nlohmann::json& flags);
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// "vital", "vital-lrp", "vital-guided".
std::string method_tag(RelevanceMode mode);

struct RunOutcome {
  std::string method;
  AttributionTarget target;
  std::uint64_t seed = 0;
  std::filesystem::path image;
  std::filesystem::path manifest;
  bool skipped = false;
  bool cache_hit = false;
  std::string fingerprint;
  std::optional<std::string> error;
};

/// One visualization as read back from disk.
struct StoredVisualization {
  nlohmann::json manifest;
  FeatureMap image;
  std::vector<double> alpha;
  std::filesystem::path manifest_path;
};

std::vector<StoredVisualization> load_visualizations(const std::filesystem::path& method_dir);

/// Reads a direction as a JSON array or as whitespace/comma separated numbers.
std::vector<double> read_direction(const std::filesystem::path& path);

class Pipeline {
 public:
  explicit Pipeline(RunConfig config);

  const RunConfig& config() const { return config_; }
  const DatasetSplits& data();
  const Checkpoint& model();
  const Checkpoint* judge();

  std::vector<AttributionTarget> class_targets();
  std::vector<AttributionTarget> neuron_targets();

  /// Plan, relevance, and regulariser defaults resolved for one target.
  MatchPlan plan_for(const AttributionTarget& target);
  RelevanceMode relevance_for(const AttributionTarget& target) const;
  SynthesisConfig synthesis_config(const AttributionTarget& target, std::uint64_t seed);
  ReferenceSet reference_set(const AttributionTarget& target);

  std::vector<RunOutcome> visualize(const std::vector<AttributionTarget>& targets);
  std::vector<RunOutcome> visualize_class();
  std::vector<RunOutcome> visualize_neuron();
  std::vector<RunOutcome> visualize_concept();
  std::vector<RunOutcome> baseline();
  std::vector<EvalReport> evaluate();
  nlohmann::json sweep();
  Checkpoint train();

  std::size_t cache_hits() const { return cache_hits_; }
  std::size_t cache_misses() const { return cache_misses_; }

 private:
  RunOutcome run_one(const std::string& method, const AttributionTarget& target,
                     std::uint64_t seed);
  EvalReport evaluate_method(const std::string& method,
                             const std::vector<StoredVisualization>& items);

  RunConfig config_;
  std::unique_ptr<DatasetSplits> data_;
  std::unique_ptr<Checkpoint> model_;
  std::unique_ptr<Checkpoint> judge_;
  std::size_t cache_hits_ = 0;
  std::size_t cache_misses_ = 0;
};

/// Runs `config.command`; returns the process exit status (0 success, 1 a
/// run failed, 2 invalid configuration).
int run_command(const RunConfig& config);

}  // namespace vital
