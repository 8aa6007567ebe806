// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

#include "json.hpp"
#include "vital/archive.hpp"
#include "vital/pipeline.hpp"

using nlohmann::json;

namespace {

template <typename T>
void flag(CLI::App* app, json& flags, const std::string& names, const char* key,
          const std::string& help) {
  app->add_option_function<T>(names, [&flags, key](const T& v) { flags[key] = v; }, help);
}

void common_flags(CLI::App* app, json& flags) {
  flag<std::string>(app, flags, "--checkpoint", "checkpoint", "model checkpoint directory");
  flag<std::string>(app, flags, "--dataset", "dataset", "dataset name");
  flag<std::string>(app, flags, "--data-root", "data_root", "dataset root (env VITAL_DATA_ROOT)");
  flag<std::string>(app, flags, "--cache-dir", "cache_dir", "reference cache root (env VITAL_CACHE_DIR)");
  flag<std::string>(app, flags, "-o,--output", "output", "output directory");
  flag<int>(app, flags, "--threads", "threads", "OpenMP threads (0 keeps the runtime default)");
  app->add_flag_callback("--resume", [&flags] { flags["resume"] = true; },
                         "skip targets whose outputs already exist");
}

void synthesis_flags(CLI::App* app, json& flags) {
  flag<std::vector<std::uint64_t>>(app, flags, "--seeds", "seeds", "synthesis seeds");
  flag<int>(app, flags, "--steps", "steps", "optimization steps");
  flag<double>(app, flags, "--lr", "learning_rate", "Adam learning rate");
  flag<double>(app, flags, "--alpha-tv", "alpha_tv", "total-variation weight");
  flag<double>(app, flags, "--alpha-l2", "alpha_l2", "l2 weight");
  flag<int>(app, flags, "--jitter", "jitter", "jitter amplitude in pixels");
  flag<std::string>(app, flags, "--plan", "plan", "auto, all, first-last, or shallower");
  flag<std::string>(app, flags, "--relevance", "relevance", "none, lrp, or guided");
  flag<std::size_t>(app, flags, "--references", "references", "class reference count");
  flag<std::size_t>(app, flags, "--patches", "patches", "patch reference count");
  flag<int>(app, flags, "--patch-size", "patch_size", "patch side in source pixels");
  flag<int>(app, flags, "--patch-stride", "patch_stride", "patch stride (0: half the patch)");
  flag<std::size_t>(app, flags, "--candidate-limit", "candidate_limit", "images scanned for patches");
  flag<std::size_t>(app, flags, "--corruption", "corruption", "references replaced by foreign images");
  flag<std::uint64_t>(app, flags, "--reference-seed", "reference_seed", "reference selection seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature visualization by matching sorted reference activations"};
  app.require_subcommand(1);
  std::string config_path;
  std::string log_level = "info";
  app.add_option("-c,--config", config_path, "JSON config file; flags override it")
      ->check(CLI::ExistingFile);
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");
  json flags = json::object();

  auto* train = app.add_subcommand("train", "train a desk model");
  common_flags(train, flags);
  flag<std::string>(train, flags, "--architecture", "architecture", "resnet or plain");
  flag<std::vector<int>>(train, flags, "--widths", "widths", "block widths");
  flag<int>(train, flags, "--epochs", "epochs", "training epochs");
  flag<double>(train, flags, "--lr", "train_learning_rate", "training learning rate");
  flag<int>(train, flags, "--batch-size", "batch_size", "minibatch size");
  flag<std::uint64_t>(train, flags, "--seed", "train_seed", "initialization and shuffling seed");

  auto* vclass = app.add_subcommand("visualize-class", "visualize class logits");
  common_flags(vclass, flags);
  synthesis_flags(vclass, flags);
  flag<std::vector<int>>(vclass, flags, "--classes", "classes", "class indices (default: all)");

  auto* vneuron = app.add_subcommand("visualize-neuron", "visualize intermediate channels");
  common_flags(vneuron, flags);
  synthesis_flags(vneuron, flags);
  flag<std::vector<std::string>>(vneuron, flags, "--neurons", "neurons", "layer:channel targets");

  auto* vconcept = app.add_subcommand("visualize-concept", "visualize a penultimate-layer direction");
  common_flags(vconcept, flags);
  synthesis_flags(vconcept, flags);
  flag<std::string>(vconcept, flags, "--direction", "direction_file", "direction vector file");

  auto* base = app.add_subcommand("baseline", "Fourier-parameterized activation maximization");
  common_flags(base, flags);
  flag<std::vector<std::uint64_t>>(base, flags, "--seeds", "seeds", "synthesis seeds");
  flag<std::vector<int>>(base, flags, "--classes", "classes", "class indices");
  flag<std::vector<std::string>>(base, flags, "--neurons", "neurons", "layer:channel targets");
  flag<int>(base, flags, "--steps", "baseline_steps", "optimization steps");
  flag<double>(base, flags, "--lr", "baseline_learning_rate", "Adam learning rate");
  flag<int>(base, flags, "--jitter", "jitter", "jitter amplitude in pixels");

  auto* eval = app.add_subcommand("evaluate", "score stored visualizations");
  common_flags(eval, flags);
  flag<std::string>(eval, flags, "--judge", "judge", "independent judge checkpoint");
  flag<std::vector<std::string>>(eval, flags, "--methods", "methods", "method directories to score");
  flag<std::size_t>(eval, flags, "--control-count", "control_count", "natural control images per neuron");

  auto* sweep = app.add_subcommand("sweep", "visualize and evaluate along one axis");
  common_flags(sweep, flags);
  synthesis_flags(sweep, flags);
  flag<std::string>(sweep, flags, "--judge", "judge", "independent judge checkpoint");
  flag<std::vector<int>>(sweep, flags, "--classes", "classes", "class indices (default: all)");
  flag<std::string>(sweep, flags, "--axis", "axis", "reference-size or corruption");
  flag<std::vector<int>>(sweep, flags, "--values", "axis_values", "axis values");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%^%l%$] %v");

  json env = json::object();
  if (const char* d = std::getenv("VITAL_DATA_ROOT")) env["data_root"] = d;
  if (const char* d = std::getenv("VITAL_CACHE_DIR")) env["cache_dir"] = d;

  vital::RunConfig config;
  try {
    json file = json::object();
    if (!config_path.empty()) file = json::parse(vital::read_file(config_path));
    // defaults < environment < file < flags
    json base_layer = env;
    if (file.is_object()) base_layer.merge_patch(file);
    flags["command"] = app.get_subcommands().front()->get_name();
    config = vital::RunConfig::layered(base_layer, flags);
  } catch (const std::exception& e) {
    spdlog::error("invalid configuration: {}", e.what());
    return 2;
  }
  return vital::run_command(config);
}
