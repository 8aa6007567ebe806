// SPDX-License-Identifier: Apache-2.0
#include "vital/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "vital/archive.hpp"
#include "vital/hash.hpp"
#include "vital/image.hpp"

namespace vital {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kNeuronRegularizer = 3e-6;
constexpr double kFirstLayerNeuronWeight = 0.1;
constexpr const char* kBaselineMethod = "fourier-am";

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trace_csv(const std::vector<LossBreakdown>& trace) {
  std::ostringstream os;
  os << "step,total";
  if (!trace.empty()) {
    for (const auto& [id, v] : trace.front().sm) os << ",sm:" << id;
  }
  os << ",tv,l2\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    os << i << "," << fmt17(trace[i].total);
    for (const auto& [id, v] : trace[i].sm) os << "," << fmt17(v);
    os << "," << fmt17(trace[i].tv) << "," << fmt17(trace[i].l2) << "\n";
  }
  return os.str();
}

std::pair<std::string, int> parse_neuron(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw ConfigError("neurons: expected 'layer:channel', got '" + s + "'");
  }
  try {
    std::size_t used = 0;
    const int ch = std::stoi(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
    return {s.substr(0, colon), ch};
  } catch (const std::logic_error&) {
    throw ConfigError("neurons: channel in '" + s + "' is not an integer");
  }
}

std::optional<std::size_t> basis_index(const std::vector<double>& d) {
  std::optional<std::size_t> hot;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] == 0.0) continue;
    if (d[i] != 1.0 || hot) return std::nullopt;
    hot = i;
  }
  return hot;
}

void quarantine(const fs::path& output, const fs::path& file) {
  std::error_code ec;
  if (!fs::exists(file, ec)) return;
  const fs::path rel = fs::relative(file, output, ec);
  const fs::path dst = output / "failed" / (ec ? file.filename() : rel);
  fs::create_directories(dst.parent_path(), ec);
  fs::rename(file, dst, ec);
  if (ec) fs::remove(file, ec);
}

}  // namespace

// ---------------------------------------------------------------- RunConfig

json RunConfig::to_json() const {
  json j{{"command", command},
         {"checkpoint", checkpoint.string()},
         {"judge", judge.string()},
         {"dataset", dataset},
         {"data_root", data_root.string()},
         {"cache_dir", cache_dir.string()},
         {"output", output.string()},
         {"classes", classes},
         {"neurons", neurons},
         {"direction_file", direction_file.string()},
         {"seeds", seeds},
         {"steps", steps},
         {"learning_rate", learning_rate},
         {"alpha_tv", alpha_tv ? json(*alpha_tv) : json(nullptr)},
         {"alpha_l2", alpha_l2 ? json(*alpha_l2) : json(nullptr)},
         {"jitter", jitter},
         {"plan", plan},
         {"relevance", relevance ? json(*relevance) : json(nullptr)},
         {"references", references},
         {"patches", patches},
         {"patch_size", patch_size},
         {"patch_stride", patch_stride},
         {"candidate_limit", candidate_limit},
         {"corruption", corruption},
         {"reference_seed", reference_seed},
         {"baseline_steps", baseline_steps},
         {"baseline_learning_rate", baseline_learning_rate},
         {"methods", methods},
         {"control_count", control_count},
         {"axis", axis},
         {"axis_values", axis_values},
         {"architecture", architecture},
         {"widths", widths},
         {"epochs", epochs},
         {"train_learning_rate", train_learning_rate},
         {"batch_size", batch_size},
         {"train_seed", train_seed},
         {"resume", resume},
         {"threads", threads}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  const json known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  auto get = [&j](const char* key, auto& field) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, fs::path>) {
        field = j.at(key).get<std::string>();
      } else {
        field = j.at(key).get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  };
  auto get_opt = [&j](const char* key, auto& field) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
      field = j.at(key).get<typename std::decay_t<decltype(field)>::value_type>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  };
  get("command", c.command);
  get("checkpoint", c.checkpoint);
  get("judge", c.judge);
  get("dataset", c.dataset);
  get("data_root", c.data_root);
  get("cache_dir", c.cache_dir);
  get("output", c.output);
  get("classes", c.classes);
  get("neurons", c.neurons);
  get("direction_file", c.direction_file);
  get("seeds", c.seeds);
  get("steps", c.steps);
  get("learning_rate", c.learning_rate);
  get_opt("alpha_tv", c.alpha_tv);
  get_opt("alpha_l2", c.alpha_l2);
  get("jitter", c.jitter);
  get("plan", c.plan);
  get_opt("relevance", c.relevance);
  get("references", c.references);
  get("patches", c.patches);
  get("patch_size", c.patch_size);
  get("patch_stride", c.patch_stride);
  get("candidate_limit", c.candidate_limit);
  get("corruption", c.corruption);
  get("reference_seed", c.reference_seed);
  get("baseline_steps", c.baseline_steps);
  get("baseline_learning_rate", c.baseline_learning_rate);
  get("methods", c.methods);
  get("control_count", c.control_count);
  get("axis", c.axis);
  get("axis_values", c.axis_values);
  get("architecture", c.architecture);
  get("widths", c.widths);
  get("epochs", c.epochs);
  get("train_learning_rate", c.train_learning_rate);
  get("batch_size", c.batch_size);
  get("train_seed", c.train_seed);
  get("resume", c.resume);
  get("threads", c.threads);
  return c;
}

RunConfig RunConfig::layered(const json& file, const json& flags) {
  json merged = RunConfig{}.to_json();
  if (!file.is_null() && !file.is_object()) throw ConfigError("config file must hold an object");
  if (file.is_object()) merged.merge_patch(file);
  if (flags.is_object()) merged.merge_patch(flags);
  return from_json(merged);
}

void RunConfig::validate() const {
  static const std::set<std::string> commands{"train",    "visualize-class", "visualize-neuron",
                                              "visualize-concept", "baseline", "evaluate",
                                              "sweep"};
  if (!commands.count(command)) throw ConfigError("command: unknown command '" + command + "'");
  if (command != "train") {
    if (checkpoint.empty()) throw ConfigError("checkpoint: required for '" + command + "'");
    if (!fs::exists(checkpoint / "meta.json") || !fs::exists(checkpoint / "weights.varc")) {
      throw ConfigError("checkpoint: no checkpoint at '" + checkpoint.string() + "'");
    }
  } else if (checkpoint.empty()) {
    throw ConfigError("checkpoint: output directory required for 'train'");
  }
  if (!judge.empty() && !fs::exists(judge / "meta.json")) {
    throw ConfigError("judge: no checkpoint at '" + judge.string() + "'");
  }
  if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
  if (steps < 1) throw ConfigError("steps: must be at least 1");
  if (baseline_steps < 1) throw ConfigError("baseline_steps: must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be positive");
  if (!(baseline_learning_rate > 0.0)) throw ConfigError("baseline_learning_rate: must be positive");
  if (alpha_tv && !(*alpha_tv >= 0.0)) throw ConfigError("alpha_tv: must be nonnegative");
  if (alpha_l2 && !(*alpha_l2 >= 0.0)) throw ConfigError("alpha_l2: must be nonnegative");
  if (jitter < 0) throw ConfigError("jitter: must be nonnegative");
  static const std::set<std::string> plans{"auto", "all", "first-last", "shallower"};
  if (!plans.count(plan)) throw ConfigError("plan: expected auto, all, first-last, or shallower");
  if (relevance) {
    try {
      relevance_mode_from_string(*relevance);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("relevance: ") + e.what());
    }
  }
  if (references < 1) throw ConfigError("references: must be at least 1");
  if (patches < 1) throw ConfigError("patches: must be at least 1");
  if (patch_size < 1) throw ConfigError("patch_size: must be at least 1");
  if (corruption > references) throw ConfigError("corruption: exceeds the reference count");
  for (const auto& n : neurons) parse_neuron(n);
  if (command == "visualize-concept") {
    if (direction_file.empty()) throw ConfigError("direction_file: required for concepts");
    if (!fs::exists(direction_file)) {
      throw ConfigError("direction_file: '" + direction_file.string() + "' does not exist");
    }
  }
  if (command == "visualize-neuron" && neurons.empty()) {
    throw ConfigError("neurons: at least one 'layer:channel' required");
  }
  if (command == "sweep") {
    if (axis != "reference-size" && axis != "corruption") {
      throw ConfigError("axis: expected reference-size or corruption");
    }
    if (axis_values.empty()) throw ConfigError("axis_values: at least one value required");
    for (int v : axis_values) {
      if (v < 0 || (axis == "reference-size" && v < 1)) {
        throw ConfigError("axis_values: " + std::to_string(v) + " is out of range");
      }
    }
  }
  if (command == "evaluate" && methods.empty()) throw ConfigError("methods: at least one required");
  if (command == "train") {
    if (widths.empty()) throw ConfigError("widths: at least one block required");
    if (architecture != "resnet" && architecture != "plain") {
      throw ConfigError("architecture: expected resnet or plain");
    }
    if (epochs < 1) throw ConfigError("epochs: must be at least 1");
  }
  if (threads < 0) throw ConfigError("threads: must be nonnegative");
}

std::string method_tag(RelevanceMode mode) {
  return mode == RelevanceMode::none ? "vital" : "vital-" + to_string(mode);
}

std::vector<double> read_direction(const fs::path& path) {
  const std::string text = read_file(path);
  std::vector<double> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      out = json::parse(text).get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ValidationError("direction file '" + path.string() + "': " + e.what());
    }
    return out;
  }
  std::string cleaned = text;
  std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
  std::istringstream is(cleaned);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw ValidationError("direction file '" + path.string() + "' has a non-numeric entry '" +
                            tok + "'");
    }
  }
  return out;
}

std::vector<StoredVisualization> load_visualizations(const fs::path& method_dir) {
  std::vector<fs::path> manifests;
  if (fs::is_directory(method_dir)) {
    for (const auto& e : fs::recursive_directory_iterator(method_dir)) {
      const std::string name = e.path().filename().string();
      if (e.is_regular_file() && name.size() > 14 &&
          name.compare(name.size() - 14, 14, ".manifest.json") == 0) {
        manifests.push_back(e.path());
      }
    }
  }
  std::sort(manifests.begin(), manifests.end());
  std::vector<StoredVisualization> out;
  for (const auto& m : manifests) {
    StoredVisualization v;
    v.manifest_path = m;
    v.manifest = json::parse(read_file(m));
    const std::string stem = m.filename().string();
    const fs::path png = m.parent_path() / (stem.substr(0, stem.size() - 14) + ".png");
    if (!fs::exists(png)) throw MissingInputError("image for manifest '" + m.string() + "' is missing");
    v.image = read_png_rgba(png, v.alpha);
    out.push_back(std::move(v));
  }
  return out;
}

// ----------------------------------------------------------------- Pipeline

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)) {
#ifdef _OPENMP
  if (config_.threads > 0) omp_set_num_threads(config_.threads);
#endif
}

const DatasetSplits& Pipeline::data() {
  if (!data_) {
    spdlog::info("loading dataset '{}'", config_.dataset);
    data_ = std::make_unique<DatasetSplits>(load_dataset(config_.dataset, config_.data_root));
  }
  return *data_;
}

const Checkpoint& Pipeline::model() {
  if (!model_) model_ = std::make_unique<Checkpoint>(load_checkpoint(config_.checkpoint));
  return *model_;
}

const Checkpoint* Pipeline::judge() {
  if (config_.judge.empty()) return nullptr;
  if (!judge_) judge_ = std::make_unique<Checkpoint>(load_checkpoint(config_.judge));
  return judge_.get();
}

std::vector<AttributionTarget> Pipeline::class_targets() {
  std::vector<AttributionTarget> out;
  if (config_.classes.empty()) {
    for (int c = 0; c < model().model.class_count(); ++c) out.push_back(AttributionTarget::class_neuron(c));
  } else {
    for (int c : config_.classes) out.push_back(AttributionTarget::class_neuron(c));
  }
  for (const auto& t : out) t.validate(model().model);
  return out;
}

std::vector<AttributionTarget> Pipeline::neuron_targets() {
  std::vector<AttributionTarget> out;
  for (const auto& s : config_.neurons) {
    auto [layer, ch] = parse_neuron(s);
    out.push_back(AttributionTarget::intermediate_neuron(layer, ch));
    out.back().validate(model().model);
  }
  return out;
}

MatchPlan Pipeline::plan_for(const AttributionTarget& target) {
  const Model& m = model().model;
  std::string kind = config_.plan;
  if (kind == "auto") kind = target.kind == AttributionTarget::Kind::class_neuron ? "all" : "shallower";
  if (kind == "all") return MatchPlan::all_taps(m);
  if (kind == "first-last") return MatchPlan::first_last(m);
  if (target.kind == AttributionTarget::Kind::class_neuron) return MatchPlan::all_taps(m);
  const std::size_t depth = target.start_depth(m);
  if (depth == 0) {
    throw ConfigError("target '" + target.label() + "' sits in the first block; no shallower layer to match");
  }
  std::vector<std::pair<std::string, double>> entries;
  for (std::size_t i = 0; i < depth; ++i) {
    entries.emplace_back(m.taps()[i].layer_id, i == 0 && depth > 1 ? kFirstLayerNeuronWeight : 1.0);
  }
  return MatchPlan(std::move(entries));
}

RelevanceMode Pipeline::relevance_for(const AttributionTarget& target) const {
  if (config_.relevance) return relevance_mode_from_string(*config_.relevance);
  return target.kind == AttributionTarget::Kind::class_neuron ? RelevanceMode::none
                                                              : RelevanceMode::lrp;
}

SynthesisConfig Pipeline::synthesis_config(const AttributionTarget& target, std::uint64_t seed) {
  const bool is_class = target.kind == AttributionTarget::Kind::class_neuron;
  SynthesisConfig s;
  s.steps = config_.steps;
  s.learning_rate = config_.learning_rate;
  s.alpha_tv = config_.alpha_tv.value_or(is_class ? 0.0 : kNeuronRegularizer);
  s.alpha_l2 = config_.alpha_l2.value_or(is_class ? 0.0 : kNeuronRegularizer);
  s.plan = plan_for(target);
  s.jitter = config_.jitter;
  s.seed = seed;
  s.relevance = relevance_for(target);
  return s;
}

ReferenceSet Pipeline::reference_set(const AttributionTarget& target) {
  const Dataset& train = data().train;
  const Model& m = model().model;
  PatchOptions po{config_.patch_size, config_.patch_stride, config_.candidate_limit};
  ReferenceSet refs;
  switch (target.kind) {
    case AttributionTarget::Kind::class_neuron:
      refs = select_class_references(train, target.class_id, config_.references, config_.reference_seed);
      break;
    case AttributionTarget::Kind::intermediate_neuron:
      refs = select_neuron_patches(train, m, target.layer_id, target.channel, config_.patches, po,
                                   config_.reference_seed);
      break;
    case AttributionTarget::Kind::concept_direction:
      refs = select_concept_patches(train, m, target.layer_id, target.direction, config_.patches,
                                    po, config_.reference_seed);
      break;
  }
  if (config_.corruption > 0) {
    refs = corrupt_references(refs, config_.corruption, train, config_.reference_seed);
  }
  return refs;
}

RunOutcome Pipeline::run_one(const std::string& method, const AttributionTarget& target,
                             std::uint64_t seed) {
  RunOutcome out;
  out.method = method;
  out.target = target;
  out.seed = seed;
  const fs::path dir = config_.output / method / target.label();
  out.image = dir / (std::to_string(seed) + ".png");
  out.manifest = dir / (std::to_string(seed) + ".manifest.json");
  const fs::path trace_path = dir / (std::to_string(seed) + ".trace.csv");
  if (config_.resume && fs::exists(out.manifest) && fs::exists(out.image)) {
    out.skipped = true;
    spdlog::info("{} {} seed {}: already complete, skipped", method, target.label(), seed);
    return out;
  }

  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::create_directories(dir);
    const Checkpoint& ck = model();
    json manifest{{"method", method},
                  {"target", target.to_json()},
                  {"target_label", target.label()},
                  {"seed", seed},
                  {"checkpoint_hash", ck.meta.weights_hash},
                  {"dataset", config_.dataset}};
    SynthesisResult result;
    if (method == kBaselineMethod) {
      BaselineConfig bc;
      bc.steps = config_.baseline_steps;
      bc.learning_rate = config_.baseline_learning_rate;
      bc.jitter = config_.jitter;
      bc.seed = seed;
      manifest["config"] = bc.to_json();
      result = activation_max_synthesize(target, ck.model, bc);
    } else {
      const SynthesisConfig sc = synthesis_config(target, seed);
      const ReferenceSet refs = reference_set(target);
      const BuildResult built =
          build_reference_distribution(refs, data(), ck.model, sc.plan, sc.relevance, target,
                                       BuildOptions{config_.cache_dir});
      out.cache_hit = built.cache_hit;
      out.fingerprint = built.distribution.provenance.fingerprint;
      (built.cache_hit ? cache_hits_ : cache_misses_) += 1;
      manifest["config"] = sc.to_json();
      manifest["reference"] = {{"fingerprint", out.fingerprint},
                               {"count", refs.size()},
                               {"corruption", refs.corruption},
                               {"set", refs.to_json()},
                               {"fingerprint_input", built.fingerprint_input}};
      if (target.kind == AttributionTarget::Kind::concept_direction) {
        if (auto c = basis_index(target.direction)) {
          manifest["equivalent_target"] =
              AttributionTarget::intermediate_neuron(target.layer_id, static_cast<int>(*c)).to_json();
        }
      }
      result = synthesize(target, built.distribution, ck.model, sc);
    }
    manifest["final_loss"] = result.final_loss.to_json();
    manifest["initial_loss"] = result.trace.front().to_json();
    manifest["steps_run"] = result.trace.size();

    const fs::path tmp_png = dir / (std::to_string(seed) + ".png.tmp");
    write_png_rgba(tmp_png, result.image, result.transparency);
    const std::string trace_text = trace_csv(result.trace);
    manifest["image_sha256"] = sha256_file(tmp_png);
    manifest["trace_sha256"] = sha256_hex(trace_text);
    write_file_atomic(trace_path, trace_text);
    fs::rename(tmp_png, out.image);
    write_file_atomic(out.manifest, manifest.dump(2) + "\n");

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("{} {} seed {}: loss {:.6g} -> {:.6g} in {:.2f}s{}", method, target.label(), seed,
                 result.trace.front().total, result.final_loss.total, secs,
                 out.cache_hit ? " (reference cache hit)" : "");
  } catch (const std::exception& e) {
    out.error = e.what();
    spdlog::error("{} {} seed {} failed: {}", method, target.label(), seed, e.what());
    quarantine(config_.output, dir / (std::to_string(seed) + ".png.tmp"));
    quarantine(config_.output, out.image);
    quarantine(config_.output, trace_path);
    quarantine(config_.output, out.manifest);
    std::error_code ec;
    const fs::path err = config_.output / "failed" / method / target.label() /
                         (std::to_string(seed) + ".error.json");
    fs::create_directories(err.parent_path(), ec);
    json info{{"method", method}, {"target", target.to_json()}, {"seed", seed}, {"error", e.what()}};
    try {
      write_file_atomic(err, info.dump(2) + "\n");
    } catch (const std::exception&) {
    }
  }
  return out;
}

std::vector<RunOutcome> Pipeline::visualize(const std::vector<AttributionTarget>& targets) {
  std::vector<RunOutcome> out;
  for (const auto& t : targets) {
    const std::string method = method_tag(relevance_for(t));
    for (std::uint64_t s : config_.seeds) out.push_back(run_one(method, t, s));
  }
  spdlog::info("reference cache: {} hits, {} misses", cache_hits_, cache_misses_);
  return out;
}

std::vector<RunOutcome> Pipeline::visualize_class() { return visualize(class_targets()); }

std::vector<RunOutcome> Pipeline::visualize_neuron() { return visualize(neuron_targets()); }

std::vector<RunOutcome> Pipeline::visualize_concept() {
  const Model& m = model().model;
  auto dir = read_direction(config_.direction_file);
  const auto target = AttributionTarget::concept_direction(m.penultimate_tap().layer_id, std::move(dir));
  target.validate(m);
  return visualize({target});
}

std::vector<RunOutcome> Pipeline::baseline() {
  std::vector<AttributionTarget> targets = neuron_targets();
  if (targets.empty() || !config_.classes.empty()) {
    auto cls = class_targets();
    targets.insert(targets.begin(), cls.begin(), cls.end());
  }
  std::vector<RunOutcome> out;
  for (const auto& t : targets) {
    for (std::uint64_t s : config_.seeds) out.push_back(run_one(kBaselineMethod, t, s));
  }
  return out;
}

EvalReport Pipeline::evaluate_method(const std::string& method,
                                     const std::vector<StoredVisualization>& items) {
  const Checkpoint& ck = model();
  const Model& m = ck.model;
  EvalReport rep;
  rep.method = method;
  rep.checkpoint_hash = ck.meta.weights_hash;

  std::vector<FeatureMap> class_images;
  std::vector<int> class_labels;
  std::vector<std::string> class_ids;
  std::map<std::pair<std::string, int>, std::vector<FeatureMap>> neuron_images;
  for (const auto& v : items) {
    if (v.manifest.value("checkpoint_hash", std::string()) != ck.meta.weights_hash) {
      throw ConfigError("'" + v.manifest_path.string() + "' was produced by another checkpoint");
    }
    rep.manifests.push_back(fs::relative(v.manifest_path, config_.output).generic_string());
    const AttributionTarget t = AttributionTarget::from_json(v.manifest.at("target"));
    if (t.kind == AttributionTarget::Kind::class_neuron) {
      class_images.push_back(v.image);
      class_labels.push_back(t.class_id);
      class_ids.push_back(rep.manifests.back());
    } else if (t.kind == AttributionTarget::Kind::intermediate_neuron) {
      neuron_images[{t.layer_id, t.channel}].push_back(v.image);
    }
  }

  if (!class_images.empty()) {
    rep.classification = classify_visualizations(m, class_images, class_labels, class_ids);
    std::set<int> present(class_labels.begin(), class_labels.end());
    std::vector<FeatureMap> real;
    for (std::size_t i = 0; i < data().test.size(); ++i) {
      if (present.count(data().test.label(i))) real.push_back(data().test.image(i));
    }
    if (real.size() >= 2 && class_images.size() >= 2) {
      rep.fid = fid_score(penultimate_embedding(m, class_images), penultimate_embedding(m, real));
      if (const Checkpoint* j = judge()) {
        rep.fid_judge = fid_score(penultimate_embedding(j->model, class_images),
                                  penultimate_embedding(j->model, real));
      }
    }
    if (const Checkpoint* j = judge()) {
      rep.zeroshot = cross_model_zeroshot(j->model, ck.meta.weights_hash, class_images,
                                          class_labels, class_ids);
    }
  }

  for (const auto& [key, synth] : neuron_images) {
    const Shape3 geo = data().test.geometry();
    PatchOptions full{std::min(geo.height, geo.width), 0, 0};
    auto scores = score_patches(data().test, m, key.first, key.second, full, 0);
    const auto top = top_distinct_patches(std::move(scores), config_.control_count);
    std::vector<FeatureMap> control;
    for (const auto& p : top) {
      control.push_back(load_source(data(), {p.image_id, std::nullopt}, m.input_shape()));
    }
    rep.neurons.push_back({key.first, key.second, auc_mad(m, key.first, key.second, synth, control)});
  }
  return rep;
}

std::vector<EvalReport> Pipeline::evaluate() {
  std::vector<std::string> missing;
  std::map<std::string, std::vector<StoredVisualization>> loaded;
  for (const auto& method : config_.methods) {
    auto items = load_visualizations(config_.output / method);
    if (items.empty()) {
      missing.push_back((config_.output / method / "<target>/<seed>.manifest.json").string());
    } else {
      loaded.emplace(method, std::move(items));
    }
  }
  if (!missing.empty()) {
    std::string msg = "no visualization outputs for:";
    for (const auto& m : missing) msg += " " + m;
    throw MissingInputError(msg);
  }

  const fs::path reports = config_.output / "reports";
  fs::create_directories(reports);
  std::vector<EvalReport> out;
  std::string table = EvalReport::csv_header() + "\n";
  for (const auto& method : config_.methods) {
    EvalReport rep = evaluate_method(method, loaded.at(method));
    const std::string stem = method + "-" + rep.checkpoint_hash.substr(0, 16);
    write_file_atomic(reports / (stem + ".json"), rep.to_json().dump(2) + "\n");
    write_file_atomic(reports / (stem + ".csv"), EvalReport::csv_header() + "\n" + rep.csv_row() + "\n");
    table += rep.csv_row() + "\n";
    spdlog::info("{}: top1 {:.3f} fid {} zeroshot {}", method, rep.classification.top1(),
                 rep.fid ? fmt17(*rep.fid) : "NA",
                 rep.zeroshot ? fmt17(rep.zeroshot->top1()) : "NA");
    out.push_back(std::move(rep));
  }
  write_file_atomic(reports / "comparison.csv", table);
  return out;
}

json Pipeline::sweep() {
  const fs::path root = config_.output / ("sweep-" + config_.axis);
  std::vector<int> values = config_.axis_values;
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  json points = json::array();
  std::string trend = config_.axis + ",top1,top5,fid,fid_judge,zeroshot_top1,zeroshot_top5\n";
  bool failed = false;
  for (int v : values) {
    RunConfig sub = config_;
    sub.output = root / std::to_string(v);
    sub.resume = true;
    sub.methods = {method_tag(RelevanceMode::none)};
    sub.relevance = "none";
    if (config_.axis == "reference-size") {
      sub.references = static_cast<std::size_t>(v);
      sub.corruption = std::min(sub.corruption, sub.references);
    } else {
      sub.corruption = static_cast<std::size_t>(v);
    }
    const fs::path report_path = sub.output / "point.json";
    json point;
    if (fs::exists(report_path)) {
      spdlog::info("sweep {}={}: already complete, skipped", config_.axis, v);
      point = json::parse(read_file(report_path));
    } else {
      Pipeline p(sub);
      p.data_ = std::move(data_);
      p.model_ = std::move(model_);
      p.judge_ = std::move(judge_);
      std::vector<RunOutcome> runs;
      try {
        runs = p.visualize_class();
      } catch (...) {
        data_ = std::move(p.data_);
        model_ = std::move(p.model_);
        judge_ = std::move(p.judge_);
        throw;
      }
      const bool ok = std::none_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.error.has_value(); });
      if (!ok) {
        failed = true;
      } else {
        const auto reps = p.evaluate();
        const EvalReport& r = reps.front();
        point = {{"axis", config_.axis}, {"value", v}, {"report", r.to_json()}};
        write_file_atomic(report_path, point.dump(2) + "\n");
      }
      data_ = std::move(p.data_);
      model_ = std::move(p.model_);
      judge_ = std::move(p.judge_);
      if (!ok) continue;
    }
    const json& r = point.at("report");
    auto num = [](const json& x) { return x.is_number() ? fmt17(x.get<double>()) : std::string("NA"); };
    const json& zs = r.at("zeroshot");
    const json& cl = r.at("classification");
    trend += std::to_string(v) + "," + (cl.is_object() ? num(cl.at("top1")) : "NA") + "," +
             (cl.is_object() ? num(cl.at("top5")) : "NA") + "," + num(r.at("fid")) + "," +
             num(r.at("fid_judge")) + "," + (zs.is_object() ? num(zs.at("top1")) : "NA") + "," +
             (zs.is_object() ? num(zs.at("top5")) : "NA") + "\n";
    points.push_back(point);
  }
  fs::create_directories(root);
  write_file_atomic(root / "trend.csv", trend);
  if (failed) throw Error("sweep: at least one point failed; see " + (config_.output / "failed").string());
  return points;
}

Checkpoint Pipeline::train() {
  const DatasetSplits& d = data();
  const Normalization norm = channel_statistics(d.train);
  const ModelSpec spec = config_.architecture == "plain"
                             ? plain_desk(d.train.geometry(), d.train.class_count(), config_.widths, norm)
                             : resnet_desk(d.train.geometry(), d.train.class_count(), config_.widths, norm);
  TrainConfig tc;
  tc.epochs = config_.epochs;
  tc.learning_rate = config_.train_learning_rate;
  tc.batch_size = config_.batch_size;
  // blobs2 labels are the blob's side, which a mirror flip would swap.
  if (config_.dataset.rfind("blobs2", 0) == 0) tc.flip_augment = false;
  const auto t0 = std::chrono::steady_clock::now();
  Checkpoint ck = train_desk_model(spec, d, config_.dataset, tc, config_.train_seed,
                                   [](int epoch, double loss, double acc) {
                                     spdlog::info("epoch {} loss {:.4f} train acc {:.4f}", epoch, loss, acc);
                                   });
  save_checkpoint(config_.checkpoint, ck);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  spdlog::info("trained {} in {:.1f}s: train {:.4f} test {:.4f}, hash {}", config_.checkpoint.string(),
               secs, ck.meta.train_accuracy, ck.meta.test_accuracy, ck.meta.weights_hash.substr(0, 16));
  if (ck.meta.warning) spdlog::warn("{}", *ck.meta.warning);
  return ck;
}

int run_command(const RunConfig& config) {
  try {
    config.validate();
  } catch (const ConfigError& e) {
    spdlog::error("invalid configuration: {}", e.what());
    return 2;
  }
  try {
    Pipeline p(config);
    std::vector<RunOutcome> runs;
    const std::string& cmd = config.command;
    if (cmd == "train") {
      p.train();
      return 0;
    }
    if (cmd == "visualize-class") runs = p.visualize_class();
    if (cmd == "visualize-neuron") runs = p.visualize_neuron();
    if (cmd == "visualize-concept") runs = p.visualize_concept();
    if (cmd == "baseline") runs = p.baseline();
    if (cmd == "evaluate") p.evaluate();
    if (cmd == "sweep") p.sweep();
    const auto failed = std::count_if(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.error.has_value(); });
    if (failed > 0) {
      spdlog::error("{} of {} runs failed; partial outputs moved to {}", failed, runs.size(),
                    (config.output / "failed").string());
      return 1;
    }
    return 0;
  } catch (const ConfigError& e) {
    spdlog::error("invalid configuration: {}", e.what());
    return 2;
  } catch (const ValidationError& e) {
    spdlog::error("invalid input: {}", e.what());
    return 2;
  } catch (const TapNotFoundError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}

}  // namespace vital
