// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "vital/errors.hpp"
#include "vital/pipeline.hpp"

namespace vital {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_files(const fs::path& root, const std::string& suffix) {
  if (!fs::exists(root)) return 0;
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const std::string s = e.path().filename().string();
    if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) ++n;
  }
  return n;
}

std::string config_error(const RunConfig& c) {
  try {
    c.validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(RunConfigTest, LayeringPrecedenceAndRoundTrip) {
  const json file{{"steps", 5}, {"dataset", "blobs2"}, {"seeds", {4}}};
  const json flags{{"steps", 7}};
  const RunConfig c = RunConfig::layered(file, flags);
  EXPECT_EQ(c.steps, 7);
  EXPECT_EQ(c.dataset, "blobs2");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4}));
  EXPECT_EQ(c.jitter, RunConfig{}.jitter);
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_FALSE(c.alpha_tv.has_value());

  EXPECT_THROW(RunConfig::layered(json{{"stpes", 5}}, json::object()), ConfigError);
  EXPECT_THROW(RunConfig::layered(json{{"steps", "many"}}, json::object()), ConfigError);
  EXPECT_THROW(RunConfig::layered(json::array(), json::object()), ConfigError);
}

TEST(RunConfigTest, ValidationNamesTheField) {
  RunConfig c;
  c.command = "train";
  c.checkpoint = "somewhere";
  EXPECT_EQ(config_error(c), "");
  c.command = "paint";
  EXPECT_NE(config_error(c).find("command"), std::string::npos);
  c.command = "train";
  c.steps = 0;
  EXPECT_NE(config_error(c).find("steps"), std::string::npos);
  c.steps = 4;
  c.neurons = {"block2"};
  EXPECT_NE(config_error(c).find("neurons"), std::string::npos);
  c.neurons.clear();
  c.corruption = 60;
  EXPECT_NE(config_error(c).find("corruption"), std::string::npos);
  c.corruption = 0;
  c.plan = "sideways";
  EXPECT_NE(config_error(c).find("plan"), std::string::npos);
  c.plan = "auto";
  c.command = "visualize-class";
  c.checkpoint = "/nonexistent/ckpt";
  EXPECT_NE(config_error(c).find("checkpoint"), std::string::npos);
}

TEST(MethodTag, Names) {
  EXPECT_EQ(method_tag(RelevanceMode::none), "vital");
  EXPECT_EQ(method_tag(RelevanceMode::lrp), "vital-lrp");
  EXPECT_EQ(method_tag(RelevanceMode::guided), "vital-guided");
}

TEST(ReadDirection, AcceptsJsonAndPlainText) {
  test::TempDir dir("dir");
  std::ofstream(dir.path() / "a.json") << "[1, 0.5, -2]";
  std::ofstream(dir.path() / "b.txt") << "1 0.5,\n-2\n";
  EXPECT_EQ(read_direction(dir.path() / "a.json"), (std::vector<double>{1, 0.5, -2}));
  EXPECT_EQ(read_direction(dir.path() / "b.txt"), (std::vector<double>{1, 0.5, -2}));
  std::ofstream(dir.path() / "c.txt") << "1 two 3";
  EXPECT_ANY_THROW(read_direction(dir.path() / "c.txt"));
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    spdlog::set_level(spdlog::level::warn);
    root_ = new test::TempDir("pipeline");
    for (auto [name, seed] : {std::pair{"target", 1}, std::pair{"judge", 2}}) {
      RunConfig c = base();
      c.command = "train";
      c.checkpoint = root_->path() / name;
      c.widths = {4, 8};
      c.epochs = 6;
      c.batch_size = 16;
      c.train_seed = std::uint64_t(seed);
      Pipeline(c).train();
    }
  }
  static void TearDownTestSuite() {
    delete root_;
    root_ = nullptr;
  }

  static RunConfig base() {
    RunConfig c;
    c.dataset = "blobs2:20:10:3";
    c.cache_dir = root_->path() / "cache";
    c.checkpoint = root_->path() / "target";
    c.seeds = {0, 1};
    c.steps = 8;
    c.baseline_steps = 8;
    c.jitter = 1;
    c.references = 4;
    c.patches = 4;
    c.patch_size = 8;
    c.candidate_limit = 0;
    c.control_count = 5;
    return c;
  }

  RunConfig config(const std::string& command, const std::string& out) const {
    RunConfig c = base();
    c.command = command;
    c.output = root_->path() / out;
    return c;
  }

  static test::TempDir* root_;
};

test::TempDir* PipelineTest::root_ = nullptr;

TEST_F(PipelineTest, ClassRunsWriteOnePerTargetAndSeed) {
  RunConfig c = config("visualize-class", "class");
  c.classes = {0, 1};
  Pipeline p(c);
  const auto runs = p.visualize_class();
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) {
    EXPECT_FALSE(r.error.has_value());
    EXPECT_TRUE(fs::exists(r.image));
    const json m = json::parse(slurp(r.manifest));
    EXPECT_EQ(m.at("method"), "vital");
    EXPECT_EQ(m.at("seed"), r.seed);
    EXPECT_EQ(m.at("checkpoint_hash"), p.model().meta.weights_hash);
    EXPECT_EQ(m.at("reference").at("count"), 4);
    EXPECT_TRUE(m.contains("final_loss"));
  }
  EXPECT_EQ(count_files(c.output, ".png"), 4u);
  EXPECT_EQ(count_files(c.output, ".manifest.json"), 4u);
  EXPECT_EQ(count_files(c.output, ".trace.csv"), 4u);

  // Resume skips; a fresh output with the same cache reuses the profiles.
  c.resume = true;
  for (const auto& r : Pipeline(c).visualize_class()) EXPECT_TRUE(r.skipped);
  RunConfig again = c;
  again.resume = false;
  again.output = root_->path() / "class-again";
  Pipeline q(again);
  const auto warm = q.visualize_class();
  EXPECT_EQ(q.cache_misses(), 0u);
  EXPECT_GE(q.cache_hits(), 2u);
  for (std::size_t i = 0; i < warm.size(); ++i) {
    EXPECT_EQ(slurp(warm[i].image), slurp(runs[i].image)) << "rerun differs";
  }
}

TEST_F(PipelineTest, RelevanceModeChangesTheFingerprint) {
  RunConfig c = config("visualize-neuron", "neuron-none");
  c.neurons = {"block2:1"};
  c.seeds = {0};
  c.relevance = "none";
  const auto none = Pipeline(c).visualize_neuron();
  c.relevance = "lrp";
  c.output = root_->path() / "neuron-lrp";
  const auto lrp = Pipeline(c).visualize_neuron();
  ASSERT_EQ(none.size(), 1u);
  ASSERT_EQ(lrp.size(), 1u);
  EXPECT_NE(none[0].fingerprint, lrp[0].fingerprint);
  EXPECT_EQ(lrp[0].method, "vital-lrp");
}

TEST_F(PipelineTest, BasisConceptMatchesNeuronReferences) {
  test::TempDir dir("basis");
  std::ofstream(dir.path() / "e1.json") << "[0, 1, 0, 0, 0, 0, 0, 0]";
  RunConfig c = config("visualize-concept", "concept");
  c.direction_file = dir.path() / "e1.json";
  c.seeds = {0};
  const auto concept_runs = Pipeline(c).visualize_concept();
  RunConfig n = config("visualize-neuron", "concept-neuron");
  n.neurons = {"block2:1"};
  n.seeds = {0};
  const auto neuron_runs = Pipeline(n).visualize_neuron();
  ASSERT_EQ(concept_runs.size(), 1u);
  const json cm = json::parse(slurp(concept_runs[0].manifest));
  const json nm = json::parse(slurp(neuron_runs[0].manifest));
  EXPECT_EQ(cm.at("equivalent_target"), (json{{"kind", "neuron"}, {"layer", "block2"}, {"channel", 1}}));
  EXPECT_EQ(cm.at("reference").at("set").at("sources"), nm.at("reference").at("set").at("sources"));
}

TEST_F(PipelineTest, EvaluateComparesMethodsReproducibly) {
  RunConfig v = config("visualize-class", "eval");
  Pipeline(v).visualize_class();
  RunConfig b = config("baseline", "eval");
  Pipeline(b).baseline();

  RunConfig e = config("evaluate", "eval");
  e.judge = root_->path() / "judge";
  const auto reports = Pipeline(e).evaluate();
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& r : reports) {
    EXPECT_EQ(r.classification.count, 4u);
    ASSERT_TRUE(r.fid.has_value());
    EXPECT_GE(*r.fid, 0.0);
    ASSERT_TRUE(r.zeroshot.has_value());
  }
  const std::string csv = slurp(e.output / "reports" / "comparison.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  std::vector<std::string> first;
  for (const auto& entry : fs::directory_iterator(e.output / "reports")) first.push_back(slurp(entry.path()));
  Pipeline(e).evaluate();
  std::vector<std::string> second;
  for (const auto& entry : fs::directory_iterator(e.output / "reports")) second.push_back(slurp(entry.path()));
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  EXPECT_EQ(first, second);

  RunConfig empty = config("evaluate", "eval-empty");
  EXPECT_THROW(Pipeline(empty).evaluate(), MissingInputError);
}

TEST_F(PipelineTest, SweepWritesTrendAndResumes) {
  RunConfig s = config("sweep", "sweep");
  s.classes = {0};
  s.seeds = {0};
  s.axis = "corruption";
  s.axis_values = {0, 2};
  const json first = Pipeline(s).sweep();
  const fs::path trend = s.output / "sweep-corruption" / "trend.csv";
  const std::string text = slurp(trend);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_EQ(text.rfind("corruption,top1,", 0), 0u);
  const json second = Pipeline(s).sweep();
  EXPECT_EQ(first, second);
  EXPECT_EQ(slurp(trend), text);
}

TEST_F(PipelineTest, ExitCodes) {
  RunConfig bad = config("visualize-class", "codes");
  bad.checkpoint = root_->path() / "missing";
  EXPECT_EQ(run_command(bad), 2);
  RunConfig ch = config("visualize-neuron", "codes");
  ch.neurons = {"block2:99"};
  EXPECT_EQ(run_command(ch), 2);
  RunConfig ok = config("visualize-class", "codes");
  ok.classes = {1};
  ok.seeds = {0};
  EXPECT_EQ(run_command(ok), 0);
}

}  // namespace
}  // namespace vital
