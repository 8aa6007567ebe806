// SPDX-License-Identifier: Apache-2.0
// Acceptance driver: one line per criterion, `--only N` for a single one.
// Exit status with --only: 0 pass, 1 fail, 77 blocked (reported as skipped).
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vital/archive.hpp"
#include "vital/attribution.hpp"
#include "vital/errors.hpp"
#include "vital/evaluation.hpp"
#include "vital/pipeline.hpp"
#include "vital/sortmatch.hpp"
#include "vital/synthesis.hpp"
#include "vital/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vital;

namespace {

// Pinned thresholds.
constexpr double kMinTargetAccuracy = 0.85;
constexpr double kMinVitalTop1 = 0.90;
constexpr double kMaxFourierTop1 = 0.40;
constexpr double kMaxFidRatio = 0.5;
constexpr double kMinZeroShotGap = 0.30;
constexpr double kInversionTolerance = 0.05;
constexpr double kQuantileTolerance = 1e-10;
constexpr double kGradientTolerance = 1e-4;
constexpr double kReorderTolerance = 1e-12;
constexpr double kConservationTolerance = 0.01;
constexpr double kHomogeneityTolerance = 1e-6;
constexpr double kFidIdentityTolerance = 1e-6;
constexpr double kFidSymmetryTolerance = 1e-8;

// Desk-scale setup. shapes10 stands in wherever CIFAR-10 is absent.
constexpr const char* kAnalogDataset = "shapes10:600:100:2024";
const std::vector<int> kTargetWidths{8, 16, 32, 32};
constexpr int kTrainEpochs = 10;
constexpr std::uint64_t kTargetSeed = 1;
constexpr std::uint64_t kJudgeSeed = 2;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};
const std::vector<std::string> kNeurons{"block2:0", "block2:5", "block2:10", "block3:0", "block3:9",
                                        "block3:18", "block4:0", "block4:13", "block4:26"};

enum class Verdict { pass, fail, blocked };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path root;
  fs::path data_root;

  fs::path runs() const { return root / "runs"; }
  fs::path checkpoint(const std::string& dataset, const std::string& role) const {
    std::string tag = dataset;
    std::replace(tag.begin(), tag.end(), ':', '_');
    return root / "checkpoints" / (tag + "-" + role);
  }
};

bool cifar_available(const Workspace& ws) {
  return fs::exists(ws.data_root / "cifar-10-batches-bin" / "test_batch.bin");
}

std::string main_dataset(const Workspace& ws) { return cifar_available(ws) ? "cifar10" : kAnalogDataset; }

RunConfig base_config(const Workspace& ws, const std::string& dataset) {
  RunConfig c;
  c.dataset = dataset;
  c.data_root = ws.data_root;
  c.cache_dir = ws.runs() / "cache";
  c.checkpoint = ws.checkpoint(dataset, "target");
  c.judge = ws.checkpoint(dataset, "judge");
  c.seeds = kSeeds;
  return c;
}

CheckpointMeta ensure_checkpoint(const Workspace& ws, const std::string& dataset, const std::string& role,
                                 std::uint64_t seed) {
  const fs::path dir = ws.checkpoint(dataset, role);
  if (fs::exists(dir / "meta.json") && fs::exists(dir / "weights.varc")) {
    const Checkpoint ck = load_checkpoint(dir);
    if (ck.meta.dataset == dataset && ck.meta.seed == seed) return ck.meta;
  }
  RunConfig c = base_config(ws, dataset);
  c.command = "train";
  c.checkpoint = dir;
  c.widths = kTargetWidths;
  c.epochs = kTrainEpochs;
  c.train_seed = seed;
  return Pipeline(c).train().meta;
}

int setup(const Workspace& ws) {
  std::error_code ec;
  fs::remove_all(ws.runs(), ec);
  fs::create_directories(ws.runs());
  for (const std::string& dataset : {std::string(kAnalogDataset), main_dataset(ws)}) {
    const auto target = ensure_checkpoint(ws, dataset, "target", kTargetSeed);
    const auto judge = ensure_checkpoint(ws, dataset, "judge", kJudgeSeed);
    std::printf("setup %s: target test accuracy %s, judge test accuracy %s\n", dataset.c_str(),
                fmt(target.test_accuracy).c_str(), fmt(judge.test_accuracy).c_str());
    if (dataset == main_dataset(ws)) break;
  }
  return 0;
}

// Class visualizations for both methods, then their evaluation. Resumable, so
// criteria sharing the run reuse finished images.
std::map<std::string, EvalReport> class_comparison(const Workspace& ws, const std::string& dataset,
                                                   const fs::path& out, const fs::path& cache) {
  RunConfig c = base_config(ws, dataset);
  c.output = out;
  c.cache_dir = cache;
  c.resume = true;
  c.command = "visualize-class";
  c.validate();
  Pipeline(c).visualize_class();
  c.command = "baseline";
  Pipeline(c).baseline();
  c.command = "evaluate";
  c.methods = {"vital", "fourier-am"};
  std::map<std::string, EvalReport> by_method;
  for (auto& r : Pipeline(c).evaluate()) by_method.emplace(r.method, std::move(r));
  return by_method;
}

std::map<std::string, EvalReport> criterion1_run(const Workspace& ws, const std::string& dataset) {
  return class_comparison(ws, dataset, ws.runs() / "c1" / dataset, ws.runs() / "cache");
}

Outcome headline(const Workspace& ws, const std::string& dataset) {
  const Checkpoint ck = load_checkpoint(ws.checkpoint(dataset, "target"));
  auto reps = criterion1_run(ws, dataset);
  const EvalReport& v = reps.at("vital");
  const EvalReport& f = reps.at("fourier-am");
  const bool acc_ok = ck.meta.test_accuracy >= kMinTargetAccuracy;
  const bool v_ok = v.classification.top1() >= kMinVitalTop1;
  const bool f_ok = f.classification.top1() <= kMaxFourierTop1;
  const bool fid_ok = *v.fid <= kMaxFidRatio * *f.fid;
  std::string detail = "[" + dataset + "] target acc " + fmt(ck.meta.test_accuracy) + (acc_ok ? "" : " (<0.85)") +
                       "; vital top1 " + fmt(v.classification.top1()) + (v_ok ? "" : " (<0.90)") +
                       "; fourier-am top1 " + fmt(f.classification.top1()) + (f_ok ? "" : " (>0.40)") +
                       "; fid vital " + fmt(*v.fid) + " vs fourier-am " + fmt(*f.fid) +
                       (fid_ok ? "" : " (ratio >0.5)") + "; n=" + std::to_string(v.classification.count);
  return {acc_ok && v_ok && f_ok && fid_ok ? Verdict::pass : Verdict::fail, detail};
}

Outcome zero_shot(const Workspace& ws, const std::string& dataset) {
  auto reps = criterion1_run(ws, dataset);
  const double v = reps.at("vital").zeroshot->top1();
  const double f = reps.at("fourier-am").zeroshot->top1();
  const double gap = v - f;
  std::string detail = "[" + dataset + "] judge top1 vital " + fmt(v) + " (top5 " +
                       fmt(reps.at("vital").zeroshot->top5()) + "), fourier-am " + fmt(f) + " (top5 " +
                       fmt(reps.at("fourier-am").zeroshot->top5()) + "), gap " + fmt(gap) + " vs >= 0.30";
  return {gap >= kMinZeroShotGap ? Verdict::pass : Verdict::fail, detail};
}

Outcome blocked_with_analog(const Workspace& ws, const std::function<Outcome(const Workspace&, const std::string&)>& fn) {
  if (cifar_available(ws)) return fn(ws, "cifar10");
  const Outcome analog = fn(ws, kAnalogDataset);
  return {Verdict::blocked, "CIFAR-10 not found under " + ws.data_root.string() +
                                "; shapes10 analog " + (analog.verdict == Verdict::pass ? "passes" : "fails") +
                                ": " + analog.detail};
}

json sweep(const Workspace& ws, const std::string& axis, std::vector<int> values, const std::string& tag) {
  RunConfig c = base_config(ws, main_dataset(ws));
  c.command = "sweep";
  c.output = ws.runs() / tag;
  c.axis = axis;
  c.axis_values = std::move(values);
  c.references = 50;
  c.validate();
  return Pipeline(c).sweep();
}

Outcome corruption(const Workspace& ws) {
  const json points = sweep(ws, "corruption", {0, 5, 10, 20}, "c3");
  std::vector<double> fid;
  std::string detail = "[" + main_dataset(ws) + "] fid";
  for (const auto& p : points) {
    fid.push_back(p.at("report").at("fid").get<double>());
    detail += " m=" + std::to_string(p.at("value").get<int>()) + ":" + fmt(fid.back(), 3);
  }
  int inversions = 0;
  bool within = true;
  for (std::size_t i = 0; i + 1 < fid.size(); ++i) {
    if (fid[i + 1] < fid[i]) {
      ++inversions;
      if (fid[i] - fid[i + 1] > kInversionTolerance * fid[i]) within = false;
    }
  }
  detail += "; inversions " + std::to_string(inversions);
  const bool ok = fid.size() == 4 && (inversions == 0 || (inversions == 1 && within));
  return {ok ? Verdict::pass : Verdict::fail, detail};
}

Outcome reference_size(const Workspace& ws) {
  const json points = sweep(ws, "reference-size", {5, 50}, "c4");
  std::map<int, double> top1;
  for (const auto& p : points) top1[p.at("value").get<int>()] = p.at("report").at("zeroshot").at("top1").get<double>();
  const std::string detail = "[" + main_dataset(ws) + "] judge top1 N=5 " + fmt(top1.at(5)) + ", N=50 " +
                             fmt(top1.at(50));
  return {top1.at(50) >= top1.at(5) ? Verdict::pass : Verdict::fail, detail};
}

Outcome auc_mad_direction(const Workspace& ws) {
  RunConfig c = base_config(ws, main_dataset(ws));
  c.output = ws.runs() / "c5";
  c.neurons = kNeurons;
  c.resume = true;
  c.command = "visualize-neuron";
  c.validate();
  Pipeline(c).visualize_neuron();
  c.command = "baseline";
  Pipeline(c).baseline();
  c.command = "evaluate";
  c.methods = {"vital-lrp", "fourier-am"};
  std::map<std::string, std::pair<double, double>> means;
  std::size_t neurons = 0;
  for (const auto& r : Pipeline(c).evaluate()) {
    double auc = 0.0, mad = 0.0;
    for (const auto& n : r.neurons) {
      auc += n.value.auc;
      mad += n.value.mad;
    }
    const double k = static_cast<double>(r.neurons.size());
    means[r.method] = {auc / k, mad / k};
    neurons = r.neurons.size();
  }
  const auto [va, vm] = means.at("vital-lrp");
  const auto [fa, fm] = means.at("fourier-am");
  const std::string detail = "[" + main_dataset(ws) + "] " + std::to_string(neurons) + " neurons x " +
                             std::to_string(kSeeds.size()) + " seeds; mean auc vital " + fmt(va) + " vs fourier-am " +
                             fmt(fa) + "; mean mad vital " + fmt(vm) + ", fourier-am " + fmt(fm);
  const bool ok = neurons >= 9 && va > fa && vm > 0.0 && fm < 0.0;
  return {ok ? Verdict::pass : Verdict::fail, detail};
}

// Independent oracle: per channel, sort z and pair it with the profile row.
double quantile_oracle(const ActivationTensor& z, const SortedChannelProfile& p) {
  double acc = 0.0;
  for (std::size_t c = 0; c < z.channels; ++c) {
    std::vector<double> s(z.row(c).begin(), z.row(c).end());
    for (std::size_t i = 1; i < s.size(); ++i) {  // insertion sort, independent of std::sort
      for (std::size_t j = i; j > 0 && s[j - 1] > s[j]; --j) std::swap(s[j - 1], s[j]);
    }
    for (std::size_t k = 0; k < s.size(); ++k) acc += (s[k] - p.row(c)[k]) * (s[k] - p.row(c)[k]);
  }
  return acc / static_cast<double>(z.values.size());
}

ActivationTensor normal_tensor(std::size_t c, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  ActivationTensor t("l", c, d);
  for (double& v : t.values) v = n(rng);
  return t;
}

Outcome sort_matching() {
  std::mt19937_64 rng(20240);
  int failures = 0;
  double worst_oracle = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 1 + rng() % 6;
    const std::size_t d = 1 + rng() % 40;
    const ActivationTensor z = normal_tensor(c, d, rng);
    std::vector<ActivationTensor> refs;
    const std::size_t k = 1 + rng() % 8;
    for (std::size_t i = 0; i < k; ++i) refs.push_back(normal_tensor(c, d, rng));
    const auto p = sorted_reference(refs);
    const auto zr = reorder_to_generated(z, p);

    bool ok = true;
    const std::vector<ActivationTensor> self{z};
    ok &= sm_loss(z, reorder_to_generated(z, sorted_reference(self))) == 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::vector<double> got(zr.row(ch).begin(), zr.row(ch).end());
      std::sort(got.begin(), got.end());
      ok &= got == std::vector<double>(p.row(ch).begin(), p.row(ch).end());
    }
    // Spatial shuffles leave the profile bit-identical; reordering the
    // references only changes the summation order of the mean.
    auto shuffled = refs;
    for (auto& r : shuffled) {
      for (std::size_t ch = 0; ch < c; ++ch) std::shuffle(r.row(ch).begin(), r.row(ch).end(), rng);
    }
    ok &= sorted_reference(shuffled).tensor().values == p.tensor().values;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto reordered = sorted_reference(shuffled).tensor().values;
    for (std::size_t i = 0; i < reordered.size(); ++i) {
      const double ref = p.tensor().values[i];
      ok &= std::abs(reordered[i] - ref) <= kReorderTolerance * std::max(1.0, std::abs(ref));
    }
    const double err = std::abs(sm_loss(z, zr) - quantile_oracle(z, p));
    worst_oracle = std::max(worst_oracle, err);
    ok &= err <= kQuantileTolerance;
    failures += ok ? 0 : 1;
  }

  double worst_grad = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ActivationTensor z = normal_tensor(1 + rng() % 4, 2 + rng() % 20, rng);
    const std::vector<ActivationTensor> refs{normal_tensor(z.channels, z.spatial, rng)};
    const auto zr = reorder_to_generated(z, sorted_reference(refs));
    const auto g = sm_loss_gradient(z, zr);
    std::vector<double> fd(z.values.size());
    const double h = 1e-6;
    for (std::size_t i = 0; i < z.values.size(); ++i) {
      const double keep = z.values[i];
      z.values[i] = keep + h;
      const double up = sm_loss(z, zr);
      z.values[i] = keep - h;
      const double down = sm_loss(z, zr);
      z.values[i] = keep;
      fd[i] = (up - down) / (2 * h);
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      num += (g.values[i] - fd[i]) * (g.values[i] - fd[i]);
      den += fd[i] * fd[i];
    }
    worst_grad = std::max(worst_grad, std::sqrt(num) / std::max(std::sqrt(den), 1e-12));
  }
  const bool ok = failures == 0 && worst_grad <= kGradientTolerance;
  return {ok ? Verdict::pass : Verdict::fail,
          "1000 instances, " + std::to_string(failures) + " failing; worst oracle gap " + fmt(worst_oracle * 1e12, 3) +
              "e-12; 100 gradient checks, worst relative error " + fmt(worst_grad * 1e6, 3) + "e-6"};
}

Outcome lrp_conservation() {
  std::mt19937_64 rng(7);
  double worst_conservation = 0.0, worst_homogeneity = 0.0;
  int nets = 0;
  for (int n = 0; n < 50; ++n) {
    const int depth = 1 + static_cast<int>(rng() % 4);
    std::vector<int> widths;
    for (int i = 0; i < depth; ++i) widths.push_back(3 + static_cast<int>(rng() % 6));
    const Shape3 input{3, 8, 8};
    const Normalization norm{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
    ModelSpec spec = n % 2 ? plain_desk(input, 4, widths, norm) : resnet_desk(input, 4, widths, norm);
    spec.use_bias = false;
    const Model m = Model::initialize(spec, 1000 + static_cast<std::uint64_t>(n));
    FeatureMap img(input);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : img.values()) v = u(rng);
    const auto logits = m.trace(img).logits;
    const int target = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    const double score = logits[static_cast<std::size_t>(target)];
    std::vector<std::string> taps;
    for (const auto& t : m.taps()) taps.push_back(t.layer_id);
    const auto tgt = AttributionTarget::class_neuron(target);
    const auto r = lrp_relevance(m, img, tgt, taps);
    LrpOptions scaled_opt;
    scaled_opt.initial_scale = 2.5;
    const auto scaled = lrp_relevance(m, img, tgt, taps, scaled_opt);
    for (const auto& id : taps) {
      const auto& v = r.at(id).values;
      const double s = std::accumulate(v.begin(), v.end(), 0.0);
      worst_conservation = std::max(worst_conservation, std::abs(s - score) / std::max(std::abs(score), 1e-12));
      const auto& w = scaled.at(id).values;
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        num += (w[i] - 2.5 * v[i]) * (w[i] - 2.5 * v[i]);
        den += 6.25 * v[i] * v[i];
      }
      worst_homogeneity = std::max(worst_homogeneity, std::sqrt(num) / std::max(std::sqrt(den), 1e-300));
    }
    ++nets;
  }
  const bool ok = worst_conservation <= kConservationTolerance && worst_homogeneity <= kHomogeneityTolerance;
  return {ok ? Verdict::pass : Verdict::fail,
          std::to_string(nets) + " bias-free nets (1-4 blocks); worst conservation error " +
              fmt(100 * worst_conservation, 4) + "%, worst homogeneity error " + fmt(worst_homogeneity * 1e9, 3) +
              "e-9"};
}

Eigen::MatrixXd gaussian_rows(int n, int d, std::mt19937_64& rng, double shift, double scale) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = shift + scale * g(rng);
  }
  return m;
}

Outcome unit_suite() {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& name) {
    if (!ok) failed.push_back(name);
  };

  check(tv_loss(FeatureMap({3, 4, 4}, 0.3)) == 0.0, "tv constant");
  check(tv_loss(FeatureMap({1, 2, 2}, std::vector<double>{0, 1, 0, 1})) == 0.5, "tv 2x2");
  check(tv_loss(FeatureMap({1, 2, 2}, std::vector<double>{2, 3, 2, 3})) == 0.5, "tv offset");
  check(l2_loss(FeatureMap({3, 4, 4})) == 0.0, "l2 zero");
  check(l2_loss(FeatureMap({3, 4, 4}, 1.0)) == 1.0, "l2 ones");
  FeatureMap spike({1, 3, 5});
  spike.at(0, 1, 2) = 3.0;
  check(l2_loss(spike) == 9.0 / 15.0, "l2 spike");
  {
    ReferenceDistribution ref;
    ref.profiles.emplace("b", SortedChannelProfile(ActivationTensor("b", 1, 2, {1, 3})));
    const std::map<std::string, ActivationTensor> feats{{"b", ActivationTensor("b", 1, 2, {5, 0})}};
    const double a = 0.5 * (std::sqrt(3.5) + std::sqrt(0.5));
    const double b = 0.5 * (std::sqrt(3.5) - std::sqrt(0.5));
    const FeatureMap img({1, 1, 2}, std::vector<double>{a, b});
    const LossBreakdown l = total_loss(feats, ref, MatchPlan({{"b", 1.0}}), img, 2.0, 3.0);
    check(std::abs(l.total - 6.5) < 1e-12, "total composition");
  }

  std::mt19937_64 rng(99);
  {
    Eigen::MatrixXd a(4, 1), b(4, 1);
    a << -1, 1, -1, 1;
    b << 2, 4, 2, 4;
    check(std::abs(fid_score(a, b, 0.0) - 9.0) < 1e-12, "fid 1-d shift");
    const Eigen::MatrixXd s = gaussian_rows(60, 6, rng, 0.0, 1.0);
    check(fid_score(s, s) <= kFidIdentityTolerance, "fid identity");
  }
  const std::vector<double> syn{2, 4}, ctl{1, 3};
  const AucMad am = auc_mad(syn, ctl);
  check(am.auc == 0.75 && am.mad == 1.0, "auc/mad hand");
  const std::vector<double> hi{5, 6, 7}, lo{1, 2};
  check(auc_mad(hi, lo).auc == 1.0, "auc separation");
  const AucMad same = auc_mad(hi, hi);
  check(same.auc == 0.5 && same.mad == 0.0, "auc exchangeable");

  int axiom_failures = 0;
  for (int t = 0; t < 100; ++t) {
    const int d = 1 + static_cast<int>(rng() % 8);
    const Eigen::MatrixXd a = gaussian_rows(10 + static_cast<int>(rng() % 40), d, rng, 0.0, 1.0);
    const Eigen::MatrixXd b = gaussian_rows(10 + static_cast<int>(rng() % 40), d, rng, 0.3, 1.5);
    const double ab = fid_score(a, b);
    const double ba = fid_score(b, a);
    bool ok = ab >= 0.0 && std::abs(ab - ba) <= kFidSymmetryTolerance * std::max(1.0, ab);
    ok &= fid_score(a, a) <= kFidIdentityTolerance;
    axiom_failures += ok ? 0 : 1;
  }
  check(axiom_failures == 0, std::to_string(axiom_failures) + " fid axiom pairs");

  std::string detail = "tv/l2/total/fid/auc hand examples and 100 fid axiom pairs";
  if (!failed.empty()) {
    detail += "; failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {failed.empty() ? Verdict::pass : Verdict::fail, detail};
}

Outcome determinism(const Workspace& ws) {
  const std::string dataset = main_dataset(ws);
  criterion1_run(ws, dataset);
  const fs::path first = ws.runs() / "c1" / dataset;
  const fs::path second = ws.runs() / "c9";
  std::error_code ec;
  fs::remove_all(second, ec);
  class_comparison(ws, dataset, second / "out", second / "cache");

  std::size_t compared = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(first)) {
    const std::string name = e.path().filename().string();
    const bool tracked = name.ends_with(".png") || name.ends_with(".manifest.json");
    if (!e.is_regular_file() || !tracked) continue;
    const fs::path rel = fs::relative(e.path(), first);
    if (rel.begin()->string() == "reports") continue;
    ++compared;
    const fs::path other = second / "out" / rel;
    if (!fs::exists(other) || slurp(other) != slurp(e.path())) ++differing;
  }
  const std::string detail = "[" + dataset + "] " + std::to_string(compared) + " images+manifests compared, " +
                             std::to_string(differing) + " differ (fresh output and cache)";
  return {compared > 0 && differing == 0 ? Verdict::pass : Verdict::fail, detail};
}

const char* label(Verdict v) {
  switch (v) {
    case Verdict::pass:
      return "PASS";
    case Verdict::fail:
      return "FAIL";
    case Verdict::blocked:
      return "BLOCKED";
  }
  return "?";
}

Outcome run_criterion(const Workspace& ws, int n) {
  try {
    switch (n) {
      case 1:
        return blocked_with_analog(ws, headline);
      case 2:
        return blocked_with_analog(ws, zero_shot);
      case 3:
        return corruption(ws);
      case 4:
        return reference_size(ws);
      case 5:
        return auc_mad_direction(ws);
      case 6:
        return sort_matching();
      case 7:
        return lrp_conservation();
      case 8:
        return unit_suite();
      case 9:
        return determinism(ws);
      default:
        break;
    }
  } catch (const std::exception& e) {
    return {Verdict::fail, std::string("error: ") + e.what()};
  }
  return {Verdict::fail, "unknown criterion"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vital acceptance criteria"};
  int only = 0;
  bool do_setup = false;
  std::string work = "acceptance-work";
  std::string data_root;
  app.add_option("--only", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  app.add_flag("--setup", do_setup, "train or verify the desk checkpoints and clear previous runs");
  app.add_option("--work", work, "working directory for checkpoints and outputs");
  app.add_option("--data-root", data_root, "dataset root searched for CIFAR-10 (env VITAL_DATA_ROOT)");
  CLI11_PARSE(app, argc, argv);

  spdlog::set_level(spdlog::level::warn);
  if (data_root.empty()) {
    const char* env = std::getenv("VITAL_DATA_ROOT");
    data_root = env ? env : "data";
  }
  const Workspace ws{fs::absolute(work), fs::absolute(data_root)};
  fs::create_directories(ws.runs());
  if (do_setup) return setup(ws);

  std::vector<int> which;
  if (only) {
    which.push_back(only);
  } else {
    setup(ws);
    for (int i = 1; i <= 9; ++i) which.push_back(i);
  }
  bool any_fail = false, any_blocked = false;
  for (int n : which) {
    const Outcome o = run_criterion(ws, n);
    std::printf("criterion %d: %s %s\n", n, label(o.verdict), o.detail.c_str());
    std::fflush(stdout);
    any_fail |= o.verdict == Verdict::fail;
    any_blocked |= o.verdict == Verdict::blocked;
  }
  if (any_fail) return 1;
  if (only && any_blocked) return 77;
  return 0;
}
