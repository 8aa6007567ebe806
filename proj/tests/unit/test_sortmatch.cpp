// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"
#include "vital/errors.hpp"
#include "vital/sortmatch.hpp"

namespace vital {
namespace {

ActivationTensor row(std::vector<double> v, const std::string& id = "l") {
  const std::size_t n = v.size();
  return ActivationTensor(id, 1, n, std::move(v));
}

SortedChannelProfile profile(std::vector<double> v, const std::string& id = "l") {
  return SortedChannelProfile(row(std::move(v), id));
}

TEST(SortedReference, SingleReferenceIsSorted) {
  const std::vector<ActivationTensor> refs{row({10, 30, 20})};
  const auto p = sorted_reference(refs);
  EXPECT_EQ(std::vector<double>(p.row(0).begin(), p.row(0).end()), (std::vector<double>{10, 20, 30}));
}

TEST(SortedReference, MeanOfSortedRows) {
  const std::vector<ActivationTensor> refs{row({0, 2}), row({4, 2})};
  const auto p = sorted_reference(refs);
  EXPECT_EQ(std::vector<double>(p.row(0).begin(), p.row(0).end()), (std::vector<double>{1, 3}));
}

TEST(SortedReference, IdenticalReferencesMatchSingle) {
  std::mt19937_64 rng(3);
  const ActivationTensor a = test::random_tensor(4, 9, rng);
  const std::vector<ActivationTensor> one{a};
  const std::vector<ActivationTensor> many(5, a);
  const auto a1 = sorted_reference(one).tensor().values;
  const auto a5 = sorted_reference(many).tensor().values;
  for (std::size_t i = 0; i < a1.size(); ++i) EXPECT_NEAR(a1[i], a5[i], 1e-14);
}

TEST(SortedReference, RejectsShapeMismatchAndEmpty) {
  const std::vector<ActivationTensor> refs{row({1, 2}), row({1, 2, 3})};
  EXPECT_THROW(sorted_reference(refs), ValidationError);
  EXPECT_THROW(sorted_reference(std::vector<ActivationTensor>{}), ValidationError);
}

TEST(SortedChannelProfile, RejectsDecreasingRow) {
  EXPECT_THROW(profile({3, 1}), ValidationError);
}

TEST(Reorder, RankMatching) {
  const auto zr = reorder_to_generated(row({3, 1, 2}), profile({10, 20, 30}));
  EXPECT_EQ(zr.values, (std::vector<double>{30, 10, 20}));
}

TEST(Reorder, SameMultisetIsFixedPoint) {
  const auto zr = reorder_to_generated(row({2, 1}), profile({1, 2}));
  EXPECT_EQ(zr.values, (std::vector<double>{2, 1}));
}

TEST(Reorder, TiesBrokenByPosition) {
  const auto zr = reorder_to_generated(row({5, 5, 5}), profile({1, 2, 3}));
  EXPECT_EQ(zr.values, (std::vector<double>{1, 2, 3}));
}

TEST(Reorder, RejectsShapeMismatch) {
  EXPECT_THROW(reorder_to_generated(row({1, 2, 3}), profile({1, 2})), ValidationError);
}

TEST(SmLoss, HandValues) {
  EXPECT_EQ(sm_loss(row({1, 2}), row({1, 2})), 0.0);
  EXPECT_DOUBLE_EQ(sm_loss(row({3, 1, 2}), row({30, 10, 20})), 378.0);
  EXPECT_DOUBLE_EQ(sm_loss(row({5, 0}), row({3, 1})), 2.5);
  EXPECT_THROW(sm_loss(row({1}), row({1, 2})), ValidationError);
}

TEST(SmLoss, GradientIsScaledResidual) {
  const auto g = sm_loss_gradient(row({5, 0}), row({3, 1}));
  EXPECT_DOUBLE_EQ(g.values[0], 2.0);
  EXPECT_DOUBLE_EQ(g.values[1], -1.0);
}

ReferenceDistribution two_layer_reference() {
  ReferenceDistribution r;
  r.profiles.emplace("a", profile({10, 20, 30}, "a"));
  r.profiles.emplace("b", profile({1, 3}, "b"));
  r.provenance.reference_count = 1;
  return r;
}

TEST(SmLossMultilayer, ComposesHandValues) {
  const std::map<std::string, ActivationTensor> acts{{"a", row({3, 1, 2}, "a")},
                                                     {"b", row({5, 0}, "b")}};
  const auto ref = two_layer_reference();
  const auto out = sm_loss_multilayer(acts, ref, MatchPlan({{"a", 1.0}, {"b", 2.0}}));
  EXPECT_DOUBLE_EQ(out.total, 383.0);
  ASSERT_EQ(out.layers.size(), 2u);
  EXPECT_DOUBLE_EQ(out.layers[0].loss, 378.0);
  EXPECT_DOUBLE_EQ(out.layers[1].loss, 2.5);
}

TEST(SmLossMultilayer, DegeneratePlanAndLinearity) {
  const std::map<std::string, ActivationTensor> acts{{"a", row({3, 1, 2}, "a")},
                                                     {"b", row({5, 0}, "b")}};
  const auto ref = two_layer_reference();
  const MatchPlan single({{"a", 0.0}, {"b", 1.0}});
  EXPECT_DOUBLE_EQ(sm_loss_multilayer(acts, ref, single).total, 2.5);
  const MatchPlan plan({{"a", 0.7}, {"b", 1.3}});
  EXPECT_DOUBLE_EQ(sm_loss_multilayer(acts, ref, plan.scaled(2.0)).total,
                   2.0 * sm_loss_multilayer(acts, ref, plan).total);
}

TEST(SmLossMultilayer, MissingLayerIsConfigError) {
  const std::map<std::string, ActivationTensor> acts{{"a", row({3, 1, 2}, "a")}};
  const auto ref = two_layer_reference();
  EXPECT_THROW(sm_loss_multilayer(acts, ref, MatchPlan({{"a", 1.0}, {"b", 1.0}})), ConfigError);
  EXPECT_THROW(sm_loss_multilayer({{"a", row({3, 1, 2}, "a")}, {"c", row({1}, "c")}}, ref,
                                  MatchPlan({{"c", 1.0}})),
               ConfigError);
}

TEST(MatchPlan, Validation) {
  EXPECT_THROW(MatchPlan({{"a", -1.0}}), ValidationError);
  EXPECT_THROW(MatchPlan({{"a", 0.0}}), ValidationError);
  EXPECT_THROW(MatchPlan({{"a", 1.0}, {"a", 1.0}}), ValidationError);
  const MatchPlan p({{"a", 0.1}, {"b", 1.0}});
  EXPECT_EQ(MatchPlan::from_json(p.to_json()).entries(), p.entries());
}

TEST(MatchPlan, PresetsFollowTaps) {
  const Model m = test::tiny_model(1);
  EXPECT_EQ(MatchPlan::all_taps(m).layers(), (std::vector<std::string>{"block1", "block2", "block3"}));
  EXPECT_EQ(MatchPlan::first_last(m).layers(), (std::vector<std::string>{"block1", "block3"}));
}

// Brute-force pairing of order statistics, written without the library's sort
// helpers.
double quantile_oracle(const ActivationTensor& z, const SortedChannelProfile& p) {
  double acc = 0.0;
  for (std::size_t c = 0; c < z.channels; ++c) {
    std::vector<double> s(z.row(c).begin(), z.row(c).end());
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t j = i + 1; j < s.size(); ++j) {
        if (s[j] < s[i]) std::swap(s[i], s[j]);
      }
    }
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double d = s[k] - p.row(c)[k];
      acc += d * d;
    }
  }
  return acc / static_cast<double>(z.values.size());
}

TEST(SortMatchProperties, RandomizedInvariants) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng() % 4;
    const std::size_t d = 2 + rng() % 12;
    const ActivationTensor z = test::random_tensor(c, d, rng);
    std::vector<ActivationTensor> refs;
    const std::size_t k = 1 + rng() % 5;
    for (std::size_t i = 0; i < k; ++i) refs.push_back(test::random_tensor(c, d, rng));
    const auto p = sorted_reference(refs);

    // zero at alignment
    const std::vector<ActivationTensor> self{z};
    EXPECT_EQ(sm_loss(z, reorder_to_generated(z, sorted_reference(self))), 0.0);

    // multiset preservation
    const auto zr = reorder_to_generated(z, p);
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::vector<double> got(zr.row(ch).begin(), zr.row(ch).end());
      std::sort(got.begin(), got.end());
      EXPECT_EQ(got, std::vector<double>(p.row(ch).begin(), p.row(ch).end()));
    }

    // permutation invariance
    auto shuffled = refs;
    for (auto& r : shuffled) {
      for (std::size_t ch = 0; ch < c; ++ch) std::shuffle(r.row(ch).begin(), r.row(ch).end(), rng);
    }
    EXPECT_EQ(sorted_reference(shuffled).tensor().values, p.tensor().values);

    // quantile oracle
    EXPECT_NEAR(sm_loss(z, zr), quantile_oracle(z, p), 1e-10);
  }
}

TEST(SortMatchProperties, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ActivationTensor z = test::random_tensor(3, 16, rng);
    const std::vector<ActivationTensor> refs{test::random_tensor(3, 16, rng)};
    const auto zr = reorder_to_generated(z, sorted_reference(refs));
    const auto g = sm_loss_gradient(z, zr);
    const double h = 1e-6;
    for (std::size_t i = 0; i < z.values.size(); ++i) {
      const double keep = z.values[i];
      z.values[i] = keep + h;
      const double up = sm_loss(z, zr);
      z.values[i] = keep - h;
      const double down = sm_loss(z, zr);
      z.values[i] = keep;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(g.values[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(SortMatchProperties, SmallStepDescends) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    ActivationTensor z = test::random_tensor(2, 10, rng);
    const std::vector<ActivationTensor> refs{test::random_tensor(2, 10, rng)};
    const auto p = sorted_reference(refs);
    const double before = sm_loss(z, reorder_to_generated(z, p));
    const auto g = sm_loss_gradient(z, reorder_to_generated(z, p));
    for (std::size_t i = 0; i < z.values.size(); ++i) z.values[i] -= 0.01 * g.values[i];
    EXPECT_LE(sm_loss(z, reorder_to_generated(z, p)), before);
  }
}

TEST(ReferenceDistributionIo, RoundTripAndShapeCheck) {
  test::TempDir dir("refdist");
  const Model m = test::tiny_model(2);
  std::mt19937_64 rng(1);
  ReferenceDistribution r;
  for (const auto& tap : m.taps()) {
    std::vector<ActivationTensor> refs{test::random_tensor(static_cast<std::size_t>(tap.channel_count),
                                                           static_cast<std::size_t>(tap.spatial_size),
                                                           rng, tap.layer_id)};
    r.profiles.emplace(tap.layer_id, sorted_reference(refs));
  }
  r.provenance = {"abc", "lrp", 1, 0};
  save_reference_distribution(dir.path(), r);
  const auto back = load_reference_distribution(dir.path(), &m);
  EXPECT_EQ(back.provenance.fingerprint, "abc");
  EXPECT_EQ(back.provenance.relevance_mode, "lrp");
  for (const auto& [id, p] : r.profiles) EXPECT_EQ(back.profile(id).tensor().values, p.tensor().values);
  EXPECT_THROW(back.profile("nope"), ConfigError);

  const Model other = test::tiny_model(2, BlockKind::residual, {5, 6, 8});
  EXPECT_THROW(load_reference_distribution(dir.path(), &other), ValidationError);
}

}  // namespace
}  // namespace vital
