// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "support.hpp"
#include "vital/errors.hpp"
#include "vital/evaluation.hpp"

namespace vital {
namespace {

Eigen::MatrixXd gaussian_rows(int n, int d, std::uint64_t seed, double shift = 0.0, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = shift + scale * g(rng);
  }
  return m;
}

// Trace of (Sa Sb)^1/2 via the eigenvalues of the (non-symmetric) product.
double fid_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps) {
  auto stats = [eps](const Eigen::MatrixXd& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu;
    Eigen::MatrixXd s = c.transpose() * c / double(x.rows() - 1);
    s += eps * Eigen::MatrixXd::Identity(x.cols(), x.cols());
    return std::make_pair(mu, s);
  };
  const auto [ma, sa] = stats(a);
  const auto [mb, sb] = stats(b);
  Eigen::EigenSolver<Eigen::MatrixXd> es(sa * sb);
  double tr = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  return (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr;
}

TEST(Fid, IdenticalSetsScoreZero) {
  const Eigen::MatrixXd a = gaussian_rows(40, 5, 1);
  EXPECT_NEAR(fid_score(a, a), 0.0, 1e-8);
}

TEST(Fid, OneDimensionalShift) {
  // Same spread, means 0 and 3.
  Eigen::MatrixXd a(4, 1), b(4, 1);
  a << -1, 1, -1, 1;
  b << 2, 4, 2, 4;
  EXPECT_NEAR(fid_score(a, b, 0.0), 9.0, 1e-12);
  Eigen::MatrixXd c(4, 1);
  c << -2, 2, -2, 2;  // mean 0, std doubled: (sd_a - sd_c)^2 = var_a
  const double var_a = 4.0 / 3.0;
  EXPECT_NEAR(fid_score(a, c, 0.0), var_a, 1e-12);
}

TEST(Fid, AgreesWithOracleAndIsSymmetric) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Eigen::MatrixXd a = gaussian_rows(30, 4, s, 0.0, 1.0);
    Eigen::MatrixXd b = gaussian_rows(25, 4, s + 100, 0.5, 2.0);
    b.col(1) += 0.7 * b.col(0);
    const double f = fid_score(a, b);
    EXPECT_NEAR(f, fid_oracle(a, b, 1e-6), 1e-8 * std::max(1.0, f));
    EXPECT_NEAR(f, fid_score(b, a), 1e-8 * std::max(1.0, f));
    EXPECT_GE(f, 0.0);
  }
}

TEST(Fid, RejectsBadInput) {
  EXPECT_THROW(fid_score(gaussian_rows(1, 3, 0), gaussian_rows(5, 3, 1)), ValidationError);
  EXPECT_THROW(fid_score(gaussian_rows(5, 3, 0), gaussian_rows(5, 2, 1)), ValidationError);
  Eigen::MatrixXd bad = gaussian_rows(5, 3, 0);
  bad(2, 1) = std::nan("");
  EXPECT_THROW(fid_score(bad, gaussian_rows(5, 3, 1)), ValidationError);
}

double auc_oracle(const std::vector<double>& s, const std::vector<double>& c) {
  double wins = 0.0;
  for (double x : s) {
    for (double y : c) wins += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  }
  return wins / double(s.size() * c.size());
}

TEST(AucMad, HandExample) {
  const std::vector<double> s{2, 4}, c{1, 3};
  const AucMad r = auc_mad(s, c);
  EXPECT_DOUBLE_EQ(r.auc, 0.75);
  EXPECT_DOUBLE_EQ(r.mad, 1.0);
  const std::vector<double> same{1, 2, 3};
  EXPECT_DOUBLE_EQ(auc_mad(same, same).auc, 0.5);
}

TEST(AucMad, MatchesPairCountingOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(1, 30), val(0, 6);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> s(len(rng)), c(len(rng));
    for (double& v : s) v = val(rng);  // small integer range forces ties
    for (double& v : c) v = val(rng) * 0.9;
    const AucMad r = auc_mad(s, c);
    EXPECT_NEAR(r.auc, auc_oracle(s, c), 1e-12);
    const double mean_s = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
    const double mean_c = std::accumulate(c.begin(), c.end(), 0.0) / c.size();
    EXPECT_NEAR(r.mad, mean_s - mean_c, 1e-12);
    EXPECT_NEAR(auc_mad(c, s).auc, 1.0 - r.auc, 1e-12);
  }
}

TEST(AucMad, RejectsEmptyAndNonFinite) {
  const std::vector<double> empty, one{1.0}, nan{std::nan("")};
  EXPECT_THROW(auc_mad(empty, one), ValidationError);
  EXPECT_THROW(auc_mad(one, nan), ValidationError);
}

TEST(TopK, TiesRankLowerIndexFirst) {
  const std::vector<double> l{1.0, 3.0, 3.0, 0.5, 2.0, 2.0, 0.0};
  EXPECT_TRUE(in_top_k(l, 1, 1));
  EXPECT_FALSE(in_top_k(l, 2, 1));
  EXPECT_TRUE(in_top_k(l, 2, 2));
  EXPECT_TRUE(in_top_k(l, 5, 4));
  EXPECT_FALSE(in_top_k(l, 0, 4));
  EXPECT_TRUE(in_top_k(l, 6, 7));
  EXPECT_THROW(in_top_k(l, 7, 1), ValidationError);
  EXPECT_THROW(in_top_k(l, 0, 0), ValidationError);
}

TEST(Classification, CountsAndChanceUnderPermutation) {
  const Model m = test::tiny_model(12);
  std::vector<FeatureMap> images;
  std::vector<int> predicted;
  for (int i = 0; i < 300; ++i) {
    images.push_back(test::random_image({3, 8, 8}, 500 + i));
    const auto logits = m.trace(images.back()).logits;
    predicted.push_back(int(std::max_element(logits.begin(), logits.end()) - logits.begin()));
  }
  const ClassificationReport self = classify_visualizations(m, images, predicted);
  EXPECT_EQ(self.count, 300u);
  EXPECT_EQ(self.top1_hits, 300u);
  EXPECT_DOUBLE_EQ(self.top1(), 1.0);

  std::vector<int> shuffled = predicted;
  std::mt19937_64 rng(1);
  for (int& v : shuffled) v = int(rng() % 3);
  const ClassificationReport rnd = classify_visualizations(m, images, shuffled);
  EXPECT_NEAR(rnd.top1(), 1.0 / 3.0, 0.1);
  EXPECT_EQ(rnd.records.size(), 300u);
  EXPECT_LE(rnd.top1_hits, rnd.top5_hits);
}

TEST(Classification, ZeroShotRejectsTheTargetItself) {
  const Model m = test::tiny_model(12);
  const Model judge = test::tiny_model(13);
  const std::vector<FeatureMap> images{test::random_image({3, 8, 8}, 1)};
  const std::vector<int> labels{0};
  EXPECT_THROW(cross_model_zeroshot(m, m.weights_hash(), images, labels), ConfigError);
  EXPECT_EQ(cross_model_zeroshot(judge, m.weights_hash(), images, labels).count, 1u);
}

TEST(Embeddings, ExportShapeAndReproducibility) {
  test::TempDir dir("emb");
  const Model m = test::tiny_model(3);
  std::vector<FeatureMap> images;
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (int i = 0; i < 6; ++i) {
    images.push_back(test::random_image({3, 8, 8}, i));
    labels.push_back(i % 3);
    ids.push_back("img" + std::to_string(i));
  }
  const auto a = dir.path() / "a.csv";
  const auto b = dir.path() / "b.csv";
  export_embeddings(m, images, labels, ids, "vital", a);
  export_embeddings(m, images, labels, ids, "vital", b);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string text = slurp(a);
  EXPECT_EQ(text, slurp(b));
  std::istringstream lines(text);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0].rfind("image_id,label,method,e_1,", 0), 0u);
  for (const auto& r : rows) EXPECT_EQ(std::count(r.begin(), r.end(), ','), 3 + m.embedding_width() - 1);
  EXPECT_EQ(rows[2].rfind("img1,1,vital,", 0), 0u);

  std::ofstream(dir.path() / "plain").put('x');
  EXPECT_THROW(export_embeddings(m, images, labels, ids, "vital", dir.path() / "plain" / "x.csv"), IoError);
}

TEST(EvalReport, AbsentMetricsAreNA) {
  EvalReport r;
  r.method = "fourier-am";
  r.checkpoint_hash = "abc";
  const std::string row = r.csv_row();
  EXPECT_NE(row.find("NA"), std::string::npos);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("method"), "fourier-am");
}

}  // namespace
}  // namespace vital
