#include <gtest/gtest.h>

#include <cmath>

#include "magic/eval.hpp"
#include "magic/sampler.hpp"

using namespace magic;

namespace {

Eigen::MatrixXd column(std::initializer_list<double> v) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

Eigen::MatrixXd random_rows(int n, int d, Rng& rng, double shift = 0.0) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal() * (1.0 + 0.3 * j) + shift + 0.2 * (i % 3);
  return m;
}

}  // namespace

TEST(Frechet, IdenticalSetsGiveZero) {
  Rng rng(1);
  const Eigen::MatrixXd a = random_rows(50, 6, rng);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
}

TEST(Frechet, OneDimensionalClosedForms) {
  const double r = 1.0 / std::sqrt(2.0);
  // sample mean 0 and unbiased variance 1, against mean 1 variance 1
  EXPECT_NEAR(frechet_distance(column({-r, r}), column({1 - r, 1 + r})), 1.0, 1e-12);
  // variance 1 against variance 4: 0 + 1 + 4 - 2 * 2
  EXPECT_NEAR(frechet_distance(column({-r, r}), column({-std::sqrt(2.0), std::sqrt(2.0)})), 1.0, 1e-12);
}

TEST(Frechet, TwoDimensionalAgainstClosedForm) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd a = random_rows(30, 2, rng), b = random_rows(40, 2, rng, 0.7);
    // independent oracle: for 2x2 SPD M, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)), and
    // sqrt(A) B sqrt(A) has the trace of AB and determinant det A det B
    auto moments = [](const Eigen::MatrixXd& x, Eigen::Vector2d& mu, Eigen::Matrix2d& cov) {
      mu = x.colwise().mean().transpose();
      cov.setZero();
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::Vector2d d = x.row(i).transpose() - mu;
        cov += d * d.transpose();
      }
      cov /= static_cast<double>(x.rows() - 1);
    };
    Eigen::Vector2d ma, mb;
    Eigen::Matrix2d sa, sb;
    moments(a, ma, sa);
    moments(b, mb, sb);
    auto det = [](const Eigen::Matrix2d& m) { return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0); };
    const double cross = std::sqrt((sa * sb).trace() + 2 * std::sqrt(det(sa) * det(sb)));
    const double want = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2 * cross;
    EXPECT_NEAR(frechet_distance(a, b), want, 1e-9 * std::max(1.0, want));
  }
}

TEST(Frechet, SymmetricAndNonNegative) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd a = random_rows(20, 8, rng), b = random_rows(25, 8, rng, 0.1 * trial);
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-8 * std::max(1.0, ab));
  }
}

TEST(Frechet, RejectsBadInput) {
  EXPECT_THROW(frechet_distance(column({1.0}), column({1.0, 2.0})), std::invalid_argument);
  EXPECT_THROW(frechet_distance(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(3, 3)), std::invalid_argument);
}

TEST(Frechet, SquareRootClipsTinyNegativeEigenvalues) {
  Eigen::MatrixXd m(2, 2);
  m << 1.0, 1.0, 1.0, 1.0 - 1e-12;  // eigenvalue just below zero
  const Eigen::MatrixXd r = symmetric_sqrt(m);
  EXPECT_TRUE(r.allFinite());
  EXPECT_NEAR((r * r - m).norm(), 0.0, 1e-6);
}

TEST(Fidelity, F1Arithmetic) {
  Tensor<float> ref(Shape{1, 20, 20}), pred(Shape{1, 20, 20}), mask(Shape{1, 20, 20});
  mask.fill(1.0f);
  for (int i = 0; i < 100; ++i) ref[i] = 1.0f;
  for (int i = 0; i < 50; ++i) pred[i] = 1.0f;
  EXPECT_NEAR(*masked_f1(pred, ref, mask), 2.0 / 3.0, 1e-12);
  // disjoint
  Tensor<float> other(Shape{1, 20, 20});
  for (int i = 200; i < 300; ++i) other[i] = 1.0f;
  EXPECT_EQ(*masked_f1(other, ref, mask), 0.0);
  // no reference positives under the mask
  Tensor<float> none(Shape{1, 20, 20});
  EXPECT_FALSE(masked_f1(pred, none, mask).has_value());
}

TEST(Fidelity, GroundTruthImageScoresPerfectly) {
  WorldConfig w;
  for (std::uint64_t seed = 11000; seed < 11040; ++seed) {
    const CompletionCase c = make_case(seed, w);
    const Fidelity f = guidance_fidelity(c.scene.image, guidance_truth(c.scene, w), c.mask, w);
    if (f.edge_f1) {
      EXPECT_EQ(*f.edge_f1, 1.0);
    }
    if (f.seg_iou) {
      EXPECT_EQ(*f.seg_iou, 1.0);
      EXPECT_NEAR(*f.depth_mae, 0.0, 1e-5);
    }
  }
}

TEST(Fidelity, EmptyMaskIsAbsent) {
  WorldConfig w;
  const Scene s = generate_scene(4, w);
  const Fidelity f = guidance_fidelity(s.image, guidance_truth(s, w), Tensor<float>(Shape{1, 32, 32}), w);
  EXPECT_FALSE(f.edge_f1 || f.seg_iou || f.depth_mae);
}

TEST(Fidelity, UnmaskedPixelsAreIgnored) {
  WorldConfig w;
  Rng rng(5);
  for (std::uint64_t seed = 11000; seed < 11030; ++seed) {
    const CompletionCase c = make_case(seed, w);
    const GuidanceTruth truth = guidance_truth(c.scene, w);
    Tensor<float> out(c.mask.shape());
    for (auto& v : out.data()) v = static_cast<float>(rng.uniform());
    const Fidelity a = guidance_fidelity(out, truth, c.mask, w);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      if (c.mask[i] == 0.0f) out[i] = static_cast<float>(rng.uniform());
    }
    const Fidelity b = guidance_fidelity(out, truth, c.mask, w);
    EXPECT_EQ(a.edge_f1, b.edge_f1);
    EXPECT_EQ(a.seg_iou, b.seg_iou);
    EXPECT_EQ(a.depth_mae, b.depth_mae);
  }
}

TEST(FeaturePull, CentroidAndMidpoint) {
  Eigen::MatrixXd e(2, 2), s(2, 2);
  e << 0, 0, 2, 0;  // centroid (1,0)
  s << 0, 4, 2, 4;  // centroid (1,4)
  std::map<Modality, Eigen::MatrixXd> single{{Modality::edge, e}, {Modality::sketch, s}};
  Eigen::MatrixXd at_centroid(3, 2);
  at_centroid << 1, 0, 1, 0, 1, 4;
  EXPECT_NEAR(feature_pull_statistic(single, at_centroid), 0.0, 1e-12);
  Eigen::MatrixXd mid(1, 2);
  mid << 1, 2;
  EXPECT_NEAR(feature_pull_statistic(single, mid), 0.5, 1e-12);
}

TEST(FeaturePull, NeedsTwoModalities) {
  std::map<Modality, Eigen::MatrixXd> single{{Modality::edge, Eigen::MatrixXd::Random(3, 2)}};
  EXPECT_THROW(feature_pull_statistic(single, Eigen::MatrixXd::Zero(2, 2)), std::invalid_argument);
}

TEST(Evaluate, PreservationAndDeterminism) {
  WorldConfig w;
  w.size = 16;
  std::vector<CompletionCase> cases;
  for (std::uint64_t s = 11000; s < 11006; ++s) cases.push_back(make_case(s, w));
  std::vector<Tensor<float>> known, masks, latents;
  Rng rng(6);
  for (const auto& c : cases) {
    known.push_back(c.scene.image.reshaped({1, 1, 16, 16}));
    masks.push_back(c.mask.reshaped({1, 1, 16, 16}));
    latents.push_back(normal_tensor<float>({1, 1, 16, 16}, rng));
  }
  const Tensor<float> completed = composite(stack_batch<float>(known), stack_batch<float>(masks), stack_batch<float>(latents));
  FeatureExtractor fx(1);
  Tensor<float> ref_images = stack_batch<float>(known);
  const Eigen::MatrixXd ref = fx.embed(ref_images);
  const MetricReport a = evaluate_outputs(completed, cases, fx, true, ref, w);
  const MetricReport b = evaluate_outputs(completed, cases, fx, false, ref, w);
  EXPECT_TRUE(a.preservation_exact);
  EXPECT_TRUE(a.fid_valid);
  EXPECT_FALSE(b.fid_valid);
  EXPECT_EQ(a.toy_fid, b.toy_fid);
  EXPECT_EQ(a.edge_f1, b.edge_f1);
  EXPECT_EQ(a.n_samples, 6);
  EXPECT_NEAR(evaluate_outputs(ref_images, cases, fx, true, ref, w).toy_fid, 0.0, 1e-6);

  Tensor<float> broken = completed;
  for (std::int64_t i = 0; i < broken.numel(); ++i) {
    if (stack_batch<float>(masks)[i] == 0.0f) {
      broken[i] += 1e-3f;
      break;
    }
  }
  EXPECT_FALSE(evaluate_outputs(broken, cases, fx, true, ref, w).preservation_exact);
}

TEST(Evaluate, CsvHeaderIsFixed) {
  MetricReport r;
  r.run = "x";
  const std::string header = metric_csv_header();
  const std::string row = metric_csv_row(r);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
}

TEST(Bootstrap, CoversTheMean) {
  std::vector<double> v;
  Rng rng(7);
  for (int i = 0; i < 200; ++i) v.push_back(rng.normal() + 2.0);
  const Interval a = bootstrap_mean(v, 0.95, 2000, 3);
  EXPECT_LT(a.lo, a.estimate);
  EXPECT_GT(a.hi, a.estimate);
  EXPECT_LT(a.lo, 2.0 + 0.3);
  EXPECT_GT(a.hi, 2.0 - 0.3);
  const Interval b = bootstrap_mean(v, 0.95, 2000, 3);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  // half-width near 1.96 standard errors
  EXPECT_NEAR((a.hi - a.lo) / 2, 1.96 / std::sqrt(200.0), 0.04);
}

TEST(Extractor, ShortTrainingImprovesAccuracy) {
  WorldConfig w;
  w.size = 16;
  FeatureExtractor fx(3);
  const double before = extractor_accuracy(fx, w, Split::val, 200);
  Adam adam(fx.parameters(), AdamConfig{1e-3});
  ExtractorTrainConfig cfg;
  cfg.steps = 300;
  cfg.seed = 4;
  train_extractor(fx, adam, w, cfg);
  const double after = extractor_accuracy(fx, w, Split::val, 200);
  EXPECT_GT(after, before);
  EXPECT_GT(after, 0.5);
  EXPECT_EQ(fx.embed(scene_images({generate_scene(1, w)})).cols(), FeatureExtractor::kFeatureDim);
}
