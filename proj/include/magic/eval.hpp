#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "magic/train.hpp"

namespace magic {

/// Small convolutional classifier of the shape count; its 64-wide pooled
/// penultimate layer is the feature space for the Frechet distance.
class FeatureExtractor {
 public:
  static constexpr int kFeatureDim = 64;
  static constexpr int kClasses = 4;

  explicit FeatureExtractor(std::uint64_t seed);

  /// Images in [0,1], shape [B,1,S,S].
  Var<float> features(const Var<float>& images) const;
  Var<float> logits(const Var<float>& images) const;
  Eigen::MatrixXd embed(const Tensor<float>& images) const;
  std::vector<int> predict(const Tensor<float>& images) const;

  ParameterSet<float>& parameters() { return params_; }
  const ParameterSet<float>& parameters() const { return params_; }

 private:
  struct Conv {
    Var<float> w, b;
    bool down = false;
  };
  ParameterSet<float> params_;
  std::vector<Conv> convs_;
  Var<float> head_w_, head_b_;
};

struct ExtractorTrainConfig {
  int steps = 3000;
  int batch = 32;
  AdamConfig adam{1e-3};
  std::uint64_t seed = 0;
};

void train_extractor(FeatureExtractor& fx, Adam& adam, const WorldConfig& world, const ExtractorTrainConfig& cfg,
                     const StepCallback& on_step = {});

/// Accuracy over `count` scenes of a split, starting at its first seed.
double extractor_accuracy(const FeatureExtractor& fx, const WorldConfig& world, Split split, int count);

/// Stacked [B,1,S,S] images of scenes.
Tensor<float> scene_images(const std::vector<Scene>& scenes);

/// Frechet distance between Gaussians fitted to the rows of a and b
/// (unbiased covariances, symmetric matrix square roots).
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Symmetric positive semi-definite square root; eigenvalues below zero
/// (down to -tol relative to the largest) are clipped.
Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m, double tol = 1e-8);

/// Ground truth used to score one completion.
struct GuidanceTruth {
  Tensor<float> image;     // [1,S,S], supplies the known pixels
  Tensor<float> edge;      // [1,S,S] binary
  std::vector<int> seg;    // S*S ids
  Tensor<float> depth;     // [1,S,S]
};
GuidanceTruth guidance_truth(const Scene& scene, const WorldConfig& world);

struct Fidelity {
  std::optional<double> edge_f1;    // absent without guidance edges under the mask
  std::optional<double> seg_iou;    // absent for an empty mask
  std::optional<double> depth_mae;  // absent for an empty mask
};

/// Scores the masked region of `output` ([1,S,S] in [0,1]) against the
/// guidance. Unmasked pixels are taken from the truth image, so they cannot
/// influence the scores (edges near the mask border read both sides).
Fidelity guidance_fidelity(const Tensor<float>& output, const GuidanceTruth& truth, const Tensor<float>& mask,
                           const WorldConfig& world);

/// F1 of a predicted binary map against a reference inside the mask;
/// absent when the reference has no positives there.
std::optional<double> masked_f1(const Tensor<float>& predicted, const Tensor<float>& reference,
                                const Tensor<float>& mask);

/// Nearest class level per pixel.
std::vector<int> classify_intensity(const Tensor<float>& image);
/// Depth implied by the intensity offset from the nearest class level.
Tensor<float> depth_proxy(const Tensor<float>& image);

/// Mean distance from blended rows to the nearest single-modality centroid,
/// divided by the mean distance between centroids.
double feature_pull_statistic(const std::map<Modality, Eigen::MatrixXd>& single, const Eigen::MatrixXd& blended);

struct MetricReport {
  std::string run;
  int n_samples = 0;
  double toy_fid = 0.0;
  bool fid_valid = false;
  double edge_f1 = 0.0;
  double seg_iou = 0.0;
  double depth_mae = 0.0;
  int edge_cases = 0;  // samples with a defined edge F1
  bool preservation_exact = true;
  std::string config_digest;
  std::vector<Fidelity> per_sample;
};

/// Full report for completed images [B,1,S,S] of `cases`, against the
/// reference feature set.
MetricReport evaluate_outputs(const Tensor<float>& completed, const std::vector<CompletionCase>& cases,
                              const FeatureExtractor& fx, bool extractor_valid, const Eigen::MatrixXd& reference,
                              const WorldConfig& world);

std::string metric_csv_header();
std::string metric_csv_row(const MetricReport& r);
std::string metric_summary(const MetricReport& r);

struct Interval {
  double estimate = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean, two-sided at `level`.
Interval bootstrap_mean(const std::vector<double>& values, double level, int replicates, std::uint64_t seed);

/// Percentile bootstrap of a statistic of resampled row indices.
Interval bootstrap_statistic(std::int64_t n, const std::function<double(const std::vector<std::int64_t>&)>& stat,
                             double level, int replicates, std::uint64_t seed);

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<std::int64_t>& rows);
Eigen::MatrixXd to_matrix(const Tensor<float>& rows);

}  // namespace magic
