#include "magic/eval.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace magic {

FeatureExtractor::FeatureExtractor(std::uint64_t seed) {
  Rng rng(seed, 0x66656174);  // "feat"
  const int plan[][3] = {{1, 16, 0}, {16, 16, 1}, {16, 32, 0}, {32, 32, 1}, {32, 64, 0}, {64, 64, 0}};
  int k = 0;
  for (const auto& p : plan) {
    Conv c;
    const std::string name = "fx.conv" + std::to_string(k++);
    c.w = params_.add_fan_in(name + ".w", Shape{p[1], p[0], 3, 3}, static_cast<std::int64_t>(p[0]) * 9, rng);
    c.b = params_.add_zeros(name + ".b", Shape{p[1]});
    c.down = p[2] != 0;
    convs_.push_back(c);
  }
  head_w_ = params_.add_fan_in("fx.head.w", Shape{kClasses, kFeatureDim}, kFeatureDim, rng);
  head_b_ = params_.add_zeros("fx.head.b", Shape{kClasses});
}

Var<float> FeatureExtractor::features(const Var<float>& images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 1) throw ShapeError("feature extractor: expected [B,1,S,S], got " + shape_str(s));
  // centre the [0,1] input
  Var<float> h = add(scale(images, 2.0f), Var<float>::leaf(Tensor<float>::scalar(-1.0f)));
  for (const auto& c : convs_) {
    h = relu(conv2d(h, c.w, c.b, 1, 1));
    if (c.down) h = resample(h, ResampleDirection::down);
  }
  return spatial_mean(h);
}

Var<float> FeatureExtractor::logits(const Var<float>& images) const {
  return linear(features(images), head_w_, head_b_);
}

Eigen::MatrixXd FeatureExtractor::embed(const Tensor<float>& images) const {
  return to_matrix(features(Var<float>::leaf(images)).value());
}

std::vector<int> FeatureExtractor::predict(const Tensor<float>& images) const {
  const Tensor<float> lg = logits(Var<float>::leaf(images)).value();
  std::vector<int> out;
  for (std::int64_t b = 0; b < lg.dim(0); ++b) {
    const float* row = lg.ptr() + b * kClasses;
    out.push_back(static_cast<int>(std::max_element(row, row + kClasses) - row));
  }
  return out;
}

Tensor<float> scene_images(const std::vector<Scene>& scenes) {
  std::vector<Tensor<float>> imgs;
  for (const auto& s : scenes) imgs.push_back(s.image);
  return stack_batch<float>(std::span<const Tensor<float>>(imgs.data(), imgs.size()));
}

void train_extractor(FeatureExtractor& fx, Adam& adam, const WorldConfig& world, const ExtractorTrainConfig& cfg,
                     const StepCallback& on_step) {
  const SeedRange range = split_range(Split::train);
  for (int step = adam.steps_taken(); step < cfg.steps; ++step) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)), 0x6678);
    std::vector<Scene> scenes;
    std::vector<int> labels;
    for (int b = 0; b < cfg.batch; ++b) {
      scenes.push_back(generate_scene(range.first + rng.next_u64() % range.count, world));
      labels.push_back(scenes.back().class_count_label);
    }
    Tape<float> tape;
    auto scope = tape.activate();
    const Var<float> loss = cross_entropy(fx.logits(Var<float>::leaf(scene_images(scenes))), labels);
    tape.backward(loss);
    adam.step();
    if (on_step) on_step(step, static_cast<double>(loss.value().item()));
  }
}

double extractor_accuracy(const FeatureExtractor& fx, const WorldConfig& world, Split split, int count) {
  const SeedRange range = split_range(split);
  if (count < 1 || static_cast<std::uint64_t>(count) > range.count) throw std::invalid_argument("accuracy: bad count");
  int correct = 0;
  for (int first = 0; first < count; first += 64) {
    std::vector<Scene> scenes;
    for (int i = first; i < std::min(count, first + 64); ++i) scenes.push_back(generate_scene(range.first + i, world));
    const auto pred = fx.predict(scene_images(scenes));
    for (std::size_t i = 0; i < scenes.size(); ++i) correct += pred[i] == scenes[i].class_count_label;
  }
  return static_cast<double>(correct) / count;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m, double tol) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw std::runtime_error("symmetric_sqrt: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol * scale) throw std::runtime_error("symmetric_sqrt: matrix is not positive semi-definite");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("frechet_distance: need at least 2 rows per set");
  if (a.cols() != b.cols()) throw std::invalid_argument("frechet_distance: column counts differ");
  const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
  const Eigen::MatrixXd ca = a.rowwise() - ma, cb = b.rowwise() - mb;
  const Eigen::MatrixXd sa = (ca.transpose() * ca) / static_cast<double>(a.rows() - 1);
  const Eigen::MatrixXd sb = (cb.transpose() * cb) / static_cast<double>(b.rows() - 1);
  const Eigen::MatrixXd ra = symmetric_sqrt(sa);
  Eigen::MatrixXd inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = symmetric_sqrt(inner).trace();
  const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

GuidanceTruth guidance_truth(const Scene& scene, const WorldConfig& world) {
  return GuidanceTruth{scene.image, edge_map(scene.image, world.edge_threshold), scene.seg, scene.depth};
}

std::optional<double> masked_f1(const Tensor<float>& predicted, const Tensor<float>& reference,
                                const Tensor<float>& mask) {
  if (predicted.shape() != reference.shape() || mask.shape() != reference.shape()) {
    throw ShapeError("masked_f1: shapes " + shape_str(predicted.shape()) + ", " + shape_str(reference.shape()) + ", " +
                     shape_str(mask.shape()));
  }
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] == 0.0f) continue;
    const bool p = predicted[i] != 0.0f, r = reference[i] != 0.0f;
    tp += p && r;
    fp += p && !r;
    fn += !p && r;
  }
  if (tp + fn == 0) return std::nullopt;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

std::vector<int> classify_intensity(const Tensor<float>& image) {
  std::vector<int> out(static_cast<std::size_t>(image.numel()));
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    int best = 0;
    for (int k = 1; k < kSegClasses; ++k) {
      if (std::abs(image[i] - kClassLevel[k]) < std::abs(image[i] - kClassLevel[best])) best = k;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

Tensor<float> depth_proxy(const Tensor<float>& image) {
  const auto cls = classify_intensity(image);
  Tensor<float> out(image.shape());
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    const int k = cls[static_cast<std::size_t>(i)];
    if (k == 0) continue;
    out[i] = static_cast<float>(std::clamp((image[i] - kClassLevel[k]) / kDepthGain + 0.5, 0.0, 1.0));
  }
  return out;
}

Fidelity guidance_fidelity(const Tensor<float>& output, const GuidanceTruth& truth, const Tensor<float>& mask,
                           const WorldConfig& world) {
  if (output.shape() != mask.shape() || truth.edge.shape() != mask.shape() || truth.image.shape() != mask.shape() ||
      static_cast<std::int64_t>(truth.seg.size()) != mask.numel()) {
    throw ShapeError("guidance_fidelity: output " + shape_str(output.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  Fidelity f;
  std::int64_t masked = 0;
  for (float v : mask.data()) masked += v != 0.0f;
  if (masked == 0) return f;
  Tensor<float> view = truth.image;
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0f) view[i] = output[i];
  }
  f.edge_f1 = masked_f1(edge_map(view, world.edge_threshold), truth.edge, mask);

  const auto pred = classify_intensity(view);
  std::int64_t inter[kSegClasses] = {}, uni[kSegClasses] = {};
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] == 0.0f) continue;
    const int p = pred[static_cast<std::size_t>(i)], g = truth.seg[static_cast<std::size_t>(i)];
    if (p == g) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[g];
    }
  }
  double iou = 0;
  int classes = 0;
  for (int k = 0; k < kSegClasses; ++k) {
    if (uni[k] == 0) continue;
    iou += static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
    ++classes;
  }
  f.seg_iou = iou / classes;

  const Tensor<float> dp = depth_proxy(view);
  double err = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0f) err += std::abs(static_cast<double>(dp[i]) - truth.depth[i]);
  }
  f.depth_mae = err / static_cast<double>(masked);
  return f;
}

double feature_pull_statistic(const std::map<Modality, Eigen::MatrixXd>& single, const Eigen::MatrixXd& blended) {
  if (single.size() < 2) throw std::invalid_argument("feature_pull_statistic: need at least two modalities");
  if (blended.rows() < 1) throw std::invalid_argument("feature_pull_statistic: no blended rows");
  std::vector<Eigen::RowVectorXd> centroids;
  for (const auto& [m, feats] : single) {
    if (feats.rows() < 2) throw std::invalid_argument("feature_pull_statistic: each modality needs >= 2 rows");
    if (feats.cols() != blended.cols()) throw std::invalid_argument("feature_pull_statistic: column counts differ");
    centroids.push_back(feats.colwise().mean());
  }
  double spread = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < centroids.size(); ++i)
    for (std::size_t j = i + 1; j < centroids.size(); ++j) {
      spread += (centroids[i] - centroids[j]).norm();
      ++pairs;
    }
  spread /= pairs;
  if (!(spread > 0.0)) throw std::invalid_argument("feature_pull_statistic: coincident centroids");
  double total = 0;
  for (Eigen::Index r = 0; r < blended.rows(); ++r) {
    double best = INFINITY;
    for (const auto& c : centroids) best = std::min(best, (blended.row(r) - c).norm());
    total += best;
  }
  return total / static_cast<double>(blended.rows()) / spread;
}

Eigen::MatrixXd to_matrix(const Tensor<float>& rows) {
  if (rows.rank() != 2) throw ShapeError("to_matrix: expected rank 2, got " + shape_str(rows.shape()));
  Eigen::MatrixXd m(rows.dim(0), rows.dim(1));
  for (std::int64_t r = 0; r < rows.dim(0); ++r)
    for (std::int64_t c = 0; c < rows.dim(1); ++c) m(r, c) = rows[r * rows.dim(1) + c];
  return m;
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<std::int64_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

MetricReport evaluate_outputs(const Tensor<float>& completed, const std::vector<CompletionCase>& cases,
                              const FeatureExtractor& fx, bool extractor_valid, const Eigen::MatrixXd& reference,
                              const WorldConfig& world) {
  const auto B = static_cast<std::int64_t>(cases.size());
  if (completed.rank() != 4 || completed.dim(0) != B) {
    throw ShapeError("evaluate: " + std::to_string(B) + " cases but outputs " + shape_str(completed.shape()));
  }
  MetricReport r;
  r.n_samples = static_cast<int>(B);
  double e = 0, s = 0, d = 0;
  int ns = 0, nd = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& c = cases[static_cast<std::size_t>(b)];
    const Tensor<float> out = batch_slice(completed, b).reshaped(c.mask.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      if (c.mask[i] == 0.0f && std::memcmp(&out[i], &c.scene.image[i], sizeof(float)) != 0) r.preservation_exact = false;
    }
    const Fidelity f = guidance_fidelity(out, guidance_truth(c.scene, world), c.mask, world);
    if (f.edge_f1) {
      e += *f.edge_f1;
      ++r.edge_cases;
    }
    if (f.seg_iou) {
      s += *f.seg_iou;
      ++ns;
    }
    if (f.depth_mae) {
      d += *f.depth_mae;
      ++nd;
    }
    r.per_sample.push_back(f);
  }
  r.edge_f1 = r.edge_cases ? e / r.edge_cases : 0.0;
  r.seg_iou = ns ? s / ns : 0.0;
  r.depth_mae = nd ? d / nd : 0.0;
  if (B >= 2) r.toy_fid = frechet_distance(fx.embed(completed), reference);
  r.fid_valid = extractor_valid && B >= 2;
  return r;
}

std::string metric_csv_header() {
  return "run,n_samples,toy_fid,fid_valid,edge_f1,edge_cases,seg_iou,depth_mae,preservation_exact,config_digest";
}

std::string metric_csv_row(const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.run << ',' << r.n_samples << ',' << r.toy_fid << ',' << (r.fid_valid ? 1 : 0) << ',' << r.edge_f1 << ','
     << r.edge_cases << ',' << r.seg_iou << ',' << r.depth_mae << ',' << (r.preservation_exact ? 1 : 0) << ','
     << r.config_digest;
  return os.str();
}

std::string metric_summary(const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "run = " << r.run << "\nn_samples = " << r.n_samples << "\ntoy_fid = " << r.toy_fid
     << "\nfid_valid = " << (r.fid_valid ? "true" : "false") << "\nedge_f1 = " << r.edge_f1
     << "\nedge_cases = " << r.edge_cases << "\nseg_iou = " << r.seg_iou << "\ndepth_mae = " << r.depth_mae
     << "\npreservation_exact = " << (r.preservation_exact ? "true" : "false") << "\nconfig_digest = " << r.config_digest
     << '\n';
  return os.str();
}

Interval bootstrap_statistic(std::int64_t n, const std::function<double(const std::vector<std::int64_t>&)>& stat,
                             double level, int replicates, std::uint64_t seed) {
  if (n < 1 || replicates < 10 || !(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap: bad arguments");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Interval out;
  out.estimate = stat(idx);
  Rng rng(seed, 0x626f6f74);  // "boot"
  std::vector<double> draws;
  draws.reserve(static_cast<std::size_t>(replicates));
  for (int r = 0; r < replicates; ++r) {
    for (auto& i : idx) i = static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(n));
    draws.push_back(stat(idx));
  }
  std::sort(draws.begin(), draws.end());
  const double tail = (1.0 - level) / 2.0;
  auto q = [&](double p) {
    const double pos = p * (replicates - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, draws.size() - 1);
    return draws[lo] + (pos - std::floor(pos)) * (draws[hi] - draws[lo]);
  };
  out.lo = q(tail);
  out.hi = q(1.0 - tail);
  return out;
}

Interval bootstrap_mean(const std::vector<double>& values, double level, int replicates, std::uint64_t seed) {
  return bootstrap_statistic(
      static_cast<std::int64_t>(values.size()),
      [&](const std::vector<std::int64_t>& idx) {
        double s = 0;
        for (auto i : idx) s += values[static_cast<std::size_t>(i)];
        return s / static_cast<double>(idx.size());
      },
      level, replicates, seed);
}

}  // namespace magic
