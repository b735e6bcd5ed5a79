#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "magic/mcu.hpp"
#include "magic/schedule.hpp"
#include "magic/train.hpp"

namespace magic {

enum class QMode { literal, time_travel };
QMode parse_q_mode(const std::string& s);
std::string q_mode_name(QMode m);

struct CMBConfig {
  int P = 30;
  int Q = 5;
  double gamma = 0.01;
  double eta = 1.0;        // DDIM eta inside the guided window
  double plain_eta = 0.0;  // DDIM eta for the remaining steps
  std::map<Modality, double> delta;  // modalities not listed weigh 1.0
  QMode q_mode = QMode::time_travel;
  bool normalize_grad = false;

  double weight(Modality m) const;
  void validate(int sample_count) const;
};

/// A batch of completion problems. All tensors are batched along dim 0.
struct CompletionBatch {
  Tensor<float> known_image;   // [B,1,S,S] image values; only unmasked pixels are used
  Tensor<float> mask;          // [B,1,S,S], 1 = complete
  Tensor<float> masked_latent; // [B,1,S,S], latent of the known pixels, 0 under the mask
  std::vector<int> class_ids;  // empty: no class-label conditioning
  std::vector<std::uint64_t> seeds;
  std::map<Modality, Tensor<float>> conds;  // [B,K,S,S]

  std::int64_t size() const { return mask.numel() == 0 ? 0 : mask.dim(0); }
  CompletionBatch slice(std::int64_t first, std::int64_t count) const;
};

/// Batch from test cases. Spatial modalities get condition maps from the
/// scene; class_label attaches the shape count as class id.
CompletionBatch make_completion_batch(const std::vector<CompletionCase>& cases, const std::vector<Modality>& modalities,
                                      const WorldConfig& world, const std::vector<std::uint64_t>& seeds);

struct StepRecord {
  int t = 0;
  int t_prev = 0;
  double sigma = 0.0;
  bool guided = false;
  double loss_before = 0.0;  // at the first inner iteration
  double loss_after = 0.0;   // probe after the last update, same t, no renoise
  double grad_norm = 0.0;    // of the last inner iteration
  std::vector<double> inner_loss;   // loss at each inner iteration's z_t
  std::vector<double> inner_probe;  // loss after that iteration's update, same t
  std::string warning;
};

struct SampleTrace {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
};

struct SampleOptions {
  int capture_index = -1;  // sampling step whose features are captured (-1: none)
  int capture_scale = 1;
  int chunk = 16;          // samples per forward call
};

struct SampleResult {
  Tensor<float> latent;     // [B,1,S,S], final z_0
  Tensor<float> completed;  // [B,1,S,S], composited image
  std::vector<SampleTrace> traces;
  Tensor<float> captured;   // [B,D] when capture_index >= 0
};

/// Sum over scales of sum over modalities of weight * ||guided - base||^2,
/// divided by the scale count. `guided` is treated as constant.
template <typename T>
Var<T> guidance_loss(const std::vector<std::vector<Tensor<T>>>& guided, const std::vector<Var<T>>& base,
                     const std::vector<double>& weights);

/// Value and latent gradient of the guidance loss for one backbone call.
template <typename T>
std::pair<T, Tensor<T>> guidance_gradient(const Denoiser<T>& backbone, const DenoiserInput<T>& input,
                                          const std::vector<std::vector<Tensor<T>>>& guided,
                                          const std::vector<double>& weights);

SampleResult sample_unguided(const Denoiser<float>& backbone, const CompletionBatch& batch,
                             const NoiseSchedule& sched, double eta, const SampleOptions& opts = {});

SampleResult sample_single(const MCUNet<float>& net, const CompletionBatch& batch, const NoiseSchedule& sched,
                           double eta, const SampleOptions& opts = {});

/// Sums every modality's signals into the backbone for the first `fla_steps` steps.
SampleResult sample_fla(const Denoiser<float>& backbone, const std::vector<const MCUNet<float>*>& nets,
                        const CompletionBatch& batch, int fla_steps, const NoiseSchedule& sched, double eta,
                        const SampleOptions& opts = {});

SampleResult sample_cmb(const Denoiser<float>& backbone, const std::vector<const MCUNet<float>*>& nets,
                        const CompletionBatch& batch, const CMBConfig& cfg, const NoiseSchedule& sched,
                        const SampleOptions& opts = {});

/// Latents of one CMB chain.
struct CMBState {
  Tensor<float> z;
  std::vector<Tensor<float>> w;  // one per net
  std::vector<Rng> z_rng;        // one per sample
  std::vector<std::vector<Rng>> w_rng;  // [net][sample]
};

CMBState init_cmb_state(const CompletionBatch& batch, const std::vector<const MCUNet<float>*>& nets);

/// One guided step at sampling index `index`; advances `state` in place and
/// returns one record per sample.
std::vector<StepRecord> cmb_step(CMBState& state, int index, const Denoiser<float>& backbone,
                                 const std::vector<const MCUNet<float>*>& nets,
                                 const std::vector<std::vector<Var<float>>>& signals, const CompletionBatch& batch,
                                 const CMBConfig& cfg, const NoiseSchedule& sched,
                                 std::vector<Tensor<float>>* base_features = nullptr);

/// Composite: known pixels where mask = 0, decoded latent where mask = 1.
Tensor<float> composite(const Tensor<float>& known_image, const Tensor<float>& mask, const Tensor<float>& latent);

/// Per-sample standard normal draws, sample i from rngs[i].
Tensor<float> batched_normal(const Shape& shape, std::vector<Rng>& rngs);

}  // namespace magic
