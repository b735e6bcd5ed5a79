#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "magic/checkpoint.hpp"
#include "magic/mcu.hpp"
#include "magic/toyworld.hpp"

namespace magic {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over the trainable leaves of a parameter set. Moment buffers and the
/// step count can be stored in a checkpoint so resumed runs continue exactly.
class Adam {
 public:
  Adam(ParameterSet<float>& params, AdamConfig cfg);

  /// Applies one update from the current gradients, then clears them.
  void step();
  int steps_taken() const { return t_; }

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  ParameterSet<float>* params_;
  AdamConfig cfg_;
  int t_ = 0;
  std::vector<Tensor<float>> m_, v_;
};

struct TrainConfig {
  int steps = 20000;
  int batch = 32;
  AdamConfig adam;
  double class_dropout = 0.5;  // probability of training a sample without its class id
  bool fixed_batch = false;    // reuse batch 0 every step (overfit checks)
  std::uint64_t seed = 0;
  Split split = Split::train;
};

/// One completion example: scene, mask and the derived latents.
struct CompletionCase {
  Scene scene;
  Tensor<float> mask;          // [1,S,S]
  Tensor<float> latent;        // [1,S,S], clean image in latent range
  Tensor<float> masked_latent; // latent * (1 - mask)
};

/// Test-protocol case for a scene seed: ratio-uniform mask derived from the seed.
CompletionCase make_case(std::uint64_t scene_seed, const WorldConfig& world);

struct TrainBatch {
  Tensor<float> x0;            // [B,1,S,S]
  Tensor<float> mask;          // [B,1,S,S]
  Tensor<float> masked_image;  // [B,1,S,S]
  Tensor<float> noise;         // [B,1,S,S]
  Tensor<float> cond;          // [B,K,S,S] when a modality is requested
  std::vector<int> timesteps;
  std::vector<int> class_ids;  // empty when every id was dropped or classes are off
};

/// Batch `index` of a run; a pure function of (seed, index).
TrainBatch make_train_batch(const WorldConfig& world, const NoiseSchedule& sched, const TrainConfig& cfg,
                            std::uint64_t index, std::optional<Modality> modality, bool with_classes);

/// Mean squared noise-prediction error of the batch.
double denoising_loss(const Denoiser<float>& net, const NoiseSchedule& sched, const TrainBatch& batch,
                      const std::vector<Var<float>>* injection = nullptr);

using StepCallback = std::function<void(int step, double loss)>;

/// Runs steps [adam.steps_taken(), cfg.steps) of the masked denoising objective.
void train_backbone(Denoiser<float>& net, Adam& adam, const NoiseSchedule& sched, const WorldConfig& world,
                    const TrainConfig& cfg, const StepCallback& on_step = {});

/// Same objective through the guided forward; only the encoder is updated.
void train_mcu(MCUNet<float>& net, Adam& adam, const NoiseSchedule& sched, const WorldConfig& world,
               const TrainConfig& cfg, const StepCallback& on_step = {});

}  // namespace magic
