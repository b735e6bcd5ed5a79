#pragma once

#include <vector>

#include "magic/rng.hpp"
#include "magic/tensor.hpp"

namespace magic {

enum class ScheduleKind { linear };

/// Fixed variance schedule plus the strided timestep sub-sequence used at
/// inference. Timesteps are 1-based; alpha(0) == 1 is the clean boundary.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int train_steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;        // betas[s-1] for s in [1, train_steps]
  std::vector<double> alphas_cum;   // alphas_cum[t] for t in [0, train_steps]
  std::vector<int> sample_steps;    // strictly decreasing

  double alpha(int t) const;
  int sample_count() const { return static_cast<int>(sample_steps.size()); }
  /// Timestep that follows sample_steps[index] (0 after the last one).
  int predecessor(int index) const;
  /// True when t_prev directly follows t in the sampling sequence.
  bool is_predecessor(int t, int t_prev) const;
};

NoiseSchedule make_schedule(ScheduleKind kind, int train_steps, double beta_start, double beta_end,
                            int sample_steps);

/// Field defaults: linear betas 1e-4..0.02 over 1000 steps, 50 sampling steps.
NoiseSchedule default_schedule();

/// DDIM noise coefficient from the two cumulative alphas.
double ddim_sigma(double alpha_t, double alpha_prev, double eta);

/// Same, for a step of the schedule's sampling sequence.
double sigma_t(const NoiseSchedule& sched, int t, int t_prev, double eta);

template <typename T>
Tensor<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched);

/// One DDIM update with the stochastic term supplied explicitly.
template <typename T>
Tensor<T> ddim_step_with_noise(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, double eta,
                               const Tensor<T>* noise, const NoiseSchedule& sched);

/// One DDIM update; draws the stochastic term from `rng` only when sigma > 0.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, double eta, Rng& rng,
                    const NoiseSchedule& sched);

/// Re-noises a latent from level t_prev back up to level t.
template <typename T>
Tensor<T> renoise(const Tensor<T>& z_prev, int t, int t_prev, Rng& rng, const NoiseSchedule& sched);

/// Same, with the fresh noise supplied (unused when the two levels coincide).
template <typename T>
Tensor<T> renoise_with_noise(const Tensor<T>& z_prev, int t, int t_prev, const Tensor<T>* noise,
                             const NoiseSchedule& sched);

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, Rng& rng) {
  Tensor<T> out(shape);
  rng.fill_normal(out.data());
  return out;
}

/// Position within a sampling run.
template <typename T>
struct SamplerState {
  int t_index = 0;
  Tensor<T> latent;
  Rng rng;
};

}  // namespace magic
