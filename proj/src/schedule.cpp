#include "magic/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace magic {

double NoiseSchedule::alpha(int t) const {
  if (t < 0 || t > train_steps) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0," + std::to_string(train_steps) + "]");
  }
  return alphas_cum[static_cast<std::size_t>(t)];
}

int NoiseSchedule::predecessor(int index) const {
  if (index < 0 || index >= sample_count()) throw std::out_of_range("sample step index out of range");
  return index + 1 < sample_count() ? sample_steps[static_cast<std::size_t>(index + 1)] : 0;
}

bool NoiseSchedule::is_predecessor(int t, int t_prev) const {
  for (int i = 0; i < sample_count(); ++i) {
    if (sample_steps[static_cast<std::size_t>(i)] == t) return predecessor(i) == t_prev;
  }
  return false;
}

NoiseSchedule make_schedule(ScheduleKind kind, int train_steps, double beta_start, double beta_end,
                            int sample_steps) {
  if (train_steps < 1) throw std::invalid_argument("schedule: train_steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  }
  if (sample_steps < 1 || sample_steps > train_steps) {
    throw std::invalid_argument("schedule: sample_steps must lie in [1, train_steps]");
  }
  NoiseSchedule s;
  s.kind = kind;
  s.train_steps = train_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<std::size_t>(train_steps));
  s.alphas_cum.resize(static_cast<std::size_t>(train_steps) + 1);
  s.alphas_cum[0] = 1.0;
  for (int i = 0; i < train_steps; ++i) {
    const double frac = train_steps == 1 ? 0.0 : static_cast<double>(i) / (train_steps - 1);
    s.betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    s.alphas_cum[static_cast<std::size_t>(i) + 1] =
        s.alphas_cum[static_cast<std::size_t>(i)] * (1.0 - s.betas[static_cast<std::size_t>(i)]);
  }
  const int stride = train_steps / sample_steps;
  for (int k = 0; k < sample_steps; ++k) s.sample_steps.push_back(train_steps - k * stride);
  return s;
}

NoiseSchedule default_schedule() { return make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02, 50); }

double ddim_sigma(double alpha_t, double alpha_prev, double eta) {
  if (eta < 0.0) throw std::invalid_argument("ddim_sigma: eta must be non-negative");
  if (alpha_prev < alpha_t) throw std::invalid_argument("ddim_sigma: alpha ordering violated");
  if (eta == 0.0 || alpha_t == alpha_prev) return 0.0;
  return eta * std::sqrt((1.0 - alpha_prev) / (1.0 - alpha_t)) * std::sqrt(1.0 - alpha_t / alpha_prev);
}

double sigma_t(const NoiseSchedule& sched, int t, int t_prev, double eta) {
  if (!sched.is_predecessor(t, t_prev)) {
    throw std::invalid_argument("sigma_t: " + std::to_string(t_prev) + " is not the predecessor of " +
                                std::to_string(t) + " in the sampling sequence");
  }
  return ddim_sigma(sched.alpha(t), sched.alpha(t_prev), eta);
}

namespace {

void check_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void check_train_t(const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.train_steps) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1," + std::to_string(sched.train_steps) +
                            "]");
  }
}

}  // namespace

template <typename T>
Tensor<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  check_same(x0.shape(), eps.shape(), "forward_noise");
  check_train_t(sched, t);
  const double a = sched.alpha(t);
  const double ca = std::sqrt(a), ce = std::sqrt(1.0 - a);
  Tensor<T> out(x0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(ca * x0[i] + ce * eps[i]);
  return out;
}

template <typename T>
Tensor<T> ddim_step_with_noise(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, double eta,
                               const Tensor<T>* noise, const NoiseSchedule& sched) {
  check_same(z_t.shape(), eps_pred.shape(), "ddim_step");
  check_train_t(sched, t);
  const double a_t = sched.alpha(t);
  const double a_p = sched.alpha(t_prev);
  const double sigma = ddim_sigma(a_t, a_p, eta);
  double dir2 = 1.0 - a_p - sigma * sigma;
  if (dir2 < 0.0) {
    if (dir2 < -1e-12) {
      throw std::domain_error("ddim_step: 1 - alpha_prev - sigma^2 < 0 (t=" + std::to_string(t) +
                              ", t_prev=" + std::to_string(t_prev) + ", eta=" + std::to_string(eta) + ")");
    }
    dir2 = 0.0;
  }
  if (sigma > 0.0) {
    if (noise == nullptr) throw std::invalid_argument("ddim_step: sigma > 0 requires a noise tensor");
    check_same(z_t.shape(), noise->shape(), "ddim_step noise");
  }
  const double sa_t = std::sqrt(a_t), sa_p = std::sqrt(a_p), s1a_t = std::sqrt(1.0 - a_t), sdir = std::sqrt(dir2);
  Tensor<T> out(z_t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double e = eps_pred[i];
    const double x0 = (z_t[i] - s1a_t * e) / sa_t;
    double v = sa_p * x0 + sdir * e;
    if (sigma > 0.0) v += sigma * (*noise)[i];
    out[i] = static_cast<T>(v);
  }
  return out;
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, double eta, Rng& rng,
                    const NoiseSchedule& sched) {
  const double sigma = ddim_sigma(sched.alpha(t), sched.alpha(t_prev), eta);
  if (sigma > 0.0) {
    const Tensor<T> noise = normal_tensor<T>(z_t.shape(), rng);
    return ddim_step_with_noise(z_t, eps_pred, t, t_prev, eta, &noise, sched);
  }
  return ddim_step_with_noise<T>(z_t, eps_pred, t, t_prev, eta, nullptr, sched);
}

template <typename T>
Tensor<T> renoise_with_noise(const Tensor<T>& z_prev, int t, int t_prev, const Tensor<T>* noise,
                             const NoiseSchedule& sched) {
  const double a_t = sched.alpha(t);
  const double a_p = sched.alpha(t_prev);
  if (a_p < a_t) throw std::invalid_argument("renoise: alpha ordering violated");
  if (a_p == a_t) return z_prev;
  if (noise == nullptr) throw std::invalid_argument("renoise: a noise tensor is required");
  check_same(z_prev.shape(), noise->shape(), "renoise");
  const double ratio = a_t / a_p;
  const double c = std::sqrt(ratio), s = std::sqrt(1.0 - ratio);
  Tensor<T> out(z_prev.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(c * z_prev[i] + s * (*noise)[i]);
  return out;
}

template <typename T>
Tensor<T> renoise(const Tensor<T>& z_prev, int t, int t_prev, Rng& rng, const NoiseSchedule& sched) {
  if (sched.alpha(t_prev) == sched.alpha(t)) return renoise_with_noise<T>(z_prev, t, t_prev, nullptr, sched);
  const Tensor<T> noise = normal_tensor<T>(z_prev.shape(), rng);
  return renoise_with_noise(z_prev, t, t_prev, &noise, sched);
}

#define MAGIC_INSTANTIATE_SCHEDULE(T)                                                                  \
  template Tensor<T> forward_noise(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);    \
  template Tensor<T> ddim_step_with_noise(const Tensor<T>&, const Tensor<T>&, int, int, double,       \
                                          const Tensor<T>*, const NoiseSchedule&);                    \
  template Tensor<T> ddim_step(const Tensor<T>&, const Tensor<T>&, int, int, double, Rng&,            \
                               const NoiseSchedule&);                                                  \
  template Tensor<T> renoise(const Tensor<T>&, int, int, Rng&, const NoiseSchedule&);                 \
  template Tensor<T> renoise_with_noise(const Tensor<T>&, int, int, const Tensor<T>*, const NoiseSchedule&);

MAGIC_INSTANTIATE_SCHEDULE(float)
MAGIC_INSTANTIATE_SCHEDULE(double)

}  // namespace magic
