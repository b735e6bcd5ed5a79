#include "magic/train.hpp"

#include <cmath>
#include <stdexcept>

namespace magic {

Adam::Adam(ParameterSet<float>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  for (const auto& [name, var] : params) {
    m_.emplace_back(var.shape());
    v_.emplace_back(var.shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  std::size_t i = 0;
  for (const auto& [name, var] : *params_) {
    auto& m = m_[i];
    auto& v = v_[i];
    ++i;
    if (!var.requires_grad() || !var.has_grad()) continue;
    Var<float> leaf = var;
    float* w = leaf.mutable_value().ptr();
    const float* g = leaf.grad().ptr();
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (std::int64_t k = 0; k < m.numel(); ++k) {
      m[k] = b1 * m[k] + (1.0f - b1) * g[k];
      v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      w[k] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    leaf.zero_grad();
  }
}

void Adam::save(Checkpoint& ckpt) const {
  std::size_t i = 0;
  for (const auto& [name, var] : *params_) {
    ckpt.put("adam.m." + name, m_[i]);
    ckpt.put("adam.v." + name, v_[i]);
    ++i;
  }
  ckpt.metadata["adam.step"] = std::to_string(t_);
}

void Adam::load(const Checkpoint& ckpt) {
  std::size_t i = 0;
  for (const auto& [name, var] : *params_) {
    const auto& m = ckpt.get<float>("adam.m." + name);
    const auto& v = ckpt.get<float>("adam.v." + name);
    if (m.shape() != var.shape() || v.shape() != var.shape()) {
      throw std::runtime_error("adam: moment shape mismatch for " + name);
    }
    m_[i] = m;
    v_[i] = v;
    ++i;
  }
  t_ = std::stoi(ckpt.meta("adam.step"));
}

CompletionCase make_case(std::uint64_t scene_seed, const WorldConfig& world) {
  CompletionCase c;
  c.scene = generate_scene(scene_seed, world);
  c.mask = generate_mask(random_mask_spec(scene_seed), world.size);
  c.latent = to_latent(c.scene.image);
  c.masked_latent = Tensor<float>(c.latent.shape());
  for (std::int64_t i = 0; i < c.latent.numel(); ++i) c.masked_latent[i] = c.latent[i] * (1.0f - c.mask[i]);
  return c;
}

TrainBatch make_train_batch(const WorldConfig& world, const NoiseSchedule& sched, const TrainConfig& cfg,
                            std::uint64_t index, std::optional<Modality> modality, bool with_classes) {
  if (cfg.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  const SeedRange range = split_range(cfg.split);
  if (range.count == 0) throw std::invalid_argument("train: empty dataset split");
  Rng rng(mix_seed(cfg.seed, cfg.fixed_batch ? 0 : index), 0x6261746368);  // "batch"
  const int S = world.size;
  const int B = cfg.batch;
  const int K = modality ? modality_channels(*modality) : 0;
  TrainBatch tb;
  tb.x0 = Tensor<float>(Shape{B, 1, S, S});
  tb.mask = Tensor<float>(Shape{B, 1, S, S});
  tb.masked_image = Tensor<float>(Shape{B, 1, S, S});
  if (K > 0) tb.cond = Tensor<float>(Shape{B, K, S, S});
  std::vector<int> ids;
  bool any_id = false;
  const std::int64_t plane = static_cast<std::int64_t>(S) * S;
  for (int b = 0; b < B; ++b) {
    const std::uint64_t scene_seed = range.first + static_cast<std::uint64_t>(rng.next_u64() % range.count);
    const Scene scene = generate_scene(scene_seed, world);
    MaskSpec spec;
    spec.ratio = rng.uniform();
    spec.mode = static_cast<MaskMode>(rng.uniform_int(0, 2));
    spec.seed = rng.next_u64();
    const Tensor<float> mask = generate_mask(spec, S);
    const Tensor<float> lat = to_latent(scene.image);
    for (std::int64_t i = 0; i < plane; ++i) {
      tb.x0[b * plane + i] = lat[i];
      tb.mask[b * plane + i] = mask[i];
      tb.masked_image[b * plane + i] = lat[i] * (1.0f - mask[i]);
    }
    if (K > 0) {
      const Tensor<float> c = extract_modality(scene, *modality, world);
      std::copy(c.ptr(), c.ptr() + c.numel(), tb.cond.ptr() + b * K * plane);
    }
    tb.timesteps.push_back(rng.uniform_int(1, sched.train_steps));
    const bool keep = rng.uniform() >= cfg.class_dropout;
    ids.push_back(keep ? scene.class_count_label : -1);
    any_id = any_id || keep;
  }
  tb.noise = Tensor<float>(Shape{B, 1, S, S});
  rng.fill_normal(tb.noise.data());
  if (with_classes && any_id) tb.class_ids = ids;  // -1 marks a dropped id
  return tb;
}

namespace {

Tensor<float> noised(const NoiseSchedule& sched, const TrainBatch& batch) {
  Tensor<float> z(batch.x0.shape());
  const std::int64_t per = batch.x0.numel() / batch.x0.dim(0);
  for (std::int64_t b = 0; b < batch.x0.dim(0); ++b) {
    const double a = sched.alpha(batch.timesteps[static_cast<std::size_t>(b)]);
    const auto sa = static_cast<float>(std::sqrt(a)), sb = static_cast<float>(std::sqrt(1.0 - a));
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i) z[i] = sa * batch.x0[i] + sb * batch.noise[i];
  }
  return z;
}

DenoiserInput<float> make_input(const NoiseSchedule& sched, const TrainBatch& batch) {
  DenoiserInput<float> in;
  in.latent = Var<float>::leaf(noised(sched, batch));
  in.timesteps = batch.timesteps;
  in.mask = batch.mask;
  in.masked_image = batch.masked_image;
  in.class_ids = batch.class_ids;
  return in;
}

}  // namespace

double denoising_loss(const Denoiser<float>& net, const NoiseSchedule& sched, const TrainBatch& batch,
                      const std::vector<Var<float>>* injection) {
  const auto out = net.forward(make_input(sched, batch), injection);
  return static_cast<double>(mse(out.eps, batch.noise).value().item());
}

void train_backbone(Denoiser<float>& net, Adam& adam, const NoiseSchedule& sched, const WorldConfig& world,
                    const TrainConfig& cfg, const StepCallback& on_step) {
  const bool classes = net.config().cond_embed_classes > 0;
  for (int step = adam.steps_taken(); step < cfg.steps; ++step) {
    const TrainBatch batch = make_train_batch(world, sched, cfg, static_cast<std::uint64_t>(step), std::nullopt, classes);
    Tape<float> tape;
    auto scope = tape.activate();
    const auto out = net.forward(make_input(sched, batch));
    const Var<float> loss = mse(out.eps, batch.noise);
    tape.backward(loss);
    adam.step();
    if (on_step) on_step(step, static_cast<double>(loss.value().item()));
  }
}

void train_mcu(MCUNet<float>& net, Adam& adam, const NoiseSchedule& sched, const WorldConfig& world,
               const TrainConfig& cfg, const StepCallback& on_step) {
  const auto& backbone = net.backbone();
  for (const auto& [name, var] : backbone.parameters()) {
    if (var.requires_grad()) throw std::logic_error("train_mcu: backbone parameter " + name + " is not frozen");
  }
  const bool classes = backbone.config().cond_embed_classes > 0;
  for (int step = adam.steps_taken(); step < cfg.steps; ++step) {
    const TrainBatch batch =
        make_train_batch(world, sched, cfg, static_cast<std::uint64_t>(step), net.modality(), classes);
    Tape<float> tape;
    auto scope = tape.activate();
    const auto out = net.forward(make_input(sched, batch), Var<float>::leaf(batch.cond));
    const Var<float> loss = mse(out.eps, batch.noise);
    tape.backward(loss);
    adam.step();
    if (on_step) on_step(step, static_cast<double>(loss.value().item()));
  }
}

}  // namespace magic
