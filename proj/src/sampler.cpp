#include "magic/sampler.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "magic/parallel.hpp"

namespace magic {

QMode parse_q_mode(const std::string& s) {
  if (s == "literal") return QMode::literal;
  if (s == "time_travel") return QMode::time_travel;
  throw std::invalid_argument("unknown q_mode: " + s);
}

std::string q_mode_name(QMode m) { return m == QMode::literal ? "literal" : "time_travel"; }

double CMBConfig::weight(Modality m) const {
  auto it = delta.find(m);
  return it == delta.end() ? 1.0 : it->second;
}

void CMBConfig::validate(int sample_count) const {
  if (P < 0 || P > sample_count) {
    throw std::invalid_argument("cmb: P=" + std::to_string(P) + " outside [0," + std::to_string(sample_count) + "]");
  }
  if (Q < 1) throw std::invalid_argument("cmb: Q must be >= 1");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("cmb: gamma must be finite and >= 0");
  if (eta < 0.0 || plain_eta < 0.0) throw std::invalid_argument("cmb: eta must be >= 0");
  for (const auto& [m, d] : delta) {
    if (!(d >= 0.0)) throw std::invalid_argument("cmb: delta for " + std::string(modality_name(m)) + " must be >= 0");
  }
}

namespace {

Tensor<float> slice_rows(const Tensor<float>& t, std::int64_t first, std::int64_t count) {
  if (t.numel() == 0) return t;
  Shape shape = t.shape();
  const std::int64_t per = t.numel() / shape[0];
  shape[0] = count;
  return Tensor<float>(shape, std::vector<float>(t.ptr() + first * per, t.ptr() + (first + count) * per));
}

void append_rows(Tensor<float>& dst, const Tensor<float>& src) {
  if (src.numel() == 0) return;
  if (dst.numel() == 0) {
    dst = src;
    return;
  }
  Shape shape = dst.shape();
  shape[0] += src.dim(0);
  AlignedVector<float> data = dst.storage();
  data.insert(data.end(), src.data().begin(), src.data().end());
  dst = Tensor<float>(shape, std::move(data));
}

}  // namespace

CompletionBatch CompletionBatch::slice(std::int64_t first, std::int64_t count) const {
  CompletionBatch out;
  out.known_image = slice_rows(known_image, first, count);
  out.mask = slice_rows(mask, first, count);
  out.masked_latent = slice_rows(masked_latent, first, count);
  if (!class_ids.empty()) out.class_ids.assign(class_ids.begin() + first, class_ids.begin() + first + count);
  out.seeds.assign(seeds.begin() + first, seeds.begin() + first + count);
  for (const auto& [m, c] : conds) out.conds[m] = slice_rows(c, first, count);
  return out;
}

CompletionBatch make_completion_batch(const std::vector<CompletionCase>& cases, const std::vector<Modality>& modalities,
                                      const WorldConfig& world, const std::vector<std::uint64_t>& seeds) {
  if (cases.empty()) throw std::invalid_argument("completion batch: no cases");
  if (seeds.size() != cases.size()) throw std::invalid_argument("completion batch: one seed per case required");
  std::vector<Tensor<float>> known, masks, masked;
  std::map<Modality, std::vector<Tensor<float>>> conds;
  CompletionBatch b;
  for (const auto& c : cases) {
    known.push_back(c.scene.image);
    masks.push_back(c.mask);
    masked.push_back(c.masked_latent);
    for (Modality m : modalities) {
      if (m == Modality::class_label) continue;
      conds[m].push_back(extract_modality(c.scene, m, world));
    }
  }
  auto stack = [](const std::vector<Tensor<float>>& v) {
    return stack_batch<float>(std::span<const Tensor<float>>(v.data(), v.size()));
  };
  // stack_batch adds the leading axis to [C,S,S] items
  b.known_image = stack(known);
  b.mask = stack(masks);
  b.masked_latent = stack(masked);
  for (auto& [m, v] : conds) b.conds[m] = stack(v);
  for (Modality m : modalities) {
    if (m != Modality::class_label) continue;
    for (const auto& c : cases) b.class_ids.push_back(c.scene.class_count_label);
  }
  b.seeds = seeds;
  return b;
}

Tensor<float> composite(const Tensor<float>& known_image, const Tensor<float>& mask, const Tensor<float>& latent) {
  if (known_image.shape() != mask.shape() || latent.shape() != mask.shape()) {
    throw ShapeError("composite: shapes " + shape_str(known_image.shape()) + ", " + shape_str(mask.shape()) + ", " +
                     shape_str(latent.shape()));
  }
  const Tensor<float> decoded = from_latent(latent);
  Tensor<float> out(mask.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = mask[i] != 0.0f ? decoded[i] : known_image[i];
  return out;
}

Tensor<float> batched_normal(const Shape& shape, std::vector<Rng>& rngs) {
  if (shape.empty() || shape[0] != static_cast<std::int64_t>(rngs.size())) {
    throw ShapeError("batched_normal: " + std::to_string(rngs.size()) + " streams for shape " + shape_str(shape));
  }
  Tensor<float> out(shape);
  const std::int64_t per = out.numel() / shape[0];
  for (std::size_t b = 0; b < rngs.size(); ++b) {
    rngs[b].fill_normal(std::span<float>(out.ptr() + static_cast<std::int64_t>(b) * per, static_cast<std::size_t>(per)));
  }
  return out;
}

template <typename T>
Var<T> guidance_loss(const std::vector<std::vector<Tensor<T>>>& guided, const std::vector<Var<T>>& base,
                     const std::vector<double>& weights) {
  if (guided.size() != weights.size()) {
    throw std::invalid_argument("guidance_loss: " + std::to_string(guided.size()) + " feature sets but " +
                                std::to_string(weights.size()) + " weights");
  }
  if (base.empty()) throw ShapeError("guidance_loss: no feature scales");
  Var<T> total;
  for (std::size_t c = 0; c < guided.size(); ++c) {
    if (guided[c].size() != base.size()) {
      throw ShapeError("guidance_loss: modality " + std::to_string(c) + " has " + std::to_string(guided[c].size()) +
                       " scales, base has " + std::to_string(base.size()));
    }
    for (std::size_t l = 0; l < base.size(); ++l) {
      if (guided[c][l].shape() != base[l].shape()) {
        throw ShapeError("guidance_loss: scale " + std::to_string(l) + " shapes " + shape_str(guided[c][l].shape()) +
                         " vs " + shape_str(base[l].shape()));
      }
    }
  }
  for (std::size_t l = 0; l < base.size(); ++l) {
    for (std::size_t c = 0; c < guided.size(); ++c) {
      if (weights[c] == 0.0) continue;
      Var<T> term = scale(squared_distance(base[l], guided[c][l]), static_cast<T>(weights[c]));
      total = total.defined() ? add(total, term) : term;
    }
  }
  if (!total.defined()) return Var<T>::leaf(Tensor<T>::scalar(T(0)));
  return scale(total, T(1) / static_cast<T>(base.size()));
}

template <typename T>
std::pair<T, Tensor<T>> guidance_gradient(const Denoiser<T>& backbone, const DenoiserInput<T>& input,
                                          const std::vector<std::vector<Tensor<T>>>& guided,
                                          const std::vector<double>& weights) {
  DenoiserInput<T> in = input;
  Var<T> z = Var<T>::leaf(input.latent.value(), true);
  in.latent = z;
  Tape<T> tape;
  auto scope = tape.activate();
  const auto out = backbone.forward(in);
  const Var<T> loss = guidance_loss(guided, out.features, weights);
  tape.backward(loss);
  return {loss.value().item(), z.grad()};
}

namespace {

DenoiserInput<float> chain_input(const Var<float>& z, int t, const CompletionBatch& b) {
  DenoiserInput<float> in;
  in.latent = z;
  in.timesteps.assign(static_cast<std::size_t>(b.size()), t);
  in.mask = b.mask;
  in.masked_image = b.masked_latent;
  in.class_ids = b.class_ids;
  return in;
}

Tensor<float> ddim_batched(const Tensor<float>& z, const Tensor<float>& eps, int t, int t_prev, double eta,
                           std::vector<Rng>& rngs, const NoiseSchedule& sched) {
  if (ddim_sigma(sched.alpha(t), sched.alpha(t_prev), eta) > 0.0) {
    const Tensor<float> noise = batched_normal(z.shape(), rngs);
    return ddim_step_with_noise(z, eps, t, t_prev, eta, &noise, sched);
  }
  return ddim_step_with_noise<float>(z, eps, t, t_prev, eta, nullptr, sched);
}

Tensor<float> renoise_batched(const Tensor<float>& z, int t, int t_prev, std::vector<Rng>& rngs,
                              const NoiseSchedule& sched) {
  if (sched.alpha(t) == sched.alpha(t_prev)) return z;
  const Tensor<float> noise = batched_normal(z.shape(), rngs);
  return renoise_with_noise(z, t, t_prev, &noise, sched);
}

std::vector<Tensor<float>> values_of(const std::vector<Var<float>>& vars) {
  std::vector<Tensor<float>> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

// Per-sample guidance loss from plain values.
std::vector<double> per_sample_loss(const std::vector<std::vector<Tensor<float>>>& guided,
                                    const std::vector<Tensor<float>>& base, const std::vector<double>& weights,
                                    std::int64_t B) {
  std::vector<double> out(static_cast<std::size_t>(B), 0.0);
  for (std::size_t l = 0; l < base.size(); ++l) {
    const std::int64_t per = base[l].numel() / B;
    for (std::size_t c = 0; c < guided.size(); ++c) {
      if (weights[c] == 0.0) continue;
      for (std::int64_t b = 0; b < B; ++b) {
        double s = 0;
        for (std::int64_t i = b * per; i < (b + 1) * per; ++i) {
          const double d = static_cast<double>(guided[c][l][i]) - base[l][i];
          s += d * d;
        }
        out[static_cast<std::size_t>(b)] += weights[c] * s;
      }
    }
  }
  for (auto& v : out) v /= static_cast<double>(base.size());
  return out;
}

std::vector<Rng> make_rngs(const CompletionBatch& b, std::uint64_t stream) {
  std::vector<Rng> out;
  for (auto s : b.seeds) out.emplace_back(s, stream);
  return out;
}

constexpr std::uint64_t kLatentStream = 0;
std::uint64_t guide_stream(Modality m) { return 1 + static_cast<std::uint64_t>(modality_index(m)); }

Shape latent_shape(const CompletionBatch& b) { return b.masked_latent.shape(); }

void capture_into(Tensor<float>& captured, const std::vector<Tensor<float>>& feats, int scale) {
  if (scale < 0 || scale >= static_cast<int>(feats.size())) throw std::out_of_range("capture scale out of range");
  const Tensor<float>& f = feats[static_cast<std::size_t>(scale)];
  captured = f.reshaped(Shape{f.dim(0), f.numel() / f.dim(0)});
}

void check_conditions(const std::vector<const MCUNet<float>*>& nets, const CompletionBatch& b) {
  for (const auto* n : nets) {
    if (n == nullptr) throw std::invalid_argument("sampler: null MCU-Net");
    auto it = b.conds.find(n->modality());
    if (it == b.conds.end()) {
      throw std::invalid_argument("sampler: missing condition map for modality " +
                                  std::string(modality_name(n->modality())));
    }
    if (it->second.dim(0) != b.size()) throw ShapeError("sampler: condition batch does not match");
  }
}

// Splits the batch into fixed chunks; results do not depend on the worker count.
template <typename F>
SampleResult run_chunked(const CompletionBatch& batch, const SampleOptions& opts, F fn) {
  const std::int64_t B = batch.size();
  if (B == 0) throw std::invalid_argument("sampler: empty batch");
  if (static_cast<std::int64_t>(batch.seeds.size()) != B) throw std::invalid_argument("sampler: one seed per sample");
  const std::int64_t chunk = std::max(1, opts.chunk);
  const std::int64_t n = (B + chunk - 1) / chunk;
  std::vector<SampleResult> parts(static_cast<std::size_t>(n));
  parallel_for(n, [&](std::int64_t i) {
    const std::int64_t first = i * chunk;
    parts[static_cast<std::size_t>(i)] = fn(batch.slice(first, std::min(chunk, B - first)));
  });
  SampleResult out;
  for (auto& p : parts) {
    append_rows(out.latent, p.latent);
    append_rows(out.completed, p.completed);
    append_rows(out.captured, p.captured);
    for (auto& t : p.traces) out.traces.push_back(std::move(t));
  }
  return out;
}

// One plain denoising chain with optional injection during the first
// `inject_steps` steps.
SampleResult plain_chain(const Denoiser<float>& backbone, const std::vector<Var<float>>* signals, int inject_steps,
                         const CompletionBatch& b, const NoiseSchedule& sched, double eta, const SampleOptions& opts) {
  std::vector<Rng> rngs = make_rngs(b, kLatentStream);
  Tensor<float> z = batched_normal(latent_shape(b), rngs);
  SampleResult res;
  res.traces.resize(static_cast<std::size_t>(b.size()));
  for (std::size_t i = 0; i < res.traces.size(); ++i) res.traces[i].seed = b.seeds[i];
  for (int k = 0; k < sched.sample_count(); ++k) {
    const int t = sched.sample_steps[static_cast<std::size_t>(k)];
    const int tp = sched.predecessor(k);
    const bool inject = signals != nullptr && k < inject_steps;
    const auto out = backbone.forward(chain_input(Var<float>::leaf(z), t, b), inject ? signals : nullptr);
    if (k == opts.capture_index) capture_into(res.captured, values_of(out.features), opts.capture_scale);
    z = ddim_batched(z, out.eps.value(), t, tp, eta, rngs, sched);
    StepRecord rec;
    rec.t = t;
    rec.t_prev = tp;
    rec.sigma = ddim_sigma(sched.alpha(t), sched.alpha(tp), eta);
    for (auto& tr : res.traces) tr.steps.push_back(rec);
  }
  res.latent = z;
  res.completed = composite(b.known_image, b.mask, z);
  return res;
}

std::vector<std::vector<Var<float>>> encode_all(const std::vector<const MCUNet<float>*>& nets,
                                                const CompletionBatch& b) {
  std::vector<std::vector<Var<float>>> out;
  for (const auto* n : nets) out.push_back(n->encoder().encode(Var<float>::leaf(b.conds.at(n->modality()))));
  return out;
}

}  // namespace

SampleResult sample_unguided(const Denoiser<float>& backbone, const CompletionBatch& batch,
                             const NoiseSchedule& sched, double eta, const SampleOptions& opts) {
  return run_chunked(batch, opts, [&](const CompletionBatch& b) {
    return plain_chain(backbone, nullptr, 0, b, sched, eta, opts);
  });
}

SampleResult sample_single(const MCUNet<float>& net, const CompletionBatch& batch, const NoiseSchedule& sched,
                           double eta, const SampleOptions& opts) {
  check_conditions({&net}, batch);
  return run_chunked(batch, opts, [&](const CompletionBatch& b) {
    const auto signals = net.encoder().encode(Var<float>::leaf(b.conds.at(net.modality())));
    return plain_chain(net.backbone(), &signals, sched.sample_count(), b, sched, eta, opts);
  });
}

SampleResult sample_fla(const Denoiser<float>& backbone, const std::vector<const MCUNet<float>*>& nets,
                        const CompletionBatch& batch, int fla_steps, const NoiseSchedule& sched, double eta,
                        const SampleOptions& opts) {
  if (fla_steps < 0 || fla_steps > sched.sample_count()) throw std::invalid_argument("fla: steps out of range");
  check_conditions(nets, batch);
  for (const auto* n : nets) {
    if (&n->backbone() != &backbone) throw std::invalid_argument("fla: MCU-Net built on a different backbone");
  }
  return run_chunked(batch, opts, [&](const CompletionBatch& b) {
    if (nets.empty()) return plain_chain(backbone, nullptr, 0, b, sched, eta, opts);
    const auto signals = sum_signals(encode_all(nets, b));
    return plain_chain(backbone, &signals, fla_steps, b, sched, eta, opts);
  });
}

CMBState init_cmb_state(const CompletionBatch& batch, const std::vector<const MCUNet<float>*>& nets) {
  CMBState s;
  s.z_rng = make_rngs(batch, kLatentStream);
  s.z = batched_normal(latent_shape(batch), s.z_rng);
  for (const auto* n : nets) {
    s.w_rng.push_back(make_rngs(batch, guide_stream(n->modality())));
    s.w.push_back(batched_normal(latent_shape(batch), s.w_rng.back()));
  }
  return s;
}

std::vector<StepRecord> cmb_step(CMBState& state, int index, const Denoiser<float>& backbone,
                                 const std::vector<const MCUNet<float>*>& nets,
                                 const std::vector<std::vector<Var<float>>>& signals, const CompletionBatch& b,
                                 const CMBConfig& cfg, const NoiseSchedule& sched,
                                 std::vector<Tensor<float>>* base_features) {
  if (signals.size() != nets.size() || state.w.size() != nets.size()) {
    throw std::invalid_argument("cmb_step: nets, signals and latents disagree in count");
  }
  const int t = sched.sample_steps.at(static_cast<std::size_t>(index));
  const int tp = sched.predecessor(index);
  const std::int64_t B = b.size();
  const double sigma = sigma_t(sched, t, tp, cfg.eta);
  std::vector<double> weights;
  bool any_weight = false;
  for (const auto* n : nets) {
    weights.push_back(cfg.weight(n->modality()));
    any_weight = any_weight || weights.back() > 0.0;
  }
  std::vector<StepRecord> recs(static_cast<std::size_t>(B));
  for (auto& r : recs) {
    r.t = t;
    r.t_prev = tp;
    r.sigma = sigma;
    r.guided = true;
    if (sigma == 0.0 && cfg.gamma > 0.0 && any_weight) r.warning = "sigma_t is zero; guidance is inert";
  }

  // guided features from each modality's own latent; advances that latent
  auto denoise_guides = [&](const std::vector<Tensor<float>>& w, std::vector<Tensor<float>>& w_next) {
    std::vector<std::vector<Tensor<float>>> guided;
    w_next.clear();
    for (std::size_t c = 0; c < nets.size(); ++c) {
      const auto out = nets[c]->forward_with_signals(chain_input(Var<float>::leaf(w[c]), t, b), signals[c]);
      guided.push_back(values_of(out.features));
      w_next.push_back(ddim_batched(w[c], out.eps.value(), t, tp, cfg.eta, state.w_rng[c], sched));
    }
    return guided;
  };

  const bool inert = cfg.gamma == 0.0 || sigma == 0.0 || !any_weight;
  if (inert) {
    // the update is zero, so the step is a plain one; the loop would only repeat it
    std::vector<std::vector<Tensor<float>>> guided;
    if (any_weight) {
      std::vector<Tensor<float>> w_next;
      guided = denoise_guides(state.w, w_next);
      state.w = std::move(w_next);
    }
    const auto out = backbone.forward(chain_input(Var<float>::leaf(state.z), t, b));
    const auto feats = values_of(out.features);
    if (base_features) *base_features = feats;
    const auto loss = any_weight ? per_sample_loss(guided, feats, weights, B) : std::vector<double>(static_cast<std::size_t>(B), 0.0);
    for (std::int64_t i = 0; i < B; ++i) {
      auto& r = recs[static_cast<std::size_t>(i)];
      r.loss_before = r.loss_after = loss[static_cast<std::size_t>(i)];
      r.inner_loss = {r.loss_before};
      r.inner_probe = {r.loss_after};
    }
    state.z = ddim_batched(state.z, out.eps.value(), t, tp, cfg.eta, state.z_rng, sched);
    return recs;
  }

  const std::vector<Tensor<float>> w_t = state.w;
  std::vector<Tensor<float>> w_next;
  std::vector<std::vector<Tensor<float>>> guided;
  if (cfg.q_mode == QMode::time_travel) guided = denoise_guides(w_t, w_next);

  const Tensor<float> z_start = state.z;
  Tensor<float> z_t = z_start;
  const auto step_scale = static_cast<float>(sigma * cfg.gamma);
  for (int q = 0; q < cfg.Q; ++q) {
    if (cfg.q_mode == QMode::literal) {
      guided = denoise_guides(w_t, w_next);
      z_t = z_start;
    }
    Tensor<float> grad, eps;
    std::vector<Tensor<float>> feats;
    {
      Var<float> zv = Var<float>::leaf(z_t, true);
      Tape<float> tape;
      auto scope = tape.activate();
      const auto out = backbone.forward(chain_input(zv, t, b));
      const Var<float> loss = guidance_loss(guided, out.features, weights);
      tape.backward(loss);
      grad = zv.grad();
      eps = out.eps.value();
      feats = values_of(out.features);
    }
    if (q == 0 && base_features) *base_features = feats;
    const auto loss = per_sample_loss(guided, feats, weights, B);
    const std::int64_t per = grad.numel() / B;
    for (std::int64_t i = 0; i < B; ++i) {
      double n2 = 0;
      for (std::int64_t k = i * per; k < (i + 1) * per; ++k) {
        if (!std::isfinite(grad[k])) {
          std::ostringstream os;
          os << "cmb_step: non-finite gradient at t=" << t << ", inner iteration " << q << ", sample seed "
             << b.seeds[static_cast<std::size_t>(i)];
          throw std::runtime_error(os.str());
        }
        n2 += static_cast<double>(grad[k]) * grad[k];
      }
      const double norm = std::sqrt(n2);
      auto& r = recs[static_cast<std::size_t>(i)];
      r.grad_norm = norm;
      r.inner_loss.push_back(loss[static_cast<std::size_t>(i)]);
      if (cfg.normalize_grad && norm > 0.0) {
        for (std::int64_t k = i * per; k < (i + 1) * per; ++k) grad[k] = static_cast<float>(grad[k] / norm);
      }
    }
    const Tensor<float> z_prime = ddim_batched(z_t, eps, t, tp, cfg.eta, state.z_rng, sched);
    Tensor<float> z_new(z_prime.shape()), z_probe(z_t.shape());
    for (std::int64_t k = 0; k < z_new.numel(); ++k) {
      z_new[k] = z_prime[k] - step_scale * grad[k];
      z_probe[k] = z_t[k] - step_scale * grad[k];
    }
    const auto probe_out = backbone.forward(chain_input(Var<float>::leaf(z_probe), t, b));
    const auto probe = per_sample_loss(guided, values_of(probe_out.features), weights, B);
    for (std::int64_t i = 0; i < B; ++i) recs[static_cast<std::size_t>(i)].inner_probe.push_back(probe[static_cast<std::size_t>(i)]);
    if (q + 1 < cfg.Q && cfg.q_mode == QMode::time_travel) {
      z_t = renoise_batched(z_new, t, tp, state.z_rng, sched);
    } else {
      state.z = z_new;
    }
  }
  state.w = std::move(w_next);
  for (auto& r : recs) {
    r.loss_before = r.inner_loss.front();
    r.loss_after = r.inner_probe.back();
  }
  return recs;
}

SampleResult sample_cmb(const Denoiser<float>& backbone, const std::vector<const MCUNet<float>*>& nets,
                        const CompletionBatch& batch, const CMBConfig& cfg, const NoiseSchedule& sched,
                        const SampleOptions& opts) {
  cfg.validate(sched.sample_count());
  check_conditions(nets, batch);
  for (const auto* n : nets) {
    if (&n->backbone() != &backbone) throw std::invalid_argument("cmb: MCU-Net built on a different backbone");
  }
  for (const auto& [m, d] : cfg.delta) {
    bool found = false;
    for (const auto* n : nets) found = found || n->modality() == m;
    if (!found && m != Modality::class_label) {
      throw std::invalid_argument("cmb: delta given for " + std::string(modality_name(m)) + " without an MCU-Net");
    }
  }
  return run_chunked(batch, opts, [&](const CompletionBatch& b) {
    CMBState state = init_cmb_state(b, nets);
    const auto signals = encode_all(nets, b);
    SampleResult res;
    res.traces.resize(static_cast<std::size_t>(b.size()));
    for (std::size_t i = 0; i < res.traces.size(); ++i) res.traces[i].seed = b.seeds[i];
    for (int k = 0; k < sched.sample_count(); ++k) {
      if (k < cfg.P) {
        std::vector<Tensor<float>> feats;
        const auto recs = cmb_step(state, k, backbone, nets, signals, b, cfg, sched,
                                   k == opts.capture_index ? &feats : nullptr);
        if (k == opts.capture_index) capture_into(res.captured, feats, opts.capture_scale);
        for (std::size_t i = 0; i < recs.size(); ++i) res.traces[i].steps.push_back(recs[i]);
        continue;
      }
      const int t = sched.sample_steps[static_cast<std::size_t>(k)];
      const int tp = sched.predecessor(k);
      const auto out = backbone.forward(chain_input(Var<float>::leaf(state.z), t, b));
      if (k == opts.capture_index) capture_into(res.captured, values_of(out.features), opts.capture_scale);
      state.z = ddim_batched(state.z, out.eps.value(), t, tp, cfg.plain_eta, state.z_rng, sched);
      StepRecord rec;
      rec.t = t;
      rec.t_prev = tp;
      rec.sigma = ddim_sigma(sched.alpha(t), sched.alpha(tp), cfg.plain_eta);
      for (auto& tr : res.traces) tr.steps.push_back(rec);
    }
    res.latent = state.z;
    res.completed = composite(b.known_image, b.mask, state.z);
    return res;
  });
}

template Var<float> guidance_loss(const std::vector<std::vector<Tensor<float>>>&, const std::vector<Var<float>>&,
                                  const std::vector<double>&);
template Var<double> guidance_loss(const std::vector<std::vector<Tensor<double>>>&, const std::vector<Var<double>>&,
                                   const std::vector<double>&);
template std::pair<float, Tensor<float>> guidance_gradient(const Denoiser<float>&, const DenoiserInput<float>&,
                                                           const std::vector<std::vector<Tensor<float>>>&,
                                                           const std::vector<double>&);
template std::pair<double, Tensor<double>> guidance_gradient(const Denoiser<double>&, const DenoiserInput<double>&,
                                                             const std::vector<std::vector<Tensor<double>>>&,
                                                             const std::vector<double>&);

}  // namespace magic
