#include "magic/unet.hpp"

#include <cmath>
#include <stdexcept>

namespace magic {

void UNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("UNetConfig: " + m); };
  if (latent_channels < 1) fail("latent_channels must be >= 1");
  if (base_channels < 2 || base_channels % 2 != 0) fail("base_channels must be even and >= 2");
  if (channel_mults.empty()) fail("channel_mults must not be empty");
  for (int m : channel_mults)
    if (m < 1) fail("channel_mults entries must be >= 1");
  if (blocks_per_scale < 1) fail("blocks_per_scale must be >= 1");
  if (time_embed_dim < 1) fail("time_embed_dim must be >= 1");
  if (cond_embed_classes < 0) fail("cond_embed_classes must be >= 0");
  if (image_size < 1 || image_size % (1 << levels()) != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by 2^" + std::to_string(levels()));
  }
  for (int l = 0; l < scale_count(); ++l) {
    const int c = channels(l);
    if (c % default_groups(c) != 0) fail("channel count " + std::to_string(c) + " not divisible by group count");
    const int cat = 2 * c;  // decoder input after the skip concatenation
    if (cat % default_groups(cat) != 0) fail("decoder channel count not divisible by group count");
  }
}

template <typename T>
Tensor<T> timestep_features(const std::vector<int>& timesteps, int dim) {
  const int half = dim / 2;
  Tensor<T> out(Shape{static_cast<std::int64_t>(timesteps.size()), dim});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[b] * freq;
      out[static_cast<std::int64_t>(b) * dim + i] = static_cast<T>(std::sin(arg));
      out[static_cast<std::int64_t>(b) * dim + half + i] = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

namespace {

template <typename T>
void make_conv(ParameterSet<T>& p, const std::string& name, int in_ch, int out_ch, int k, Rng& rng, Var<T>& w,
               Var<T>& b) {
  w = p.add_fan_in(name + ".w", Shape{out_ch, in_ch, k, k}, static_cast<std::int64_t>(in_ch) * k * k, rng);
  b = p.add_zeros(name + ".b", Shape{out_ch});
}

}  // namespace

template <typename T>
ResBlock<T> ResBlock<T>::create(ParameterSet<T>& p, const std::string& prefix, int in_ch, int out_ch, int temb_dim,
                                Rng& rng) {
  ResBlock blk;
  blk.groups_in = default_groups(in_ch);
  blk.groups_out = default_groups(out_ch);
  blk.norm1_gain = p.add_ones(prefix + ".norm1.gain", Shape{in_ch});
  blk.norm1_bias = p.add_zeros(prefix + ".norm1.bias", Shape{in_ch});
  make_conv(p, prefix + ".conv1", in_ch, out_ch, 3, rng, blk.conv1_w, blk.conv1_b);
  if (temb_dim > 0) {
    blk.temb_w = p.add_fan_in(prefix + ".temb.w", Shape{out_ch, temb_dim}, temb_dim, rng);
    blk.temb_b = p.add_zeros(prefix + ".temb.b", Shape{out_ch});
  }
  blk.norm2_gain = p.add_ones(prefix + ".norm2.gain", Shape{out_ch});
  blk.norm2_bias = p.add_zeros(prefix + ".norm2.bias", Shape{out_ch});
  make_conv(p, prefix + ".conv2", out_ch, out_ch, 3, rng, blk.conv2_w, blk.conv2_b);
  if (in_ch != out_ch) make_conv(p, prefix + ".skip", in_ch, out_ch, 1, rng, blk.skip_w, blk.skip_b);
  return blk;
}

template <typename T>
Var<T> ResBlock<T>::operator()(const Var<T>& x, const Var<T>& temb_act) const {
  Var<T> h = silu(normalize_channels(x, norm1_gain, norm1_bias, groups_in));
  h = conv2d(h, conv1_w, conv1_b, 1, 1);
  if (temb_w.defined()) h = add(h, linear(temb_act, temb_w, temb_b));
  h = silu(normalize_channels(h, norm2_gain, norm2_bias, groups_out));
  h = conv2d(h, conv2_w, conv2_b, 1, 1);
  const Var<T> skip = skip_w.defined() ? conv2d(x, skip_w, skip_b, 1, 0) : x;
  return add(h, skip);
}

template <typename T>
Denoiser<T>::Denoiser(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed, 0x756e6574);  // "unet"
  const int L = cfg_.levels();
  const int temb = cfg_.time_embed_dim;
  make_conv(params_, "conv_in", cfg_.in_channels(), cfg_.channels(0), 3, rng, conv_in_w_, conv_in_b_);
  time_w1_ = params_.add_fan_in("time.fc1.w", Shape{temb, cfg_.base_channels}, cfg_.base_channels, rng);
  time_b1_ = params_.add_zeros("time.fc1.b", Shape{temb});
  time_w2_ = params_.add_fan_in("time.fc2.w", Shape{temb, temb}, temb, rng);
  time_b2_ = params_.add_zeros("time.fc2.b", Shape{temb});
  if (cfg_.cond_embed_classes > 0) {
    class_table_ = params_.add_fan_in("class.table", Shape{cfg_.cond_embed_classes, temb}, temb, rng);
  }

  enc_.resize(static_cast<std::size_t>(L + 1));
  int ch = cfg_.channels(0);
  for (int l = 0; l <= L; ++l) {
    if (l > 0) {
      Var<T> w, b;
      make_conv(params_, "enc." + std::to_string(l) + ".down", ch, ch, 3, rng, w, b);
      down_w_.push_back(w);
      down_b_.push_back(b);
    }
    for (int k = 0; k < cfg_.blocks_per_scale; ++k) {
      enc_[static_cast<std::size_t>(l)].push_back(ResBlock<T>::create(
          params_, "enc." + std::to_string(l) + ".res." + std::to_string(k), ch, cfg_.channels(l), temb, rng));
      ch = cfg_.channels(l);
    }
  }
  mid_ = ResBlock<T>::create(params_, "mid", ch, ch, temb, rng);

  dec_.resize(static_cast<std::size_t>(L + 1));
  up_w_.resize(static_cast<std::size_t>(L + 1));
  up_b_.resize(static_cast<std::size_t>(L + 1));
  for (int l = L; l >= 0; --l) {
    const std::string pre = "dec." + std::to_string(l);
    for (int k = 0; k < cfg_.blocks_per_scale; ++k) {
      const int in_ch = k == 0 ? ch + cfg_.channels(l) : cfg_.channels(l);
      dec_[static_cast<std::size_t>(l)].push_back(
          ResBlock<T>::create(params_, pre + ".res." + std::to_string(k), in_ch, cfg_.channels(l), temb, rng));
    }
    ch = cfg_.channels(l);
    if (l > 0) {
      make_conv(params_, pre + ".up", ch, cfg_.channels(l - 1), 3, rng, up_w_[static_cast<std::size_t>(l)],
                up_b_[static_cast<std::size_t>(l)]);
      ch = cfg_.channels(l - 1);
    }
  }
  out_norm_gain_ = params_.add_ones("out.norm.gain", Shape{ch});
  out_norm_bias_ = params_.add_zeros("out.norm.bias", Shape{ch});
  make_conv(params_, "out.conv", ch, cfg_.latent_channels, 3, rng, out_conv_w_, out_conv_b_);
}

template <typename T>
Shape Denoiser<T>::feature_shape(int scale, std::int64_t batch) const {
  if (scale < 0 || scale > cfg_.levels()) throw std::out_of_range("feature scale out of range");
  return Shape{batch, cfg_.channels(scale), cfg_.extent(scale), cfg_.extent(scale)};
}

template <typename T>
void Denoiser<T>::validate_input(const DenoiserInput<T>& in) const {
  const Shape& zs = in.latent.shape();
  const std::int64_t S = cfg_.image_size, C = cfg_.latent_channels;
  if (zs.size() != 4 || zs[1] != C || zs[2] != S || zs[3] != S) {
    throw ShapeError("denoise: latent shape " + shape_str(zs) + " does not match [B," + std::to_string(C) + "," +
                     std::to_string(S) + "," + std::to_string(S) + "]");
  }
  const std::int64_t B = zs[0];
  if (in.mask.shape() != Shape{B, 1, S, S}) {
    throw ShapeError("denoise: mask shape " + shape_str(in.mask.shape()) + " vs latent " + shape_str(zs));
  }
  if (in.masked_image.shape() != zs) {
    throw ShapeError("denoise: masked image shape " + shape_str(in.masked_image.shape()) + " vs latent " +
                     shape_str(zs));
  }
  for (T v : in.mask.data()) {
    if (v != T(0) && v != T(1)) throw std::invalid_argument("denoise: mask values must be 0 or 1");
  }
  if (static_cast<std::int64_t>(in.timesteps.size()) != B) {
    throw std::invalid_argument("denoise: expected " + std::to_string(B) + " timesteps, got " +
                                std::to_string(in.timesteps.size()));
  }
  for (int t : in.timesteps)
    if (t < 0) throw std::invalid_argument("denoise: negative timestep");
  if (cfg_.cond_embed_classes > 0 && !in.class_ids.empty() &&
      static_cast<std::int64_t>(in.class_ids.size()) != B) {
    throw std::invalid_argument("denoise: class id count does not match batch");
  }
}

template <typename T>
Var<T> Denoiser<T>::time_embedding(const std::vector<int>& timesteps, const std::vector<int>& class_ids) const {
  const Var<T> feats = Var<T>::leaf(timestep_features<T>(timesteps, cfg_.base_channels));
  Var<T> e = linear(silu(linear(feats, time_w1_, time_b1_)), time_w2_, time_b2_);
  if (cfg_.cond_embed_classes > 0 && !class_ids.empty()) e = add(e, embedding(class_table_, class_ids));
  return silu(e);
}

template <typename T>
DenoiserOutput<T> Denoiser<T>::forward(const DenoiserInput<T>& in, const std::vector<Var<T>>* injection) const {
  validate_input(in);
  const int L = cfg_.levels();
  const std::int64_t B = in.latent.shape()[0];
  if (injection != nullptr) {
    if (static_cast<int>(injection->size()) != L + 1) {
      throw ShapeError("injection has " + std::to_string(injection->size()) + " scales, backbone exposes " +
                       std::to_string(L + 1));
    }
    for (int l = 0; l <= L; ++l) {
      if ((*injection)[static_cast<std::size_t>(l)].shape() != feature_shape(l, B)) {
        throw ShapeError("injection scale " + std::to_string(l) + ": " +
                         shape_str((*injection)[static_cast<std::size_t>(l)].shape()) + " vs feature " +
                         shape_str(feature_shape(l, B)));
      }
    }
  }

  const Var<T> temb = time_embedding(in.timesteps, in.class_ids);
  const Var<T> cond = concat_channels(concat_channels(in.latent, Var<T>::leaf(in.mask)), Var<T>::leaf(in.masked_image));
  Var<T> h = conv2d(cond, conv_in_w_, conv_in_b_, 1, 1);

  DenoiserOutput<T> out;
  out.features.reserve(static_cast<std::size_t>(L + 1));
  for (int l = 0; l <= L; ++l) {
    if (l > 0) {
      h = resample(conv2d(h, down_w_[static_cast<std::size_t>(l - 1)], down_b_[static_cast<std::size_t>(l - 1)], 1, 1),
                   ResampleDirection::down);
    }
    for (const auto& blk : enc_[static_cast<std::size_t>(l)]) h = blk(h, temb);
    if (injection != nullptr) h = add(h, (*injection)[static_cast<std::size_t>(l)]);
    out.features.push_back(h);
  }
  h = mid_(h, temb);
  for (int l = L; l >= 0; --l) {
    const auto& blocks = dec_[static_cast<std::size_t>(l)];
    h = concat_channels(h, out.features[static_cast<std::size_t>(l)]);
    for (const auto& blk : blocks) h = blk(h, temb);
    if (l > 0) {
      h = conv2d(resample(h, ResampleDirection::up), up_w_[static_cast<std::size_t>(l)],
                 up_b_[static_cast<std::size_t>(l)], 1, 1);
    }
  }
  h = silu(normalize_channels(h, out_norm_gain_, out_norm_bias_, default_groups(cfg_.channels(0))));
  out.eps = conv2d(h, out_conv_w_, out_conv_b_, 1, 1);
  return out;
}

template struct ResBlock<float>;
template struct ResBlock<double>;
template class Denoiser<float>;
template class Denoiser<double>;
template Tensor<float> timestep_features(const std::vector<int>&, int);
template Tensor<double> timestep_features(const std::vector<int>&, int);

}  // namespace magic
