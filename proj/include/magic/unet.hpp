#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "magic/autograd.hpp"
#include "magic/parameters.hpp"

namespace magic {

struct UNetConfig {
  int image_size = 32;
  int latent_channels = 1;  // C; input is latent + mask + masked image = 2C + 1
  int base_channels = 32;
  std::vector<int> channel_mults{1, 2, 4};
  int blocks_per_scale = 2;
  int time_embed_dim = 128;
  int cond_embed_classes = 0;  // 0 disables the class-label pathway

  /// Number of downsamplings; feature scales are 0..levels().
  int levels() const { return static_cast<int>(channel_mults.size()) - 1; }
  int scale_count() const { return static_cast<int>(channel_mults.size()); }
  int in_channels() const { return 2 * latent_channels + 1; }
  int channels(int scale) const { return base_channels * channel_mults.at(static_cast<std::size_t>(scale)); }
  int extent(int scale) const { return image_size >> scale; }
  void validate() const;
};

/// Inputs of one batched denoiser call.
template <typename T>
struct DenoiserInput {
  Var<T> latent;                 // [B,C,S,S]
  std::vector<int> timesteps;    // B entries
  Tensor<T> mask;                // [B,1,S,S], 1 = region to complete
  Tensor<T> masked_image;        // [B,C,S,S], known pixels, zero under the mask
  std::vector<int> class_ids;    // empty, or B entries in [-1, classes); -1 = none
};

template <typename T>
struct DenoiserOutput {
  Var<T> eps;                    // [B,C,S,S]
  std::vector<Var<T>> features;  // one per scale, after injection
};

/// Residual block parameters; `temb` projections are absent in blocks that
/// take no timestep embedding.
template <typename T>
struct ResBlock {
  Var<T> norm1_gain, norm1_bias, conv1_w, conv1_b;
  Var<T> temb_w, temb_b;
  Var<T> norm2_gain, norm2_bias, conv2_w, conv2_b;
  Var<T> skip_w, skip_b;
  int groups_in = 1;
  int groups_out = 1;

  static ResBlock create(ParameterSet<T>& params, const std::string& prefix, int in_ch, int out_ch, int temb_dim,
                         Rng& rng);
  Var<T> operator()(const Var<T>& x, const Var<T>& temb_act) const;
};

/// Masked-image-conditioned U-Net that predicts noise and exposes its
/// per-scale encoder features. Additive per-scale injections are applied at
/// the exact points the features are captured, before the skip branches.
template <typename T>
class Denoiser {
 public:
  Denoiser(UNetConfig cfg, std::uint64_t seed);

  DenoiserOutput<T> forward(const DenoiserInput<T>& in, const std::vector<Var<T>>* injection = nullptr) const;

  const UNetConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  Shape feature_shape(int scale, std::int64_t batch) const;

 private:
  void validate_input(const DenoiserInput<T>& in) const;
  Var<T> time_embedding(const std::vector<int>& timesteps, const std::vector<int>& class_ids) const;

  UNetConfig cfg_;
  ParameterSet<T> params_;
  Var<T> conv_in_w_, conv_in_b_;
  Var<T> time_w1_, time_b1_, time_w2_, time_b2_;
  Var<T> class_table_;
  std::vector<std::vector<ResBlock<T>>> enc_;  // [scale][block]
  std::vector<Var<T>> down_w_, down_b_;       // between scale l and l+1
  ResBlock<T> mid_;
  std::vector<std::vector<ResBlock<T>>> dec_;  // [scale][block], scale order L..0 stored by scale index
  std::vector<Var<T>> up_w_, up_b_;           // from scale l to l-1, indexed by l
  Var<T> out_norm_gain_, out_norm_bias_, out_conv_w_, out_conv_b_;
};

/// Sinusoidal timestep features [B, dim].
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& timesteps, int dim);

}  // namespace magic
