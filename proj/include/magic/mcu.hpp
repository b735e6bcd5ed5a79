#pragma once

#include <cstdint>
#include <vector>

#include "magic/modality.hpp"
#include "magic/unet.hpp"

namespace magic {

struct GuidanceEncoderConfig {
  Modality modality = Modality::edge;
  int in_channels = 1;
  std::vector<int> block_channels;  // one per backbone scale

  int blocks() const { return static_cast<int>(block_channels.size()); }

  /// Matches the backbone's per-scale channels; segmentation takes one
  /// one-hot channel per class.
  static GuidanceEncoderConfig for_backbone(Modality modality, const UNetConfig& backbone, int seg_classes = 4);
};

/// Multi-scale guidance feature extractor. Each block is a convolution
/// (preceded by 2x downsampling after the first block) and two residual
/// blocks; a zero-initialised 1x1 projection emits that scale's signal, so
/// a fresh encoder contributes exactly zero.
template <typename T>
class GuidanceEncoder {
 public:
  GuidanceEncoder(GuidanceEncoderConfig cfg, std::uint64_t seed);

  std::vector<Var<T>> encode(const Var<T>& cond) const;

  const GuidanceEncoderConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

 private:
  struct Block {
    Var<T> conv_w, conv_b;
    Var<T> res_w[2][2], res_b[2][2];
    Var<T> out_w, out_b;
  };

  GuidanceEncoderConfig cfg_;
  ParameterSet<T> params_;
  std::vector<Block> blocks_;
};

/// Frozen backbone plus a modality encoder whose signals are added to the
/// backbone's encoder features. The backbone must outlive the MCU-Net.
template <typename T>
class MCUNet {
 public:
  MCUNet(const Denoiser<T>& backbone, GuidanceEncoder<T> encoder);

  DenoiserOutput<T> forward(const DenoiserInput<T>& in, const Var<T>& cond) const;
  /// Forward with precomputed guidance signals (they do not depend on t).
  DenoiserOutput<T> forward_with_signals(const DenoiserInput<T>& in, const std::vector<Var<T>>& signals) const;

  const Denoiser<T>& backbone() const { return *backbone_; }
  GuidanceEncoder<T>& encoder() { return encoder_; }
  const GuidanceEncoder<T>& encoder() const { return encoder_; }
  Modality modality() const { return encoder_.config().modality; }

 private:
  const Denoiser<T>* backbone_;
  GuidanceEncoder<T> encoder_;
};

/// Elementwise sum of per-scale signal lists (the feature-level addition rule).
template <typename T>
std::vector<Var<T>> sum_signals(const std::vector<std::vector<Var<T>>>& signals);

}  // namespace magic
