#include "magic/mcu.hpp"

#include <stdexcept>
#include <string>

namespace magic {

GuidanceEncoderConfig GuidanceEncoderConfig::for_backbone(Modality modality, const UNetConfig& backbone,
                                                          int seg_classes) {
  if (modality == Modality::class_label) {
    throw std::invalid_argument("class_label has no guidance encoder; it uses the backbone class embedding");
  }
  GuidanceEncoderConfig cfg;
  cfg.modality = modality;
  cfg.in_channels = modality == Modality::segmentation ? seg_classes : 1;
  for (int l = 0; l < backbone.scale_count(); ++l) cfg.block_channels.push_back(backbone.channels(l));
  return cfg;
}

template <typename T>
GuidanceEncoder<T>::GuidanceEncoder(GuidanceEncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.in_channels < 1 || cfg_.block_channels.empty()) {
    throw std::invalid_argument("GuidanceEncoderConfig: need in_channels >= 1 and at least one block");
  }
  Rng rng(seed, 0x656e63 + static_cast<std::uint64_t>(modality_index(cfg_.modality)));
  int ch = cfg_.in_channels;
  for (int l = 0; l < cfg_.blocks(); ++l) {
    const int out = cfg_.block_channels[static_cast<std::size_t>(l)];
    const std::string pre = "tau." + std::to_string(l);
    Block b;
    b.conv_w = params_.add_fan_in(pre + ".conv.w", Shape{out, ch, 3, 3}, static_cast<std::int64_t>(ch) * 9, rng);
    b.conv_b = params_.add_zeros(pre + ".conv.b", Shape{out});
    for (int r = 0; r < 2; ++r)
      for (int k = 0; k < 2; ++k) {
        const std::string n = pre + ".res." + std::to_string(r) + ".conv" + std::to_string(k);
        b.res_w[r][k] = params_.add_fan_in(n + ".w", Shape{out, out, 3, 3}, static_cast<std::int64_t>(out) * 9, rng);
        b.res_b[r][k] = params_.add_zeros(n + ".b", Shape{out});
      }
    b.out_w = params_.add_zeros(pre + ".out.w", Shape{out, out, 1, 1});
    b.out_b = params_.add_zeros(pre + ".out.b", Shape{out});
    blocks_.push_back(b);
    ch = out;
  }
}

template <typename T>
std::vector<Var<T>> GuidanceEncoder<T>::encode(const Var<T>& cond) const {
  const Shape& cs = cond.shape();
  if (cs.size() != 4 || cs[1] != cfg_.in_channels) {
    throw ShapeError("encode_guidance: condition shape " + shape_str(cs) + " but encoder expects " +
                     std::to_string(cfg_.in_channels) + " channels");
  }
  std::vector<Var<T>> signals;
  Var<T> h = cond;
  for (int l = 0; l < cfg_.blocks(); ++l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    h = conv2d(h, b.conv_w, b.conv_b, 1, 1);
    if (l > 0) h = resample(h, ResampleDirection::down);
    for (int r = 0; r < 2; ++r) {
      Var<T> inner = conv2d(relu(h), b.res_w[r][0], b.res_b[r][0], 1, 1);
      inner = conv2d(relu(inner), b.res_w[r][1], b.res_b[r][1], 1, 1);
      h = add(h, inner);
    }
    signals.push_back(conv2d(h, b.out_w, b.out_b, 1, 0));
  }
  return signals;
}

template <typename T>
MCUNet<T>::MCUNet(const Denoiser<T>& backbone, GuidanceEncoder<T> encoder)
    : backbone_(&backbone), encoder_(std::move(encoder)) {
  const auto& bcfg = backbone.config();
  const auto& ecfg = encoder_.config();
  if (ecfg.blocks() != bcfg.scale_count()) {
    throw ShapeError("MCU-Net: encoder has " + std::to_string(ecfg.blocks()) + " scales, backbone has " +
                     std::to_string(bcfg.scale_count()));
  }
  for (int l = 0; l < bcfg.scale_count(); ++l) {
    if (ecfg.block_channels[static_cast<std::size_t>(l)] != bcfg.channels(l)) {
      throw ShapeError("MCU-Net: encoder channels at scale " + std::to_string(l) + " do not match the backbone");
    }
  }
}

template <typename T>
DenoiserOutput<T> MCUNet<T>::forward(const DenoiserInput<T>& in, const Var<T>& cond) const {
  const Shape& cs = cond.shape();
  const std::int64_t S = backbone_->config().image_size;
  if (cs.size() != 4 || cs[2] != S || cs[3] != S) {
    throw ShapeError("MCU-Net: condition shape " + shape_str(cs) + " does not match image size " + std::to_string(S));
  }
  return forward_with_signals(in, encoder_.encode(cond));
}

template <typename T>
DenoiserOutput<T> MCUNet<T>::forward_with_signals(const DenoiserInput<T>& in,
                                                  const std::vector<Var<T>>& signals) const {
  return backbone_->forward(in, &signals);
}

template <typename T>
std::vector<Var<T>> sum_signals(const std::vector<std::vector<Var<T>>>& signals) {
  if (signals.empty()) return {};
  std::vector<Var<T>> total = signals.front();
  for (std::size_t c = 1; c < signals.size(); ++c) {
    if (signals[c].size() != total.size()) throw ShapeError("sum_signals: scale count mismatch");
    for (std::size_t l = 0; l < total.size(); ++l) total[l] = add(total[l], signals[c][l]);
  }
  return total;
}

template class GuidanceEncoder<float>;
template class GuidanceEncoder<double>;
template class MCUNet<float>;
template class MCUNet<double>;
template std::vector<Var<float>> sum_signals(const std::vector<std::vector<Var<float>>>&);
template std::vector<Var<double>> sum_signals(const std::vector<std::vector<Var<double>>>&);

}  // namespace magic
