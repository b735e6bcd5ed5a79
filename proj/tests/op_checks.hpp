#pragma once

// Finite-difference checks of every differentiable op, shared by the unit
// tests and the acceptance binary.

#include <map>
#include <string>

#include "gradcheck.hpp"
#include "magic/sampler.hpp"

namespace magic::testing {

inline constexpr int kInstancesPerOp = 20;
inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

inline Shape image_shape(Rng& rng) {
  return {rng.uniform_int(1, 2), rng.uniform_int(1, 3), rng.uniform_int(2, 5), rng.uniform_int(2, 5)};
}

// Values kept away from the relu kink.
inline Tensor<double> away_from_zero(const Shape& shape, Rng& rng) {
  Tensor<double> t = random_tensor(shape, rng, 0.05, 1.0);
  for (auto& v : t.data()) v = rng.uniform() < 0.5 ? -v : v;
  return t;
}

// Worst relative error per op over kInstancesPerOp random instances.
inline std::map<std::string, double> op_gradient_errors(std::uint64_t seed) {
  std::map<std::string, double> worst;
  Rng rng(seed, 77);
  auto note = [&](const std::string& op, double err) { worst[op] = std::max(worst[op], err); };
  for (int inst = 0; inst < kInstancesPerOp; ++inst) {
    const Shape s = image_shape(rng);
    const Tensor<double> a = random_tensor(s, rng), b = random_tensor(s, rng);
    note("add", gradient_error([](auto& v) { return add(v[0], v[1]); }, {a, b}, {true, true}, rng));
    note("add_channel", gradient_error([](auto& v) { return add(v[0], v[1]); },
                                       {a, random_tensor({s[1]}, rng)}, {true, true}, rng));
    note("add_sample_channel", gradient_error([](auto& v) { return add(v[0], v[1]); },
                                              {a, random_tensor({s[0], s[1]}, rng)}, {true, true}, rng));
    note("sub", gradient_error([](auto& v) { return sub(v[0], v[1]); }, {a, b}, {true, true}, rng));
    note("mul", gradient_error([](auto& v) { return mul(v[0], v[1]); }, {a, b}, {true, true}, rng));
    note("mul_scalar", gradient_error([](auto& v) { return mul(v[0], v[1]); }, {a, random_tensor({1}, rng)},
                                      {true, true}, rng));
    const double factor = rng.uniform(-2.0, 2.0);
    note("scale", gradient_error([factor](auto& v) { return scale(v[0], factor); }, {a}, {true}, rng));
    note("silu", gradient_error([](auto& v) { return silu(v[0]); }, {random_tensor(s, rng, -3, 3)}, {true}, rng));
    note("relu", gradient_error([](auto& v) { return relu(v[0]); }, {away_from_zero(s, rng)}, {true}, rng));
    note("square", gradient_error([](auto& v) { return square(v[0]); }, {a}, {true}, rng));
    note("sum", gradient_error([](auto& v) { return sum(v[0]); }, {a}, {true}, rng));
    note("mean", gradient_error([](auto& v) { return mean(v[0]); }, {a}, {true}, rng));

    {
      const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1), k = 2 * rng.uniform_int(0, 1) + 1;
      // extents with an integral output size
      const std::int64_t ih = k - 2 * pad + stride * rng.uniform_int(2, 4), iw = k - 2 * pad + stride * rng.uniform_int(2, 4);
      const Shape in{rng.uniform_int(1, 2), rng.uniform_int(1, 3), ih, iw};
      const std::int64_t out_c = rng.uniform_int(1, 3);
      const bool bias = rng.uniform() < 0.7;
      const Tensor<double> x = random_tensor(in, rng), w = random_tensor({out_c, in[1], k, k}, rng);
      const Tensor<double> bb = random_tensor({out_c}, rng);
      note("conv2d", gradient_error(
                         [stride, pad, bias](auto& v) { return conv2d(v[0], v[1], bias ? v[2] : Var<double>(), stride, pad); },
                         {x, w, bb}, {true, true, bias}, rng));
    }
    {
      const std::int64_t n = rng.uniform_int(1, 4), in = rng.uniform_int(1, 5), out = rng.uniform_int(1, 5);
      note("linear", gradient_error([](auto& v) { return linear(v[0], v[1], v[2]); },
                                    {random_tensor({n, in}, rng), random_tensor({out, in}, rng), random_tensor({out}, rng)},
                                    {true, true, true}, rng));
    }
    {
      const int groups = rng.uniform_int(1, 2);
      const Shape gs{rng.uniform_int(1, 2), groups * rng.uniform_int(1, 2), rng.uniform_int(2, 4), rng.uniform_int(2, 4)};
      note("normalize_channels",
           gradient_error([groups](auto& v) { return normalize_channels(v[0], v[1], v[2], groups); },
                          {random_tensor(gs, rng), random_tensor({gs[1]}, rng, 0.5, 1.5), random_tensor({gs[1]}, rng)},
                          {true, true, true}, rng));
    }
    {
      const Shape rs{rng.uniform_int(1, 2), rng.uniform_int(1, 3), 2 * rng.uniform_int(1, 3), 2 * rng.uniform_int(1, 3)};
      note("resample_down", gradient_error([](auto& v) { return resample(v[0], ResampleDirection::down); },
                                           {random_tensor(rs, rng)}, {true}, rng));
      note("resample_up", gradient_error([](auto& v) { return resample(v[0], ResampleDirection::up); },
                                         {random_tensor(rs, rng)}, {true}, rng));
    }
    {
      Shape s2 = s;
      s2[1] = rng.uniform_int(1, 3);
      note("concat_channels", gradient_error([](auto& v) { return concat_channels(v[0], v[1]); },
                                             {a, random_tensor(s2, rng)}, {true, true}, rng));
    }
    note("spatial_mean", gradient_error([](auto& v) { return spatial_mean(v[0]); }, {a}, {true}, rng));
    {
      const int rows = rng.uniform_int(2, 5);
      std::vector<int> ids;
      for (int i = 0; i < rng.uniform_int(1, 4); ++i) ids.push_back(rng.uniform_int(-1, rows - 1));
      note("embedding", gradient_error([ids](auto& v) { return embedding(v[0], ids); },
                                       {random_tensor({rows, rng.uniform_int(1, 4)}, rng)}, {true}, rng));
    }
    {
      const int n = rng.uniform_int(1, 4), k = rng.uniform_int(2, 5);
      std::vector<int> labels;
      for (int i = 0; i < n; ++i) labels.push_back(rng.uniform_int(0, k - 1));
      note("cross_entropy", gradient_error([labels](auto& v) { return cross_entropy(v[0], labels); },
                                           {random_tensor({n, k}, rng, -2, 2)}, {true}, rng));
    }
    {
      const Tensor<double> target = random_tensor(s, rng);
      note("mse", gradient_error([target](auto& v) { return mse(v[0], target); }, {a}, {true}, rng));
      note("squared_distance", gradient_error([target](auto& v) { return squared_distance(v[0], target); }, {a},
                                              {true}, rng));
    }
  }
  return worst;
}

// Two-scale micro-net, two modalities with non-zero encoders.
struct MicroNet {
  UNetConfig cfg;
  Denoiser<double> backbone;
  std::vector<GuidanceEncoder<double>> encoders;

  static UNetConfig config() {
    UNetConfig c;
    c.image_size = 4;
    c.base_channels = 4;
    c.channel_mults = {1, 2};
    c.blocks_per_scale = 1;
    c.time_embed_dim = 8;
    c.cond_embed_classes = 3;
    return c;
  }

  explicit MicroNet(std::uint64_t seed) : cfg(config()), backbone(cfg, seed) {
    Rng rng(seed, 5);
    // fresh zero-initialised layers would hide parts of the graph
    for (const auto& [name, v] : backbone.parameters()) {
      Var<double> p = v;
      for (auto& x : p.mutable_value().data()) x += rng.uniform(-0.2, 0.2);
    }
    for (Modality m : {Modality::edge, Modality::depth}) {
      GuidanceEncoder<double> enc(GuidanceEncoderConfig::for_backbone(m, cfg), seed + 1 + static_cast<std::uint64_t>(modality_index(m)));
      for (const auto& [name, v] : enc.parameters()) {
        Var<double> p = v;
        for (auto& x : p.mutable_value().data()) x += rng.uniform(-0.2, 0.2);
      }
      encoders.push_back(std::move(enc));
    }
  }
};

// Relative error of d loss / d z_t for the guidance loss through the micro-net.
inline double end_to_end_gradient_error(std::uint64_t seed, double h = 1e-5) {
  MicroNet net(seed);
  Rng rng(seed, 9);
  const std::int64_t B = 2, S = net.cfg.image_size;
  DenoiserInput<double> in;
  const Tensor<double> z = random_tensor({B, 1, S, S}, rng);
  in.timesteps = {rng.uniform_int(1, 1000), rng.uniform_int(1, 1000)};
  in.mask = Tensor<double>({B, 1, S, S});
  for (auto& v : in.mask.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  in.masked_image = random_tensor({B, 1, S, S}, rng);
  in.class_ids = {1, -1};
  std::vector<std::vector<Tensor<double>>> guided;
  for (const auto& enc : net.encoders) {
    const auto signals = enc.encode(Var<double>::leaf(random_tensor({B, 1, S, S}, rng)));
    DenoiserInput<double> gi = in;
    gi.latent = Var<double>::leaf(z);
    const auto out = net.backbone.forward(gi, &signals);
    std::vector<Tensor<double>> f;
    for (const auto& v : out.features) f.push_back(v.value());
    guided.push_back(f);
  }
  const std::vector<double> weights{0.7, 1.3};
  in.latent = Var<double>::leaf(z);
  const auto [value, grad] = guidance_gradient(net.backbone, in, guided, weights);
  (void)value;
  auto loss_at = [&](const Tensor<double>& zz) {
    DenoiserInput<double> li = in;
    li.latent = Var<double>::leaf(zz);
    const auto out = net.backbone.forward(li);
    return guidance_loss(guided, out.features, weights).value().item();
  };
  double diff2 = 0.0, n2 = 0.0, a2 = 0.0;
  Tensor<double> zz = z;
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    zz[i] = z[i] + h;
    const double up = loss_at(zz);
    zz[i] = z[i] - h;
    const double down = loss_at(zz);
    zz[i] = z[i];
    const double n = (up - down) / (2 * h);
    diff2 += (n - grad[i]) * (n - grad[i]);
    n2 += n * n;
    a2 += grad[i] * grad[i];
  }
  return std::sqrt(diff2) / std::max({std::sqrt(n2), std::sqrt(a2), 1e-12});
}

}  // namespace magic::testing
