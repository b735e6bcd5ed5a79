#include "magic/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace magic {

void WorldConfig::validate() const {
  if (size < 8) throw std::invalid_argument("world: size must be >= 8");
  if (min_shapes < 0 || max_shapes < min_shapes || max_shapes > 3) {
    throw std::invalid_argument("world: need 0 <= min_shapes <= max_shapes <= 3");
  }
  if (!(edge_threshold > 0.0)) throw std::invalid_argument("world: edge_threshold must be positive");
  if (!(sketch_sigma > 0.0)) throw std::invalid_argument("world: sketch_sigma must be positive");
  if (background_amplitude < 0.0 || background_amplitude > 0.1) {
    throw std::invalid_argument("world: background_amplitude must lie in [0, 0.1]");
  }
}

namespace {

struct Placed {
  ShapeClass cls;
  std::vector<int> pixels;
};

std::vector<int> rasterize(ShapeClass cls, double cx, double cy, double hx, double hy, int S) {
  std::vector<int> px;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double dx = x - cx, dy = y - cy;
      bool in = false;
      switch (cls) {
        case ShapeClass::circle: in = dx * dx + dy * dy <= hx * hx; break;
        case ShapeClass::rectangle: in = std::abs(dx) <= hx && std::abs(dy) <= hy; break;
        case ShapeClass::triangle:
          // apex at the top, base along cy + hy
          in = dy <= hy && dy >= -hy && std::abs(dx) <= hx * (dy + hy) / (2 * hy);
          break;
        case ShapeClass::background: break;
      }
      if (in) px.push_back(y * S + x);
    }
  return px;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const WorldConfig& cfg, std::optional<int> forced_count) {
  cfg.validate();
  const int S = cfg.size;
  Rng rng(seed, 0x7363656e65);  // "scene"
  const int count = forced_count ? *forced_count : rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  if (count < 0 || count > 3) throw std::invalid_argument("generate_scene: shape count must lie in [0,3]");

  // occupied = shape pixels dilated by one, so later shapes keep a gap.
  // A failed layout restarts with a smaller size range.
  std::vector<Placed> shapes;
  const double hmin = std::max(2.0, 0.12 * S);
  const int restarts = 8;
  const int per_shape = std::max(1, cfg.placement_retries / restarts);
  bool complete = count == 0;
  for (int restart = 0; restart < restarts && !complete; ++restart) {
    const double hmax = std::max(hmin, 0.2 * S * (1.0 - 0.1 * restart));
    std::vector<char> blocked(static_cast<std::size_t>(S * S), 0);
    shapes.clear();
    for (int k = 0; k < count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < per_shape && !placed; ++attempt) {
        const auto cls = static_cast<ShapeClass>(rng.uniform_int(1, 3));
        const double hx = rng.uniform(hmin, hmax);
        const double hy = cls == ShapeClass::circle ? hx : rng.uniform(hmin, hmax);
        const double cx = rng.uniform(hx, S - 1 - hx), cy = rng.uniform(hy, S - 1 - hy);
        auto px = rasterize(cls, cx, cy, hx, hy, S);
        if (px.size() < 9) continue;
        bool clash = false;
        for (int p : px) clash = clash || blocked[static_cast<std::size_t>(p)];
        if (clash) continue;
        for (int p : px) {
          const int y = p / S, x = p % S;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < S && xx >= 0 && xx < S) blocked[static_cast<std::size_t>(yy * S + xx)] = 1;
            }
        }
        shapes.push_back({cls, std::move(px)});
        placed = true;
      }
      if (!placed) break;
    }
    complete = static_cast<int>(shapes.size()) == count;
  }
  if (!complete) {
    throw std::runtime_error("generate_scene: could not place " + std::to_string(count) + " shapes for seed " +
                             std::to_string(seed));
  }

  // layer order: a random permutation, nearer layers get larger depth
  std::vector<int> rank(shapes.size());
  std::iota(rank.begin(), rank.end(), 1);
  for (int i = static_cast<int>(rank.size()) - 1; i > 0; --i) std::swap(rank[i], rank[rng.uniform_int(0, i)]);

  Scene scene;
  scene.size = S;
  scene.seed = seed;
  scene.class_count_label = count;
  scene.image = Tensor<float>(Shape{1, S, S});
  scene.depth = Tensor<float>(Shape{1, S, S});
  scene.seg.assign(static_cast<std::size_t>(S * S), 0);

  // smooth background: two random low-frequency cosines
  double fx[2], fy[2], ph[2];
  for (int i = 0; i < 2; ++i) {
    fx[i] = rng.uniform(-1.0, 1.0);
    fy[i] = rng.uniform(-1.0, 1.0);
    ph[i] = rng.uniform(0.0, 2 * M_PI);
  }
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double v = 0;
      for (int i = 0; i < 2; ++i) v += 0.5 * std::cos(2 * M_PI * (fx[i] * x + fy[i] * y) / S + ph[i]);
      scene.image[y * S + x] = static_cast<float>(cfg.background_level + cfg.background_amplitude * v);
    }
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const double d = static_cast<double>(rank[k]) / static_cast<double>(shapes.size());
    const auto cls = static_cast<int>(shapes[k].cls);
    const auto level = static_cast<float>(kClassLevel[cls] + kDepthGain * (d - 0.5));
    for (int p : shapes[k].pixels) {
      scene.seg[static_cast<std::size_t>(p)] = cls;
      scene.depth[p] = static_cast<float>(d);
      scene.image[p] = level;
    }
  }
  return scene;
}

int modality_channels(Modality modality) {
  switch (modality) {
    case Modality::segmentation: return kSegClasses;
    case Modality::class_label: return 0;
    default: return 1;
  }
}

Tensor<float> edge_map(const Tensor<float>& image, double threshold) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 1 || s[1] != s[2]) throw ShapeError("edge_map: expected [1,S,S], got " + shape_str(s));
  const int S = static_cast<int>(s[1]);
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, S - 1);
    x = std::clamp(x, 0, S - 1);
    return static_cast<double>(image[y * S + x]);
  };
  Tensor<float> out(s);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      out[y * S + x] = std::sqrt(gx * gx + gy * gy) / 4.0 > threshold ? 1.0f : 0.0f;
    }
  return out;
}

Tensor<float> gaussian_blur(const Tensor<float>& image, double sigma) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("gaussian_blur: expected [1,H,W], got " + shape_str(s));
  const int H = static_cast<int>(s[1]), W = static_cast<int>(s[2]);
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<double> tmp(static_cast<std::size_t>(H * W));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * image[y * W + std::clamp(x + i, 0, W - 1)];
      tmp[static_cast<std::size_t>(y * W + x)] = acc;
    }
  Tensor<float> out(s);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, H - 1) * W + x)];
      out[y * W + x] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
    }
  return out;
}

Tensor<float> extract_modality(const Scene& scene, Modality modality, const WorldConfig& cfg) {
  const int S = scene.size;
  switch (modality) {
    case Modality::edge: return edge_map(scene.image, cfg.edge_threshold);
    case Modality::sketch: return gaussian_blur(edge_map(scene.image, cfg.edge_threshold), cfg.sketch_sigma);
    case Modality::segmentation: {
      Tensor<float> out(Shape{kSegClasses, S, S});
      for (int p = 0; p < S * S; ++p) out[scene.seg[static_cast<std::size_t>(p)] * S * S + p] = 1.0f;
      return out;
    }
    case Modality::depth: return scene.depth;
    case Modality::class_label: return Tensor<float>::scalar(static_cast<float>(scene.class_count_label));
  }
  throw std::invalid_argument("extract_modality: unknown modality");
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "rect") return MaskMode::rect;
  if (s == "brush") return MaskMode::brush;
  if (s == "border") return MaskMode::border;
  if (s == "half") return MaskMode::half;
  throw std::invalid_argument("unknown mask mode: " + s);
}

std::string mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::rect: return "rect";
    case MaskMode::brush: return "brush";
    case MaskMode::border: return "border";
    case MaskMode::half: return "half";
  }
  return "unknown";
}

namespace {

// Takes the n pixels with the smallest (score, tiebreak) pairs.
Tensor<float> lowest_scores(const std::vector<double>& score, std::int64_t n, int S, Rng& rng) {
  std::vector<std::pair<double, std::uint32_t>> keyed(score.size());
  for (std::size_t i = 0; i < score.size(); ++i) keyed[i] = {score[i], rng.next_u32()};
  std::vector<int> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return keyed[static_cast<std::size_t>(a)] < keyed[static_cast<std::size_t>(b)]; });
  Tensor<float> m(Shape{1, S, S});
  for (std::int64_t i = 0; i < n; ++i) m[order[static_cast<std::size_t>(i)]] = 1.0f;
  return m;
}

Tensor<float> brush_mask(std::int64_t n, int S, Rng& rng) {
  // paint time of every pixel; the first n painted form the mask
  std::vector<std::int64_t> painted_at(static_cast<std::size_t>(S * S), -1);
  std::int64_t painted = 0;
  const std::int64_t max_strokes = 64;
  for (std::int64_t stroke = 0; stroke < max_strokes && painted < n; ++stroke) {
    double x = rng.uniform(0, S), y = rng.uniform(0, S);
    const int radius = rng.uniform_int(1, std::max(1, S / 8));
    const int steps = rng.uniform_int(S / 2, 2 * S);
    double angle = rng.uniform(0, 2 * M_PI);
    for (int s = 0; s < steps && painted < n; ++s) {
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy > radius * radius) continue;
          const int yy = static_cast<int>(y) + dy, xx = static_cast<int>(x) + dx;
          if (yy < 0 || yy >= S || xx < 0 || xx >= S) continue;
          auto& p = painted_at[static_cast<std::size_t>(yy * S + xx)];
          if (p < 0) p = painted++;
        }
      angle += rng.uniform(-0.6, 0.6);
      x = std::clamp(x + std::cos(angle), 0.0, S - 1.0);
      y = std::clamp(y + std::sin(angle), 0.0, S - 1.0);
    }
  }
  // strokes exhausted: finish in random order
  std::vector<double> score(static_cast<std::size_t>(S * S));
  for (std::size_t i = 0; i < score.size(); ++i) {
    score[i] = painted_at[i] >= 0 ? static_cast<double>(painted_at[i]) : static_cast<double>(S * S);
  }
  return lowest_scores(score, n, S, rng);
}

}  // namespace

Tensor<float> generate_mask(const MaskSpec& spec, int size) {
  if (size < 2) throw std::invalid_argument("generate_mask: size must be >= 2");
  if (!(spec.ratio >= 0.0 && spec.ratio <= 1.0)) throw std::invalid_argument("generate_mask: ratio outside [0,1]");
  const int S = size;
  Rng rng(spec.seed, 0x6d61736b);  // "mask"
  if (spec.mode == MaskMode::half) {
    if (std::abs(spec.ratio - 0.5) > 0.05) {
      throw std::invalid_argument("generate_mask: half mode cannot reach ratio " + std::to_string(spec.ratio));
    }
    if (S % 2 != 0) throw std::invalid_argument("generate_mask: half mode needs an even size");
    const int side = rng.uniform_int(0, 3);
    Tensor<float> m(Shape{1, S, S});
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const bool in = side == 0 ? x < S / 2 : side == 1 ? x >= S / 2 : side == 2 ? y < S / 2 : y >= S / 2;
        m[y * S + x] = in ? 1.0f : 0.0f;
      }
    return m;
  }
  const auto n = static_cast<std::int64_t>(std::llround(spec.ratio * S * S));
  if (n == 0) return Tensor<float>(Shape{1, S, S});
  if (n == static_cast<std::int64_t>(S) * S) return Tensor<float>(Shape{1, S, S}, 1.0f);

  std::vector<double> score(static_cast<std::size_t>(S * S));
  switch (spec.mode) {
    case MaskMode::rect: {
      const double cx = rng.uniform(0, S - 1), cy = rng.uniform(0, S - 1);
      const double aspect = std::exp(rng.uniform(-0.7, 0.7));
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          score[static_cast<std::size_t>(y * S + x)] = std::max(std::abs(x - cx) / aspect, std::abs(y - cy) * aspect);
      return lowest_scores(score, n, S, rng);
    }
    case MaskMode::border: {
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          score[static_cast<std::size_t>(y * S + x)] = std::min({x, y, S - 1 - x, S - 1 - y});
      return lowest_scores(score, n, S, rng);
    }
    case MaskMode::brush: return brush_mask(n, S, rng);
    case MaskMode::half: break;
  }
  throw std::invalid_argument("generate_mask: unknown mode");
}

MaskSpec random_mask_spec(std::uint64_t seed) {
  Rng rng(seed, 0x70726f74);  // "prot"
  MaskSpec spec;
  spec.ratio = rng.uniform();
  spec.mode = static_cast<MaskMode>(rng.uniform_int(0, 2));
  spec.seed = mix_seed(seed, 0x6d);
  return spec;
}

SeedRange split_range(Split split) {
  switch (split) {
    case Split::train: return {0, 10000};
    case Split::val: return {10000, 1000};
    case Split::test: return {11000, 1000};
  }
  throw std::invalid_argument("unknown split");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + s);
}

std::string split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

Tensor<float> to_latent(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  for (std::int64_t i = 0; i < image.numel(); ++i) out[i] = 2.0f * image[i] - 1.0f;
  return out;
}

Tensor<float> from_latent(const Tensor<float>& latent) {
  Tensor<float> out(latent.shape());
  for (std::int64_t i = 0; i < latent.numel(); ++i) out[i] = std::clamp(0.5f * (latent[i] + 1.0f), 0.0f, 1.0f);
  return out;
}

}  // namespace magic
