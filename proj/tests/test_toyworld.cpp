#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "magic/toyworld.hpp"

using namespace magic;

namespace {

bool same_scene(const Scene& a, const Scene& b) {
  return bitwise_equal(a.image, b.image) && bitwise_equal(a.depth, b.depth) && a.seg == b.seg &&
         a.class_count_label == b.class_count_label;
}

}  // namespace

TEST(Scene, SameSeedBitIdentical) {
  WorldConfig w;
  for (std::uint64_t seed : {0u, 17u, 11999u}) EXPECT_TRUE(same_scene(generate_scene(seed, w), generate_scene(seed, w)));
  EXPECT_FALSE(same_scene(generate_scene(1, w), generate_scene(2, w)));
}

TEST(Scene, ForcedZeroShapesIsBackground) {
  WorldConfig w;
  const Scene s = generate_scene(5, w, 0);
  EXPECT_EQ(s.class_count_label, 0);
  for (int id : s.seg) EXPECT_EQ(id, 0);
  for (float d : s.depth.data()) EXPECT_EQ(d, 0.0f);
}

TEST(Scene, InvariantsHold) {
  WorldConfig w;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Scene s = generate_scene(seed, w);
    int shapes = 0;
    for (std::size_t p = 0; p < s.seg.size(); ++p) {
      ASSERT_GE(s.seg[p], 0);
      ASSERT_LT(s.seg[p], kSegClasses);
      // depth support is the foreground
      ASSERT_EQ(s.seg[p] == 0, s.depth[static_cast<std::int64_t>(p)] == 0.0f);
      shapes += s.seg[p] != 0;
    }
    EXPECT_GE(s.class_count_label, 1);
    EXPECT_LE(s.class_count_label, 3);
    EXPECT_GT(shapes, 0);
    for (float v : s.image.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Scene, ShapeCountHistogramUniform) {
  WorldConfig w;
  int hist[4] = {0, 0, 0, 0};
  const int n = 1000;
  for (int seed = 0; seed < n; ++seed) ++hist[generate_scene(static_cast<std::uint64_t>(seed), w).class_count_label];
  EXPECT_EQ(hist[0], 0);
  double chi2 = 0;
  for (int k = 1; k <= 3; ++k) {
    const double e = n / 3.0;
    chi2 += (hist[k] - e) * (hist[k] - e) / e;
  }
  // chi-square, 2 degrees of freedom, alpha 0.01
  EXPECT_LT(chi2, 9.21) << hist[1] << " " << hist[2] << " " << hist[3];
}

TEST(Scene, PlacementWorksAtSmallSize) {
  WorldConfig w;
  w.size = 16;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) EXPECT_NO_THROW(generate_scene(seed, w, 3));
}

TEST(Scene, ImpossiblePlacementReportsSeed) {
  WorldConfig w;
  w.size = 8;
  w.placement_retries = 8;
  bool threw = false;
  for (std::uint64_t seed = 0; seed < 50 && !threw; ++seed) {
    try {
      generate_scene(seed, w, 3);
    } catch (const std::runtime_error& e) {
      threw = true;
      EXPECT_NE(std::string(e.what()).find("seed " + std::to_string(seed)), std::string::npos);
    }
  }
  EXPECT_TRUE(threw);
}

TEST(Modalities, ConstantImageHasNoEdges) {
  Tensor<float> img(Shape{1, 16, 16});
  img.fill(0.4f);
  const Tensor<float> e = edge_map(img, 0.2);
  for (float v : e.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Modalities, RectangleEdgeIsItsPerimeter) {
  const int S = 20;
  const int y0 = 4, y1 = 12, x0 = 6, x1 = 15;  // inclusive
  Tensor<float> img(Shape{1, S, S});
  auto inside = [&](int y, int x) { return y >= y0 && y <= y1 && x >= x0 && x <= x1; };
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) img[y * S + x] = inside(y, x) ? 0.65f : 0.15f;
  const Tensor<float> e = edge_map(img, 0.2);
  // perimeter: pixels with a 4-neighbour on the other side of the boundary
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      bool boundary = false;
      const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k], xx = x + dx[k];
        if (yy >= 0 && yy < S && xx >= 0 && xx < S && inside(yy, xx) != inside(y, x)) boundary = true;
      }
      EXPECT_EQ(e[y * S + x], boundary ? 1.0f : 0.0f) << y << "," << x;
    }
}

TEST(Modalities, SegmentationOneHot) {
  WorldConfig w;
  const Scene s = generate_scene(3, w);
  const Tensor<float> oh = extract_modality(s, Modality::segmentation, w);
  ASSERT_EQ(oh.shape(), (Shape{kSegClasses, 32, 32}));
  for (int p = 0; p < 32 * 32; ++p) {
    float total = 0;
    for (int k = 0; k < kSegClasses; ++k) total += oh[k * 32 * 32 + p];
    EXPECT_EQ(total, 1.0f);
    EXPECT_EQ(oh[s.seg[static_cast<std::size_t>(p)] * 32 * 32 + p], 1.0f);
  }
}

TEST(Modalities, ShapesAndRanges) {
  WorldConfig w;
  const Scene s = generate_scene(9, w);
  EXPECT_EQ(extract_modality(s, Modality::edge, w).shape(), (Shape{1, 32, 32}));
  const Tensor<float> sk = extract_modality(s, Modality::sketch, w);
  EXPECT_EQ(sk.shape(), (Shape{1, 32, 32}));
  for (float v : sk.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_TRUE(bitwise_equal(extract_modality(s, Modality::depth, w), s.depth));
  EXPECT_EQ(extract_modality(s, Modality::class_label, w).item(), static_cast<float>(s.class_count_label));
  EXPECT_THROW(parse_modality("pose"), std::invalid_argument);
}

TEST(Modalities, EdgesLieOnSegmentationBoundaries) {
  WorldConfig w;
  const int S = w.size;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Scene s = generate_scene(seed, w);
    const Tensor<float> e = extract_modality(s, Modality::edge, w);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        if (e[y * S + x] == 0.0f) continue;
        bool near_boundary = false;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = std::clamp(y + dy, 0, S - 1), xx = std::clamp(x + dx, 0, S - 1);
            near_boundary = near_boundary || s.seg[static_cast<std::size_t>(yy * S + xx)] != s.seg[static_cast<std::size_t>(y * S + x)];
          }
        ASSERT_TRUE(near_boundary) << "seed " << seed << " at " << y << "," << x;
      }
  }
}

TEST(Modalities, DefaultEdgeDensityInBand) {
  WorldConfig w;
  double on = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 12000; ++seed) {
    const Tensor<float> e = extract_modality(generate_scene(seed, w), Modality::edge, w);
    for (float v : e.data()) on += v;
    total += static_cast<double>(e.numel());
  }
  const double density = on / total;
  EXPECT_GE(density, 0.02);
  EXPECT_LE(density, 0.15);
}

TEST(Masks, DegenerateRatios) {
  for (MaskMode m : {MaskMode::rect, MaskMode::brush, MaskMode::border}) {
    const Tensor<float> zero = generate_mask({m, 0.0, 4}, 32);
    const Tensor<float> one = generate_mask({m, 1.0, 4}, 32);
    for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
    for (float v : one.data()) EXPECT_EQ(v, 1.0f);
  }
}

TEST(Masks, HitRequestedRatioExactly) {
  Rng rng(12);
  for (MaskMode m : {MaskMode::rect, MaskMode::brush, MaskMode::border}) {
    for (int i = 0; i < 200; ++i) {
      const double ratio = rng.uniform();
      const Tensor<float> mask = generate_mask({m, ratio, static_cast<std::uint64_t>(i)}, 32);
      double on = 0;
      for (float v : mask.data()) {
        ASSERT_TRUE(v == 0.0f || v == 1.0f);
        on += v;
      }
      EXPECT_EQ(on, std::round(ratio * 1024)) << mask_mode_name(m) << " ratio " << ratio;
    }
  }
}

TEST(Masks, HalfMode) {
  const Tensor<float> mask = generate_mask({MaskMode::half, 0.52, 3}, 32);
  double on = 0;
  for (float v : mask.data()) on += v;
  EXPECT_EQ(on, 512);
  EXPECT_THROW(generate_mask({MaskMode::half, 0.3, 3}, 32), std::invalid_argument);
  EXPECT_THROW(generate_mask({MaskMode::rect, 1.2, 3}, 32), std::invalid_argument);
}

TEST(Masks, ProtocolRatiosAreUniform) {
  const int n = 10000;
  std::vector<double> r;
  for (int i = 0; i < n; ++i) {
    const Tensor<float> mask = generate_mask(random_mask_spec(static_cast<std::uint64_t>(i)), 32);
    double on = 0;
    for (float v : mask.data()) on += v;
    r.push_back(on / 1024.0);
  }
  std::sort(r.begin(), r.end());
  double d = 0;
  for (int i = 0; i < n; ++i) d = std::max({d, (i + 1.0) / n - r[i], r[i] - static_cast<double>(i) / n});
  // Kolmogorov-Smirnov, alpha 0.01
  EXPECT_LT(d, 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST(Splits, FixedAndDisjoint) {
  EXPECT_EQ(split_range(Split::train).first, 0u);
  EXPECT_EQ(split_range(Split::train).count, 10000u);
  EXPECT_EQ(split_range(Split::val).first, 10000u);
  EXPECT_EQ(split_range(Split::val).count, 1000u);
  EXPECT_EQ(split_range(Split::test).first, 11000u);
  EXPECT_EQ(split_range(Split::test).count, 1000u);
  EXPECT_EQ(parse_split("test"), Split::test);
  EXPECT_THROW(parse_split("holdout"), std::invalid_argument);
}

TEST(Latent, RoundTrip) {
  Tensor<float> img(Shape{1, 4, 4});
  for (int i = 0; i < 16; ++i) img[i] = static_cast<float>(i) / 15.0f;
  const Tensor<float> back = from_latent(to_latent(img));
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(back[i], img[i], 1e-6);
  Tensor<float> wild(Shape{1, 1, 2}, std::vector<float>{-3.0f, 3.0f});
  EXPECT_EQ(from_latent(wild)[0], 0.0f);
  EXPECT_EQ(from_latent(wild)[1], 1.0f);
}
