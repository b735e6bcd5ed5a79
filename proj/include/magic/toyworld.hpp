#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "magic/modality.hpp"
#include "magic/rng.hpp"
#include "magic/tensor.hpp"

namespace magic {

enum class ShapeClass { background = 0, circle = 1, rectangle = 2, triangle = 3 };
inline constexpr int kSegClasses = 4;

struct WorldConfig {
  int size = 32;
  int min_shapes = 1;
  int max_shapes = 3;
  double background_level = 0.15;
  double background_amplitude = 0.05;
  double edge_threshold = 0.2;
  double sketch_sigma = 1.0;
  int placement_retries = 400;

  void validate() const;
};

/// Base intensity of each class; shapes add depth_gain * (depth - 0.5).
inline constexpr double kClassLevel[kSegClasses] = {0.15, 0.45, 0.65, 0.85};
inline constexpr double kDepthGain = 0.1;

struct Scene {
  int size = 0;
  Tensor<float> image;     // [1,S,S] in [0,1]
  std::vector<int> seg;    // S*S class ids
  Tensor<float> depth;     // [1,S,S], 0 on background
  int class_count_label = 0;
  std::uint64_t seed = 0;
};

/// Renders 1..3 pairwise disjoint shapes (one background pixel apart at
/// least) over a smooth background. `forced_count` overrides the drawn count.
Scene generate_scene(std::uint64_t seed, const WorldConfig& cfg, std::optional<int> forced_count = std::nullopt);

/// Modality maps: edge/sketch/depth [1,S,S], segmentation one-hot [K,S,S],
/// class_label a scalar holding the shape count.
Tensor<float> extract_modality(const Scene& scene, Modality modality, const WorldConfig& cfg);

/// Channels taken by a modality map.
int modality_channels(Modality modality);

/// Sobel magnitude (kernels scaled by 1/4, replicated border) above threshold.
Tensor<float> edge_map(const Tensor<float>& image, double threshold);
/// Separable Gaussian blur with replicated border, radius ceil(3 sigma).
Tensor<float> gaussian_blur(const Tensor<float>& image, double sigma);

enum class MaskMode { rect, brush, border, half };
MaskMode parse_mask_mode(const std::string& s);
std::string mask_mode_name(MaskMode m);

struct MaskSpec {
  MaskMode mode = MaskMode::rect;
  double ratio = 0.5;
  std::uint64_t seed = 0;
};

/// Binary mask [1,S,S]; 1 marks the region to complete. Hits exactly
/// round(ratio * S * S) pixels except for `half`, which needs ratio within
/// 0.05 of one half and always covers half the image.
Tensor<float> generate_mask(const MaskSpec& spec, int size);

/// The evaluation protocol: ratio ~ Uniform(0,1), mode uniform over rect/brush/border.
MaskSpec random_mask_spec(std::uint64_t seed);

enum class Split { train, val, test };
struct SeedRange {
  std::uint64_t first = 0;
  std::uint64_t count = 0;
};
SeedRange split_range(Split split);
Split parse_split(const std::string& s);
std::string split_name(Split split);

/// Image intensities in [0,1] to latent values in [-1,1], and back (clamped).
Tensor<float> to_latent(const Tensor<float>& image);
Tensor<float> from_latent(const Tensor<float>& latent);

}  // namespace magic
