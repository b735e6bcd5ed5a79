#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

namespace magic {

enum class Modality { edge, sketch, segmentation, depth, class_label };

inline constexpr std::array<Modality, 4> kSpatialModalities{Modality::edge, Modality::sketch, Modality::segmentation,
                                                            Modality::depth};

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::edge: return "edge";
    case Modality::sketch: return "sketch";
    case Modality::segmentation: return "segmentation";
    case Modality::depth: return "depth";
    case Modality::class_label: return "class_label";
  }
  return "unknown";
}

inline Modality parse_modality(std::string_view s) {
  if (s == "edge" || s == "canny") return Modality::edge;
  if (s == "sketch") return Modality::sketch;
  if (s == "segmentation" || s == "seg") return Modality::segmentation;
  if (s == "depth") return Modality::depth;
  if (s == "class_label" || s == "text") return Modality::class_label;
  throw std::invalid_argument("unknown modality: " + std::string(s));
}

/// Stable index used to derive per-modality random streams.
inline int modality_index(Modality m) { return static_cast<int>(m); }

}  // namespace magic
