#pragma once

#include <string>

#include "magic/tensor.hpp"

namespace magic {

/// Binary PGM (P5, maxval 255) of a [1,H,W] or [H,W] tensor in [0,1].
void write_pgm(const std::string& path, const Tensor<float>& image);
/// Reads a P5 file into a [1,H,W] tensor in [0,1].
Tensor<float> read_pgm(const std::string& path);
/// Binary PPM (P6) of a [3,H,W] tensor in [0,1].
void write_ppm(const std::string& path, const Tensor<float>& image);

/// 8-bit quantisation used by the writers (round to nearest, clamped).
unsigned char quantize(float v);

}  // namespace magic
