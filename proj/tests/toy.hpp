#pragma once

// Reduced scale used by tests that train.

#include "magic/toyworld.hpp"
#include "magic/unet.hpp"

namespace magic::testing {

inline UNetConfig toy_unet(int size = 16) {
  UNetConfig c;
  c.image_size = size;
  c.base_channels = 16;
  c.channel_mults = {1, 2, 2};
  c.blocks_per_scale = 1;
  c.time_embed_dim = 64;
  c.cond_embed_classes = 4;
  return c;
}

inline WorldConfig toy_world(int size = 16) {
  WorldConfig w;
  w.size = size;
  return w;
}

}  // namespace magic::testing
