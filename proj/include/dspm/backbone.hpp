#pragma once

// Four-level feature pyramid encoder: a strided Conv-BN-LeakyReLU stack down
// to 1/8 resolution, then a top-down pathway with lateral 1×1 connections
// and 3×3 smoothing.

#include <array>
#include <string>
#include <vector>

#include "dspm/params.hpp"

namespace dspm {

inline constexpr std::size_t kLevels = 4;
// Channels of levels 1..4 (coarse to fine).
inline constexpr std::array<std::size_t, kLevels> kLevelChannels{64, 32, 16, 8};

// Level l (0-based, coarse to fine) of every view: [N, h_l, H/2^(3-l), W/2^(3-l)].
template <typename T>
using FeaturePyramid = std::array<Tensor<T>, kLevels>;

template <typename T>
void add_backbone_params(ParamSet<T>& ps, Rng& rng) {
  // Bottom-up: full, 1/2, 1/4, 1/8 with 8, 16, 32, 64 channels.
  add_cbl(ps, "backbone.down0", 3, 8, 3, rng);
  add_cbl(ps, "backbone.down1", 8, 16, 3, rng);
  add_cbl(ps, "backbone.down1b", 16, 16, 3, rng);
  add_cbl(ps, "backbone.down2", 16, 32, 3, rng);
  add_cbl(ps, "backbone.down2b", 32, 32, 3, rng);
  add_cbl(ps, "backbone.down3", 32, 64, 3, rng);
  add_cbl(ps, "backbone.down3b", 64, 64, 3, rng);
  add_conv(ps, "backbone.out1", 64, 64, 3, rng, 0.5);
  for (std::size_t l = 1; l < kLevels; ++l) {
    const std::size_t c = kLevelChannels[l];
    const std::string n = std::to_string(l + 1);
    add_conv(ps, "backbone.reduce" + n, kLevelChannels[l - 1], c, 1, rng, 0.5);
    add_conv(ps, "backbone.lateral" + n, c, c, 1, rng, 0.5);
    add_conv(ps, "backbone.out" + n, c, c, 3, rng, 0.5);
  }
}

// images: [N,3,H,W] with H, W divisible by 8. All views go through the
// network as one batch, so they share weights and batch statistics.
template <typename T>
FeaturePyramid<T> extract_pyramid(ParamSet<T>& ps, const Tensor<T>& images, bool training) {
  if (images.rank() != 4 || images.dim(1) != 3) throw DimensionError("extract_pyramid: images must be [N,3,H,W]");
  if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0)
    throw ConfigError("extract_pyramid: image size " + to_string(images.shape()) + " is not divisible by 8");
  const Tensor<T> c0 = cbl(ps, "backbone.down0", images, training);
  const Tensor<T> c1 = cbl(ps, "backbone.down1b", cbl(ps, "backbone.down1", c0, training, 2), training);
  const Tensor<T> c2 = cbl(ps, "backbone.down2b", cbl(ps, "backbone.down2", c1, training, 2), training);
  const Tensor<T> c3 = cbl(ps, "backbone.down3b", cbl(ps, "backbone.down3", c2, training, 2), training);
  const std::array<Tensor<T>, kLevels> bottom_up{c3, c2, c1, c0};
  FeaturePyramid<T> out;
  Tensor<T> inner = c3;
  out[0] = conv(ps, "backbone.out1", inner);
  for (std::size_t l = 1; l < kLevels; ++l) {
    const std::string n = std::to_string(l + 1);
    inner = upsample_bilinear2x(conv(ps, "backbone.reduce" + n, inner)) + conv(ps, "backbone.lateral" + n, bottom_up[l]);
    out[l] = conv(ps, "backbone.out" + n, inner);
  }
  return out;
}

// Features of one view at one level: [h, H_l, W_l].
template <typename T>
Tensor<T> view_features(const FeaturePyramid<T>& pyr, std::size_t level, std::size_t view) {
  const Tensor<T>& x = pyr[level];
  return reshape(slice(x, 0, view, 1), Shape{x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace dspm
