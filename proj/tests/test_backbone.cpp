#include <gtest/gtest.h>

#include <cmath>

#include "dspm/backbone.hpp"
#include "dspm/gradcheck.hpp"
#include "dspm/synthscene.hpp"

using namespace dspm;

namespace {

// Smooth noise image sampled from a canvas so that shifted crops show the
// same content.
Array canvas_crop(std::size_t H, std::size_t W, long ox, long oy) {
  Texture tex;
  tex.seed = 17;
  tex.frequency = 0.15;
  std::vector<float> v(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        v[(c * H + y) * W + x] = static_cast<float>(
            0.5 + tex.noise(static_cast<double>(static_cast<long>(x) + ox),
                            static_cast<double>(static_cast<long>(y) + oy), c + 1));
  return Array({1, 3, H, W}, std::move(v));
}

}  // namespace

TEST(Backbone, PyramidShapesFollowTheLevelContract) {
  Rng rng(1);
  ParamSet<float> ps;
  add_backbone_params(ps, rng);
  Rng img(2);
  const Array images = random_tensor<float>({3, 3, 64, 80}, img, 0.0, 1.0);
  const auto pyr = extract_pyramid(ps, images, true);
  for (std::size_t l = 0; l < kLevels; ++l) {
    const std::size_t f = std::size_t(8) >> l;
    EXPECT_EQ(pyr[l].shape(), (Shape{3, kLevelChannels[l], 64 / f, 80 / f})) << "level " << l;
  }
  EXPECT_EQ(view_features(pyr, 2, 1).shape(), (Shape{16, 32, 40}));
}

TEST(Backbone, SizeNotDivisibleByEightIsConfigError) {
  Rng rng(1);
  ParamSet<float> ps;
  add_backbone_params(ps, rng);
  EXPECT_THROW(extract_pyramid(ps, Array::zeros({1, 3, 60, 80}), false), ConfigError);
  EXPECT_THROW(extract_pyramid(ps, Array::zeros({1, 1, 64, 80}), false), DimensionError);
}

TEST(Backbone, IdenticalViewsGiveIdenticalFeatures) {
  Rng rng(3);
  ParamSet<float> ps;
  add_backbone_params(ps, rng);
  const Array one = canvas_crop(32, 32, 0, 0);
  const Array two = concat(std::vector<Array>{one, one}, 0);
  const auto pyr = extract_pyramid(ps, two, true);
  for (std::size_t l = 0; l < kLevels; ++l) {
    const Array a = view_features(pyr, l, 0), b = view_features(pyr, l, 1);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
  }
}

TEST(Backbone, EvalModeIsTranslationCovariantAwayFromBorders) {
  Rng rng(4);
  ParamSet<float> ps;
  add_backbone_params(ps, rng);
  const std::size_t S = 128;
  const long shift = 8;
  const auto a = extract_pyramid(ps, canvas_crop(S, S, 0, 0), false);
  const auto b = extract_pyramid(ps, canvas_crop(S, S, shift, shift), false);
  // Finest level: feature at p in the shifted crop equals p + shift in the
  // original one, in a window far from every border.
  const std::size_t C = kLevelChannels[3];
  const auto fa = a[3].data();
  const auto fb = b[3].data();
  double worst = 0.0, scale = 0.0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 52; y < 68; ++y)
      for (std::size_t x = 52; x < 68; ++x) {
        const float va = fa[(c * S + y + shift) * S + x + shift];
        const float vb = fb[(c * S + y) * S + x];
        worst = std::max(worst, static_cast<double>(std::abs(va - vb)));
        scale = std::max(scale, static_cast<double>(std::abs(va)));
      }
  EXPECT_GT(scale, 1e-3);
  EXPECT_LT(worst, 1e-4 * std::max(1.0, scale));
}

TEST(Backbone, WeightGradientsMatchFiniteDifferences) {
  Rng rng(5);
  ParamSet<double> ps;
  add_backbone_params(ps, rng);
  Rng img(6);
  const Tensor<double> images = random_tensor<double>({2, 3, 16, 16}, img, 0.0, 1.0);
  for (const std::string name : {"backbone.down0.weight", "backbone.down3b.bn.gamma", "backbone.lateral4.weight",
                                 "backbone.out2.bias"}) {
    const Tensor<double> proj4 = random_tensor<double>({2, 8, 16, 16}, img);
    const Tensor<double> proj2 = random_tensor<double>({2, 32, 4, 4}, img);
    GradCheckOptions opt;
    opt.step = 1e-6;
    opt.max_entries_per_input = 24;
    const auto res = check_gradients<double>(
        name,
        [&](const std::vector<Tensor<double>>& in) {
          ps.at(name) = in[0];
          const auto pyr = extract_pyramid(ps, images, true);
          return sum(pyr[3] * proj4) + sum(pyr[1] * proj2);
        },
        {ps.at(name).detach()}, opt);
    EXPECT_TRUE(res.passed) << name << " rel err " << res.max_rel_error;
  }
}

TEST(Backbone, ParameterInventory) {
  Rng rng(7);
  ParamSet<float> ps;
  add_backbone_params(ps, rng);
  for (const char* n : {"backbone.down0.weight", "backbone.down3b.bn.beta", "backbone.out1.weight",
                        "backbone.reduce2.weight", "backbone.lateral3.bias", "backbone.out4.weight"})
    EXPECT_TRUE(ps.has(n)) << n;
  EXPECT_EQ(ps.at("backbone.out4.weight").shape(), (Shape{8, 8, 3, 3}));
  EXPECT_EQ(ps.at("backbone.reduce2.weight").shape(), (Shape{32, 64, 1, 1}));
}
