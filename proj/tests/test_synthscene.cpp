#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "dspm/synthscene.hpp"

using namespace dspm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dspm_synth_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SceneSpec small_spec(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  return s;
}

bool same_bits(const Array& a, const Array& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Synth, FrontoPlaneHasConstantDepth) {
  SceneSpec spec = small_spec(1);
  auto g = single_plane_scene(spec, 3.1);
  std::size_t valid = 0;
  for (float d : g.data.views[0].depth.data()) {
    ASSERT_EQ(d, 3.1f);
    ++valid;
  }
  EXPECT_EQ(valid, spec.width * spec.height);
}

TEST(Synth, SlantedPlaneDepthMatchesRayPlaneIntersection) {
  SceneSpec spec = small_spec(2);
  spec.converging = true;
  auto g = single_plane_scene(spec, 3.0, 0.3, -0.2);
  const Surface& plane = g.scene.surfaces[0];
  const Vec3 n = plane.frame.col(2);
  for (std::size_t v = 0; v < 2; ++v) {
    const Camera& cam = g.data.views[v].camera;
    const Array& depth = g.data.views[v].depth;
    for (std::size_t y = 0; y < spec.height; y += 3)
      for (std::size_t x = 0; x < spec.width; x += 3) {
        // Camera-frame ray through the pixel, plane in camera coordinates.
        const Vec3 ray((x - cam.K(0, 2)) / cam.K(0, 0), (y - cam.K(1, 2)) / cam.K(1, 1), 1.0);
        const Vec3 nc = cam.R * n;
        const Vec3 pc = cam.R * plane.center + cam.t;
        const double z = nc.dot(pc) / nc.dot(ray);
        const float got = depth[y * spec.width + x];
        if (z < cam.d_min || z > cam.d_max) {
          EXPECT_EQ(got, 0.0f);
          continue;
        }
        EXPECT_NEAR(got, z, 1e-6);
      }
  }
}

TEST(Synth, SameSeedIsBitIdentical) {
  auto a = generate_scene(small_spec(5));
  auto b = generate_scene(small_spec(5));
  ASSERT_EQ(a.views.size(), b.views.size());
  for (std::size_t i = 0; i < a.views.size(); ++i) {
    EXPECT_TRUE(same_bits(a.views[i].image, b.views[i].image));
    EXPECT_TRUE(same_bits(a.views[i].depth, b.views[i].depth));
  }
  auto c = generate_scene(small_spec(6));
  EXPECT_FALSE(same_bits(a.views[0].image, c.views[0].image));
}

TEST(Synth, UnsatisfiableSpecIsConfigError) {
  SceneSpec s = small_spec(1);
  s.patches = 0;
  s.cuboids = 0;
  EXPECT_THROW(generate_scene(s), ConfigError);
  s = small_spec(1);
  s.views = 1;
  EXPECT_THROW(generate_scene(s), ConfigError);
}

TEST(Synth, EveryScenehasLargeDiscontinuityAndValidRange) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    SceneSpec spec = small_spec(seed);
    auto data = generate_scene(spec);
    EXPECT_GT(max_depth_jump(data.views[0].depth), 0.1 * (spec.d_max - spec.d_min)) << seed;
    for (const auto& v : data.views)
      for (float d : v.depth.data()) EXPECT_TRUE(d == 0.0f || (d >= spec.d_min && d <= spec.d_max));
  }
}

TEST(Synth, AdjacentViewDepthsAreMutuallyConsistent) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto g = generate_scene_full(small_spec(seed));
    const auto& va = g.data.views[0];
    const std::size_t W = va.depth.dim(1), H = va.depth.dim(0);
    std::size_t checked = 0;
    for (std::size_t b = 1; b < g.data.views.size(); ++b) {
      const auto& vb = g.data.views[b];
      for (std::size_t y = 0; y < H; y += 2)
        for (std::size_t x = 0; x < W; x += 2) {
          const double d = va.depth[y * W + x];
          if (d <= 0.0) continue;
          const Vec3 X = back_project(va.camera, double(x), double(y), d);
          // Visibility by casting a ray from b's centre: the first hit must be X.
          const Vec3 o = vb.camera.center();
          const Hit h = g.scene.first_hit(o, X - o);
          if (std::abs(h.t - 1.0) > 1e-5) continue;
          if (!visible_in(vb, X, 0.02)) continue;  // leaves the frame
          const auto pr = project_point(vb.camera, X);
          // Inverse depth is affine across one planar face, so interpolate it
          // inside footprints that stay on the face X lies on.
          if (!same_label_footprint(g.labels[0][y * W + x], g.labels[b], W, H, pr.pixel)) continue;
          const std::size_t x0 = std::size_t(pr.pixel.x()), y0 = std::size_t(pr.pixel.y());
          const double fx = pr.pixel.x() - x0, fy = pr.pixel.y() - y0;
          auto inv = [&](std::size_t xx, std::size_t yy) { return 1.0 / vb.depth[std::min(yy, H - 1) * W + std::min(xx, W - 1)]; };
          const double gt_b = 1.0 / ((1 - fy) * ((1 - fx) * inv(x0, y0) + fx * inv(x0 + 1, y0)) +
                                     fy * ((1 - fx) * inv(x0, y0 + 1) + fx * inv(x0 + 1, y0 + 1)));
          EXPECT_LT(std::abs(gt_b - pr.depth), 1e-3 * pr.depth);
          const Vec3 Xb = back_project(vb.camera, pr.pixel.x(), pr.pixel.y(), gt_b);
          EXPECT_LT((project_point(va.camera, Xb).pixel - Vec2(double(x), double(y))).norm(), 0.5);
          ++checked;
        }
    }
    EXPECT_GT(checked, 500u);
  }
}

TEST(Photoconsistency, WhitePlaneHasZeroDeviation) {
  SceneSpec spec = small_spec(3);
  spec.texture_amplitude = 0.0;
  Texture white;
  white.amplitude = 0.0;
  white.base = Vec3(1, 1, 1);
  auto g = single_plane_scene(spec, 3.0, 0.0, 0.0, white);
  auto rep = photoconsistency_check(g.data.views);
  EXPECT_GT(rep.checked, 0u);
  EXPECT_EQ(rep.max_deviation, 0.0);
}

TEST(Photoconsistency, TexturedPlaneTwoViewsWithinTwoPercent) {
  SceneSpec spec = small_spec(4);
  spec.views = 2;
  auto g = single_plane_scene(spec, 3.0, 0.2, 0.1);
  auto rep = photoconsistency_check(g.data.views, 1000, 9);
  EXPECT_GT(rep.checked, 1000u);
  EXPECT_LT(rep.max_deviation, 0.02);
}

TEST(Photoconsistency, GeneratedScenesWithinTwoPercent) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto g = generate_scene_full(small_spec(seed));
    auto rep = photoconsistency_check(g.data.views, 1000, seed, &g.labels);
    EXPECT_LT(rep.max_deviation, 0.02) << seed;
    EXPECT_GT(rep.excluded, 0u);
  }
}

TEST(Photoconsistency, OccludedPointIsExcluded) {
  SceneSpec spec = small_spec(8);
  spec.views = 2;
  auto g = step_edge_scene(spec, 2.4, 3.6);
  const auto& v0 = g.data.views[0];
  const auto& v1 = g.data.views[1];
  // A background point of view 1 hidden behind the foreground quad in view 0.
  const std::size_t W = spec.width, H = spec.height;
  bool found = false;
  for (std::size_t y = 0; y < H && !found; ++y)
    for (std::size_t x = 0; x < W && !found; ++x) {
      const float d = v1.depth[y * W + x];
      if (d < 3.5f) continue;
      const Vec3 X = back_project(v1.camera, double(x), double(y), d);
      const Vec3 o = v0.camera.center();
      const Hit h = g.scene.first_hit(o, X - o);
      const auto pr = project_point(v0.camera, X);
      const bool inside = pr.pixel.x() > 1 && pr.pixel.y() > 1 && pr.pixel.x() < W - 2 && pr.pixel.y() < H - 2;
      if (inside && h.t < 0.9) {
        EXPECT_FALSE(visible_in(v0, X));
        found = true;
      }
    }
  EXPECT_TRUE(found);
}

TEST(Pfm, LittleAndBigEndianHeaders) {
  const float vals[2] = {1.5f, -2.25f};
  auto le = [](float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    std::string s;
    for (int b = 0; b < 4; ++b) s.push_back(char((u >> (8 * b)) & 0xFF));
    return s;
  };
  auto be = [&](float f) {
    std::string s = le(f);
    return std::string(s.rbegin(), s.rend());
  };
  auto m1 = decode_pfm("le.pfm", "Pf\n2 1\n-1.0\n" + le(vals[0]) + le(vals[1]));
  auto m2 = decode_pfm("be.pfm", "Pf\n2 1\n1.0\n" + be(vals[0]) + be(vals[1]));
  EXPECT_EQ(m1.data, std::vector<float>(vals, vals + 2));
  EXPECT_EQ(m2.data, std::vector<float>(vals, vals + 2));
}

TEST(Pfm, RowsAreStoredBottomToTop) {
  FloatMap m{2, 2, 1, {1, 2, 3, 4}};
  const std::string bytes = encode_pfm(m);
  const std::size_t header = std::string("Pf\n2 2\n-1.0\n").size();
  float first;
  std::memcpy(&first, bytes.data() + header, 4);
  EXPECT_EQ(first, 3.0f);
  EXPECT_EQ(decode_pfm("m", bytes).data, m.data);
}

TEST(Pfm, MalformedInputReportsOffset) {
  try {
    decode_pfm("bad.pfm", "Pf\n2 x\n-1.0\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.path(), "bad.pfm");
    EXPECT_EQ(e.offset(), 5u);
  }
  EXPECT_THROW(decode_pfm("t.pfm", "Pf\n2 2\n-1.0\n1234"), ParseError);
  EXPECT_THROW(decode_pfm("m.pfm", "P5\n2 2\n-1.0\n"), ParseError);
}

TEST(Dataset, WriteThenReadRoundTrip) {
  auto data = generate_scene(small_spec(11));
  const fs::path dir = scratch("roundtrip");
  write_dataset(data, dir.string());
  EXPECT_TRUE(fs::exists(dir / "images" / "00000000.png"));
  EXPECT_TRUE(fs::exists(dir / "cams" / "00000002_cam.txt"));
  EXPECT_TRUE(fs::exists(dir / "depths" / "00000001.pfm"));
  auto back = read_dataset(dir.string());
  ASSERT_EQ(back.views.size(), data.views.size());
  for (std::size_t i = 0; i < data.views.size(); ++i) {
    EXPECT_TRUE(same_bits(back.views[i].depth, data.views[i].depth));
    EXPECT_TRUE(same_bits(back.views[i].image, data.views[i].image));
    EXPECT_EQ(back.views[i].camera.K, data.views[i].camera.K);
    EXPECT_EQ(back.views[i].camera.R, data.views[i].camera.R);
  }
  ASSERT_EQ(back.pairs.size(), data.pairs.size());
  EXPECT_EQ(back.pairs[0][0].first, data.pairs[0][0].first);
}

TEST(Dataset, MissingCameraFileNamesPath) {
  auto data = generate_scene(small_spec(12));
  const fs::path dir = scratch("missingcam");
  write_dataset(data, dir.string());
  fs::remove(dir / "cams" / "00000001_cam.txt");
  try {
    read_dataset(dir.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("00000001_cam.txt"), std::string::npos);
  }
}

TEST(Dataset, PairFileFormat) {
  std::vector<std::vector<std::pair<int, double>>> pairs{{{1, 0.5}, {2, 0.25}}, {{0, 0.5}}, {{0, 0.25}}};
  const std::string text = format_pairs(pairs);
  EXPECT_EQ(text.substr(0, 2), "3\n");
  EXPECT_EQ(text, "3\n0\n2 1 0.500000 2 0.250000\n1\n1 0 0.500000\n2\n1 0 0.250000\n");
  auto back = parse_pairs("pair.txt", text, 3);
  EXPECT_EQ(back[0][1].first, 2);
  EXPECT_THROW(parse_pairs("pair.txt", "3\n0\n1 7 0.5\n", 3), ParseError);
}
