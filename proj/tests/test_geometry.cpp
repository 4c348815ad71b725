#include <gtest/gtest.h>

#include <filesystem>

#include "dspm/geometry.hpp"
#include "dspm/gradcheck.hpp"

using namespace dspm;

namespace {

Mat3 rotation_xyz(double ax, double ay, double az) {
  return (Eigen::AngleAxisd(az, Vec3::UnitZ()) * Eigen::AngleAxisd(ay, Vec3::UnitY()) *
          Eigen::AngleAxisd(ax, Vec3::UnitX()))
      .toRotationMatrix();
}

Camera make_camera(double f, double cx, double cy, const Mat3& R, const Vec3& center) {
  Camera c;
  c.K << f, 0, cx, 0, f, cy, 0, 0, 1;
  c.R = R;
  c.t = -R * center;
  c.d_min = 2.0;
  c.d_max = 8.0;
  return c;
}

// Hand-written pinhole projection, independent of the library code path.
Vec2 oracle_project(const Camera& c, const Vec3& X) {
  double xc[3];
  for (int r = 0; r < 3; ++r) xc[r] = c.R(r, 0) * X[0] + c.R(r, 1) * X[1] + c.R(r, 2) * X[2] + c.t[r];
  const double u = c.K(0, 0) * xc[0] / xc[2] + c.K(0, 1) * xc[1] / xc[2] + c.K(0, 2);
  const double v = c.K(1, 1) * xc[1] / xc[2] + c.K(1, 2);
  return {u, v};
}

// World point on the reference plane z_cam = d under reference pixel (u,v).
Vec3 oracle_plane_point(const Camera& c, double u, double v, double d) {
  const double fx = c.K(0, 0), fy = c.K(1, 1), s = c.K(0, 1), cx = c.K(0, 2), cy = c.K(1, 2);
  const double yc = (v - cy) / fy * d;
  const double xc = ((u - cx) * d - s * yc) / fx;
  const Vec3 Xc(xc, yc, d);
  return c.R.transpose() * (Xc - c.t);
}

struct Rig {
  Camera ref, src;
};

Rig random_rig(Rng& rng) {
  Rig r;
  r.ref = make_camera(60 + 20 * rng.uniform(), 40 + rng.uniform(), 32 + rng.uniform(),
                      rotation_xyz(0.1 * rng.uniform(-1, 1), 0.1 * rng.uniform(-1, 1), 0.1 * rng.uniform(-1, 1)),
                      Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
  r.src = make_camera(60 + 20 * rng.uniform(), 40 + rng.uniform(), 32 + rng.uniform(),
                      rotation_xyz(0.1 * rng.uniform(-1, 1), 0.1 * rng.uniform(-1, 1), 0.1 * rng.uniform(-1, 1)),
                      r.ref.center() + Vec3(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)));
  return r;
}

}  // namespace

TEST(DepthDomain, EndpointsAndArithmetic) {
  DepthDomain d(1.0, 4.0, 16);
  EXPECT_DOUBLE_EQ(d.normalize(1.0), 1.0);
  EXPECT_DOUBLE_EQ(d.normalize(4.0), 0.0);
  EXPECT_NEAR(d.normalize(2.0), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(d.to_y(0.5), 8.0);
}

TEST(DepthDomain, RoundTripAndMonotonic) {
  DepthDomain dom(0.7, 13.0, 16);
  double prev = 2.0;
  for (int i = 0; i <= 1000; ++i) {
    const double d = 0.7 + (13.0 - 0.7) * i / 1000.0;
    const double z = dom.normalize(d);
    EXPECT_LT(std::abs(dom.denormalize(z) - d), 1e-6 * d);
    EXPECT_LT(z, prev);
    prev = z;
  }
  // equal z widths -> equal inverse-depth widths
  const double w1 = 1.0 / dom.denormalize(0.3) - 1.0 / dom.denormalize(0.1);
  const double w2 = 1.0 / dom.denormalize(0.9) - 1.0 / dom.denormalize(0.7);
  EXPECT_NEAR(w1, w2, 1e-12);
}

TEST(DepthDomain, OutOfRangeClamps) {
  DepthDomain dom(1.0, 4.0, 16);
  EXPECT_DOUBLE_EQ(dom.normalize(100.0), 0.0);
  EXPECT_DOUBLE_EQ(dom.normalize(0.1), 1.0);
}

TEST(Homography, SelfHomographyIsIdentity) {
  Rng rng(1);
  Rig r = random_rig(rng);
  for (double d : {0.5, 2.0, 7.0, 1e4}) EXPECT_TRUE(homography_for_depth(r.ref, r.ref, d).isApprox(Mat3::Identity(), 1e-12));
}

TEST(Homography, RectifiedPairDisparity) {
  const double f = 70.0, b = 0.8;
  Camera ref = make_camera(f, 39.5, 31.5, Mat3::Identity(), Vec3::Zero());
  Camera src = make_camera(f, 39.5, 31.5, Mat3::Identity(), Vec3(b, 0, 0));
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double u = rng.uniform(0, 79), v = rng.uniform(0, 63), d = rng.uniform(2, 8);
    const Vec2 p = apply_homography(homography_for_depth(ref, src, d), u, v);
    const Vec2 q = oracle_project(src, oracle_plane_point(ref, u, v, d));
    EXPECT_NEAR(p.x(), u - f * b / d, 1e-6);
    EXPECT_NEAR(p.y(), v, 1e-6);
    EXPECT_NEAR(q.x(), u - f * b / d, 1e-6);
  }
}

TEST(Homography, MatchesProjectionOracleOnRandomPlanes) {
  Rng rng(2);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Rig r = random_rig(rng);
    const double d = rng.uniform(2, 8), u = rng.uniform(0, 79), v = rng.uniform(0, 63);
    const Vec2 p = apply_homography(homography_for_depth(r.ref, r.src, d), u, v);
    const Vec2 q = oracle_project(r.src, oracle_plane_point(r.ref, u, v, d));
    worst = std::max(worst, (p - q).norm());
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Homography, InfiniteDepthLimit) {
  Rng rng(3);
  Rig r = random_rig(rng);
  const RelativePose rel = relative_pose(r.ref, r.src);
  const Mat3 Hinf = r.src.K * rel.R * r.ref.K.inverse();
  const Mat3 H = homography_for_depth(r.ref, r.src, 1e9);
  EXPECT_LT((H - Hinf).norm() / Hinf.norm(), 1e-6);
}

TEST(Homography, NonPositiveDepthRejected) {
  Camera c;
  EXPECT_THROW(homography_for_depth(c, c, 0.0), DomainError);
}

TEST(Homography, SingularIntrinsicsAreConfigError) {
  Camera c;
  c.K(1, 1) = 0.0;
  EXPECT_THROW(homography_for_depth(c, c, 1.0), ConfigError);
}

TEST(ProjectPoint, Examples) {
  Camera c = make_camera(50, 20, 10, Mat3::Identity(), Vec3::Zero());
  auto p = project_point(c, Vec3(0, 0, 3.5));
  EXPECT_DOUBLE_EQ(p.pixel.x(), 20.0);
  EXPECT_DOUBLE_EQ(p.pixel.y(), 10.0);
  EXPECT_DOUBLE_EQ(p.depth, 3.5);
  Camera id;
  auto q = project_point(id, Vec3(1, 0, 2));
  EXPECT_DOUBLE_EQ(q.pixel.x(), 0.5);
  EXPECT_DOUBLE_EQ(q.pixel.y(), 0.0);
  EXPECT_DOUBLE_EQ(q.depth, 2.0);
  EXPECT_THROW(project_point(id, Vec3(0, 0, -1)), GeometryError);
}

TEST(ProjectPoint, PlanePointsAgreeWithHomography) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    Rig r = random_rig(rng);
    const double d = rng.uniform(2, 8);
    const Vec3 Xc(rng.uniform(-1, 1) * d, rng.uniform(-1, 1) * d, d);
    const Vec3 X = r.ref.R.transpose() * (Xc - r.ref.t);
    const auto pr = project_point(r.ref, X);
    EXPECT_NEAR(pr.depth, d, 1e-12);
    const Vec2 via_h = apply_homography(homography_for_depth(r.ref, r.src, d), pr.pixel.x(), pr.pixel.y());
    EXPECT_LT((via_h - project_point(r.src, X).pixel).norm(), 1e-8);
    const Vec3 back = back_project(r.ref, pr.pixel.x(), pr.pixel.y(), d);
    EXPECT_LT((back - X).norm(), 1e-10);
  }
}

TEST(PlaneSweep, CoordinatesMatchOracleInDouble) {
  Rng rng(5);
  Rig r = random_rig(rng);
  DepthDomain dom = DepthDomain::of(r.ref, 16);
  const std::size_t m = 3, h = 6, w = 7;
  Tensor<double> z = random_tensor<double>({m, h, w}, rng, 0.0, 1.0);
  auto c = plane_sweep_coords(r.ref, r.src, dom, z);
  ASSERT_EQ(c.shape(), (Shape{2, m, h, w}));
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = (j * h + y) * w + x;
        const double d = dom.denormalize(z[i]);
        const Vec2 q = oracle_project(r.src, oracle_plane_point(r.ref, double(x), double(y), d));
        EXPECT_NEAR(c[i], q.x(), 1e-9);
        EXPECT_NEAR(c[m * h * w + i], q.y(), 1e-9);
      }
}

TEST(PlaneSweep, GradientWithRespectToDepth) {
  Rng rng(6);
  Rig r = random_rig(rng);
  DepthDomain dom = DepthDomain::of(r.ref, 16);
  Tensor<double> z = random_tensor<double>({2, 4, 5}, rng, 0.05, 0.95);
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f = [&](const std::vector<Tensor<double>>& in) {
    return random_projection(plane_sweep_coords(r.ref, r.src, dom, in[0]), 2);
  };
  GradCheckOptions opt;
  opt.step = 1e-6;
  EXPECT_LT(check_gradients<double>("plane_sweep", f, {z}, opt).max_rel_error, 1e-3);
}

TEST(WarpFeature, IdentityAndIntegerShift) {
  Rng rng(7);
  Array f = random_tensor<float>({3, 6, 8}, rng);
  Array same = warp_feature(f, Mat3::Identity());
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(same[i], f[i]);
  Mat3 T = Mat3::Identity();
  T(0, 2) = 2.0;
  T(1, 2) = -1.0;
  Array shifted = warp_feature(f, T);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 1; y < 6; ++y)
      for (std::size_t x = 0; x + 2 < 8; ++x) EXPECT_EQ(shifted[(c * 6 + y) * 8 + x], f[(c * 6 + y - 1) * 8 + x + 2]);
}

TEST(WarpFeature, ForwardThenInverseRestoresInterior) {
  // Rectified geometry makes H affine, so bilinear sampling of an affine
  // ramp is exact and the composition must return the original values.
  const double f = 40.0;
  Camera ref = make_camera(f, 15.5, 11.5, Mat3::Identity(), Vec3::Zero());
  Camera src = make_camera(f, 15.5, 11.5, Mat3::Identity(), Vec3(0.3, 0.1, 0));
  const std::size_t h = 24, w = 32;
  std::vector<double> ramp(2 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      ramp[y * w + x] = 0.3 * x - 0.2 * y + 1.0;
      ramp[h * w + y * w + x] = 0.05 * x + 0.1 * y;
    }
  Tensor<double> map({2, h, w}, ramp);
  const Mat3 H = homography_for_depth(ref, src, 4.0);
  auto back = warp_feature(warp_feature(map, H), Mat3(H.inverse()));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 4; y < h - 4; ++y)
      for (std::size_t x = 6; x < w - 6; ++x)
        EXPECT_NEAR(back[(c * h + y) * w + x], map[(c * h + y) * w + x], 1e-4);
}

TEST(Intrinsics, DownscaledWarpMatchesOracle) {
  Rng rng(9);
  Rig r = random_rig(rng);
  const Camera ref2 = r.ref.scaled(0.5), src2 = r.src.scaled(0.5);
  for (int i = 0; i < 200; ++i) {
    const double u = rng.uniform(0, 39), v = rng.uniform(0, 31), d = rng.uniform(2, 8);
    const Vec2 p = apply_homography(homography_for_depth(ref2, src2, d), u, v);
    const double U = (u + 0.5) * 2 - 0.5, V = (v + 0.5) * 2 - 0.5;
    const Vec2 q = oracle_project(r.src, oracle_plane_point(r.ref, U, V, d));
    EXPECT_LT((p - Vec2((q.x() + 0.5) * 0.5 - 0.5, (q.y() + 0.5) * 0.5 - 0.5)).norm(), 0.1);
  }
  EXPECT_DOUBLE_EQ(ref2.K(0, 0), r.ref.K(0, 0) * 0.5);
}

TEST(CameraFile, LayoutAndRoundTrip) {
  Rng rng(10);
  Rig r = random_rig(rng);
  const std::string text = format_camera(r.ref);
  std::vector<std::string> lines;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 12u);
  EXPECT_EQ(lines[0], "extrinsic");
  EXPECT_EQ(lines[4], "0 0 0 1");
  EXPECT_EQ(lines[5], "");
  EXPECT_EQ(lines[6], "intrinsic");
  EXPECT_EQ(lines[10], "");
  Camera back = parse_camera("mem", text);
  EXPECT_EQ(back.K, r.ref.K);
  EXPECT_EQ(back.R, r.ref.R);
  EXPECT_EQ(back.t, r.ref.t);
  EXPECT_EQ(back.d_min, r.ref.d_min);
  EXPECT_EQ(back.d_max, r.ref.d_max);
}

TEST(CameraFile, ErrorsNameFileAndOffset) {
  EXPECT_THROW(read_camera("/nonexistent/cam.txt"), ParseError);
  try {
    parse_camera("c.txt", "extrinsic\n1 0 0 0\n0 1 0\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.path(), "c.txt");
    EXPECT_EQ(e.offset(), 18u);
  }
}
