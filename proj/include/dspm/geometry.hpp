#pragma once

// Pinhole cameras, inverse-depth normalization, plane-induced homographies
// and the per-pixel plane-sweep warp.
//
// Pixel coordinates: integer index i sits at continuous coordinate i (the
// pixel centre), so bilinear_sample lookups and projections agree. Scaling
// an image by s maps coordinate x to (x + 0.5)·s − 0.5.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dspm/error.hpp"
#include "dspm/nn.hpp"

namespace dspm {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

struct Camera {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();  // world -> camera
  Vec3 t = Vec3::Zero();
  double d_min = 1.0;
  double d_max = 2.0;

  void validate() const {
    if (!(R.transpose() * R).isApprox(Mat3::Identity(), 1e-6) || std::abs(R.determinant() - 1.0) > 1e-6)
      throw ConfigError("camera: R is not a rotation");
    if (!(d_min > 0.0 && d_min < d_max)) throw ConfigError("camera: need 0 < d_min < d_max");
    if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0) throw ConfigError("camera: K is not upper-triangular");
    if (!(K(0, 0) > 0.0 && K(1, 1) > 0.0 && K(2, 2) > 0.0)) throw ConfigError("camera: K must have positive diagonal");
  }

  Vec3 center() const { return -R.transpose() * t; }

  // Intrinsics for an image resampled by factor s (0.5 = half resolution).
  Camera scaled(double s) const {
    Camera c = *this;
    const double k22 = K(2, 2);
    c.K(0, 0) = K(0, 0) * s;
    c.K(0, 1) = K(0, 1) * s;
    c.K(1, 1) = K(1, 1) * s;
    c.K(0, 2) = (K(0, 2) / k22 + 0.5) * s * k22 - 0.5 * k22;
    c.K(1, 2) = (K(1, 2) / k22 + 0.5) * s * k22 - 0.5 * k22;
    return c;
  }
};

inline Mat3 inverse_intrinsics(const Mat3& K) {
  const double det = K.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) throw ConfigError("camera: singular intrinsics");
  return K.inverse();
}

// Inverse-depth range normalization: z = 1 at d_min, z = 0 at d_max.
struct DepthDomain {
  double d_min = 1.0;
  double d_max = 2.0;
  int m0_init = 16;

  DepthDomain() = default;
  DepthDomain(double lo, double hi, int m0) : d_min(lo), d_max(hi), m0_init(m0) {
    if (!(lo > 0.0 && lo < hi)) throw ConfigError("depth domain: need 0 < d_min < d_max");
    if (m0 < 1) throw ConfigError("depth domain: m0 must be >= 1");
  }
  static DepthDomain of(const Camera& c, int m0) { return DepthDomain(c.d_min, c.d_max, m0); }

  double inv_span() const { return 1.0 / d_min - 1.0 / d_max; }

  double normalize(double d) const {
    const double dc = std::clamp(d, d_min, d_max);
#ifndef NDEBUG
    if (dc != d) std::cerr << "warning: depth " << d << " clamped to [" << d_min << ", " << d_max << "]\n";
#endif
    return (1.0 / dc - 1.0 / d_max) / inv_span();
  }
  double denormalize(double z) const { return 1.0 / (z * inv_span() + 1.0 / d_max); }

  double to_y(double z) const { return z * m0_init; }
  double from_y(double y) const { return y / m0_init; }
};

struct RelativePose {
  Mat3 R;
  Vec3 t;
};

// Maps reference-camera coordinates to source-camera coordinates.
inline RelativePose relative_pose(const Camera& ref, const Camera& src) {
  RelativePose p;
  p.R = src.R * ref.R.transpose();
  p.t = src.t - p.R * ref.t;
  return p;
}

// Homography induced by the plane z = d in the reference camera frame,
// mapping homogeneous reference pixels to source pixels.
inline Mat3 homography_for_depth(const Camera& ref, const Camera& src, double d) {
  if (!(d > 0.0)) throw DomainError("homography_for_depth: depth must be positive");
  const RelativePose rel = relative_pose(ref, src);
  const Vec3 n(0.0, 0.0, 1.0);
  return src.K * (rel.R + rel.t * n.transpose() / d) * inverse_intrinsics(ref.K);
}

struct Projection {
  Vec2 pixel;
  double depth;
};

inline Projection project_point(const Camera& cam, const Vec3& X) {
  const Vec3 Xc = cam.R * X + cam.t;
  if (!(Xc.z() > 0.0)) throw GeometryError("project_point: point is behind the camera");
  const Vec3 h = cam.K * Xc;
  return {Vec2(h.x() / h.z(), h.y() / h.z()), Xc.z()};
}

// World point seen at pixel (u, v) with camera-frame depth d.
inline Vec3 back_project(const Camera& cam, double u, double v, double d) {
  Vec3 ray = inverse_intrinsics(cam.K) * Vec3(u, v, 1.0);
  const Vec3 Xc = ray * (d / ray.z());
  return cam.R.transpose() * (Xc - cam.t);
}

inline Vec2 apply_homography(const Mat3& H, double u, double v) {
  const Vec3 h = H * Vec3(u, v, 1.0);
  return {h.x() / h.z(), h.y() / h.z()};
}

// Warps feat_src [C,H,W] onto the reference grid through H.
template <typename T>
Tensor<T> warp_feature(const Tensor<T>& feat_src, const Mat3& H) {
  if (feat_src.rank() != 3) throw DimensionError("warp_feature: features must be [C,H,W]");
  const std::size_t h = feat_src.dim(1), w = feat_src.dim(2);
  std::vector<T> coords(2 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Vec2 p = apply_homography(H, static_cast<double>(x), static_cast<double>(y));
      coords[y * w + x] = static_cast<T>(p.x());
      coords[h * w + y * w + x] = static_cast<T>(p.y());
    }
  return bilinear_sample(feat_src, Tensor<T>({2, h, w}, std::move(coords)));
}

// Source-view pixel coordinates [2, m, H, W] for per-pixel candidate
// depths given as normalized inverse depth z [m, H, W]. For a reference
// pixel p with ray r = K_r⁻¹p / (K_r⁻¹p)_z the source pixel is
// (a + w·b) / (a_z + w·b_z) with a = K_s R_rel r, b = K_s t_rel and
// w = 1/d affine in z. Differentiable with respect to z.
template <typename T>
Tensor<T> plane_sweep_coords(const Camera& ref, const Camera& src, const DepthDomain& dom, const Tensor<T>& z) {
  if (z.rank() != 3) throw DimensionError("plane_sweep_coords: candidates must be [m,H,W]");
  const std::size_t m = z.dim(0), h = z.dim(1), w = z.dim(2), P = h * w;
  const RelativePose rel = relative_pose(ref, src);
  const Mat3 KinvR = inverse_intrinsics(ref.K);
  const Mat3 A = src.K * rel.R;
  const Vec3 b = src.K * rel.t;
  const double span = dom.inv_span(), base = 1.0 / dom.d_max;
  constexpr double kMinDen = 1e-6;
  std::vector<double> a(3 * P);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      Vec3 r = KinvR * Vec3(static_cast<double>(x), static_cast<double>(y), 1.0);
      r /= r.z();
      const Vec3 ap = A * r;
      for (int k = 0; k < 3; ++k) a[k * P + y * w + x] = ap[k];
    }
  const auto zv = z.data();
  std::vector<T> out(2 * m * P);
  std::vector<double> dudz(m * P), dvdz(m * P);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < P; ++p) {
      const double inv = static_cast<double>(zv[j * P + p]) * span + base;
      const double nu = a[p] + inv * b.x(), nv = a[P + p] + inv * b.y();
      double den = a[2 * P + p] + inv * b.z();
      const bool clamped = den < kMinDen;
      if (clamped) den = kMinDen;
      out[j * P + p] = static_cast<T>(nu / den);
      out[m * P + j * P + p] = static_cast<T>(nv / den);
      const double dden = clamped ? 0.0 : b.z();
      dudz[j * P + p] = span * (b.x() * den - nu * dden) / (den * den);
      dvdz[j * P + p] = span * (b.y() * den - nv * dden) / (den * den);
    }
  return detail::make_result<T>("plane_sweep_coords", Shape{2, m, h, w}, std::move(out), {z},
                                [m, P, dudz = std::move(dudz), dvdz = std::move(dvdz)](Node<T>& self) {
                                  auto* gz = detail::sink(self, 0);
                                  if (!gz) return;
                                  for (std::size_t i = 0; i < m * P; ++i)
                                    (*gz)[i] += static_cast<T>(static_cast<double>(self.grad[i]) * dudz[i] +
                                                               static_cast<double>(self.grad[m * P + i]) * dvdz[i]);
                                });
}

// ---- camera text files ----

inline std::string format_camera(const Camera& c) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string s = "extrinsic\n";
  for (int r = 0; r < 4; ++r) {
    for (int col = 0; col < 4; ++col) {
      double v = r == 3 ? (col == 3 ? 1.0 : 0.0) : (col < 3 ? c.R(r, col) : c.t(r));
      s += num(v);
      s += col < 3 ? " " : "\n";
    }
  }
  s += "\nintrinsic\n";
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col) {
      s += num(c.K(r, col));
      s += col < 2 ? " " : "\n";
    }
  s += "\n" + num(c.d_min) + " " + num(c.d_max) + "\n";
  return s;
}

inline Camera parse_camera(const std::string& path, const std::string& text) {
  std::size_t pos = 0;
  auto next_line = [&](std::size_t& start) {
    if (pos >= text.size()) throw ParseError(path, pos, "unexpected end of camera file");
    start = pos;
    const std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  auto numbers = [&](std::size_t count) {
    std::size_t start = 0;
    const std::string line = next_line(start);
    std::istringstream is(line);
    std::vector<double> v;
    double x;
    while (is >> x) v.push_back(x);
    if (!is.eof() || v.size() != count)
      throw ParseError(path, start, "expected " + std::to_string(count) + " numbers");
    return v;
  };
  auto expect = [&](const std::string& word) {
    std::size_t start = 0;
    if (next_line(start) != word) throw ParseError(path, start, "expected '" + word + "'");
  };
  Camera c;
  expect("extrinsic");
  Eigen::Matrix4d E;
  for (int r = 0; r < 4; ++r) {
    const auto v = numbers(4);
    for (int col = 0; col < 4; ++col) E(r, col) = v[col];
  }
  expect("");
  expect("intrinsic");
  for (int r = 0; r < 3; ++r) {
    const auto v = numbers(3);
    for (int col = 0; col < 3; ++col) c.K(r, col) = v[col];
  }
  expect("");
  const std::size_t range_at = pos;
  const auto range = numbers(2);
  c.R = E.topLeftCorner<3, 3>();
  c.t = E.topRightCorner<3, 1>();
  c.d_min = range[0];
  c.d_max = range[1];
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(path, range_at, e.what());
  }
  return c;
}

inline void write_camera(const std::string& path, const Camera& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << format_camera(c);
  if (!f) throw Error("write failed: " + path);
}

inline Camera read_camera(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(path, 0, "cannot open camera file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_camera(path, ss.str());
}

}  // namespace dspm
