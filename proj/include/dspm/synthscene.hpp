#pragma once

// Piecewise-planar synthetic scenes rendered by ray casting, with exact
// depth, plus the on-disk dataset layout.
//
// The world frame is the frame of view 0 (identity pose). Surfaces are
// Lambertian with procedural value-noise albedo, lit by one directional
// light, so appearance does not depend on the viewpoint.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dspm/geometry.hpp"
#include "dspm/io.hpp"
#include "dspm/parallel.hpp"
#include "dspm/rng.hpp"

namespace dspm {

struct Texture {
  std::uint64_t seed = 0;
  double frequency = 1.5;  // lattice cells per scene unit at the first octave
  int octaves = 3;
  double amplitude = 1.0;  // 0 gives a uniform albedo
  Vec3 base{0.5, 0.5, 0.5};
  Vec3 chroma{0.0, 0.0, 0.0};

  static double lattice(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
    std::uint64_t h = Rng::mix(seed, static_cast<std::uint64_t>(ix) * 0x9E3779B1ull ^
                                         static_cast<std::uint64_t>(iy) * 0x85EBCA77C2B2AE63ull);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  static double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

  static double value_noise(double u, double v, std::uint64_t seed) {
    const double fu = std::floor(u), fv = std::floor(v);
    const auto ix = static_cast<std::int64_t>(fu), iy = static_cast<std::int64_t>(fv);
    const double a = fade(u - fu), b = fade(v - fv);
    const double n00 = lattice(ix, iy, seed), n10 = lattice(ix + 1, iy, seed);
    const double n01 = lattice(ix, iy + 1, seed), n11 = lattice(ix + 1, iy + 1, seed);
    return (1 - b) * ((1 - a) * n00 + a * n10) + b * ((1 - a) * n01 + a * n11);
  }

  // Sum of octaves, centred on zero, roughly in [-0.5, 0.5].
  double noise(double u, double v, std::uint64_t salt) const {
    double s = 0.0, amp = 1.0, f = frequency, norm = 0.0;
    for (int o = 0; o < octaves; ++o) {
      s += amp * (value_noise(u * f, v * f, Rng::mix(seed, salt * 64 + o)) - 0.5);
      norm += amp;
      amp *= 0.5;
      f *= 2.0;
    }
    return norm > 0.0 ? s / norm : 0.0;
  }

  Vec3 albedo(double u, double v) const {
    if (amplitude == 0.0) return base;
    const double lum = noise(u, v, 1), hue = noise(u, v, 2);
    Vec3 c = base + Vec3::Constant(1.6 * amplitude * lum) + 1.2 * amplitude * hue * chroma;
    // Smooth saturation into (0, 1); a hard clip leaves kinks that no
    // interpolant reproduces across views.
    for (int k = 0; k < 3; ++k) c[k] = 0.5 + 0.5 * std::tanh(2.0 * (c[k] - 0.5));
    return c;
  }
};

struct Surface {
  enum class Kind { Plane, Quad, Box };
  Kind kind = Kind::Plane;
  Vec3 center = Vec3::Zero();
  // Columns: two in-plane axes and the normal (planes, quads); box axes.
  Mat3 frame = Mat3::Identity();
  Vec3 half = Vec3::Ones();  // quads use x,y; boxes use all three
  Texture texture;
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::UnitZ();
  Vec2 uv = Vec2::Zero();
  int surface = -1;
  int face = 0;  // box face 1..6, 0 for planar surfaces
};

struct Scene {
  std::vector<Surface> surfaces;
  Vec3 light = Vec3(0.3, -0.5, -1.0).normalized();  // direction towards the light
  double ambient = 0.35;

  static std::optional<Hit> intersect(const Surface& s, const Vec3& o, const Vec3& d) {
    constexpr double kEps = 1e-9;
    if (s.kind != Surface::Kind::Box) {
      const Vec3 n = s.frame.col(2);
      const double den = n.dot(d);
      if (std::abs(den) < 1e-14) return std::nullopt;
      const double t = n.dot(s.center - o) / den;
      if (t <= kEps) return std::nullopt;
      const Vec3 q = o + t * d - s.center;
      const Vec2 uv(q.dot(s.frame.col(0)), q.dot(s.frame.col(1)));
      if (s.kind == Surface::Kind::Quad && (std::abs(uv.x()) > s.half.x() || std::abs(uv.y()) > s.half.y()))
        return std::nullopt;
      return Hit{t, n, uv, -1};
    }
    const Vec3 lo = s.frame.transpose() * (o - s.center);
    const Vec3 ld = s.frame.transpose() * d;
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    int axis = -1;
    double sign = 1.0;
    for (int k = 0; k < 3; ++k) {
      if (std::abs(ld[k]) < 1e-14) {
        if (std::abs(lo[k]) > s.half[k]) return std::nullopt;
        continue;
      }
      double ta = (-s.half[k] - lo[k]) / ld[k], tb = (s.half[k] - lo[k]) / ld[k];
      double sa = -1.0;
      if (ta > tb) {
        std::swap(ta, tb);
        sa = 1.0;
      }
      if (ta > t0) {
        t0 = ta;
        axis = k;
        sign = sa;
      }
      t1 = std::min(t1, tb);
    }
    if (axis < 0 || t0 > t1 || t0 <= kEps) return std::nullopt;
    const Vec3 q = lo + t0 * ld;
    const int a = (axis + 1) % 3, b = (axis + 2) % 3;
    // Offset each face's texture domain so faces do not repeat each other.
    const Vec2 uv(q[a] + 17.0 * axis + (sign > 0 ? 5.0 : 0.0), q[b] + 11.0 * axis);
    return Hit{t0, s.frame.col(axis) * sign, uv, -1, 1 + 2 * axis + (sign > 0 ? 1 : 0)};
  }

  Hit first_hit(const Vec3& o, const Vec3& d) const {
    Hit best;
    for (std::size_t i = 0; i < surfaces.size(); ++i) {
      auto h = intersect(surfaces[i], o, d);
      if (h && h->t < best.t) {
        best = *h;
        best.surface = static_cast<int>(i);
      }
    }
    return best;
  }

  Vec3 shade(const Hit& h) const {
    const Vec3 alb = surfaces[h.surface].texture.albedo(h.uv.x(), h.uv.y());
    return alb * (ambient + (1.0 - ambient) * std::abs(h.normal.dot(light)));
  }
};

struct ViewRecord {
  Array image;  // [3,H,W], values k/255
  Array depth;  // [H,W], 0 = invalid
  Camera camera;
};

struct SceneData {
  std::vector<ViewRecord> views;
  // Per view: source views with scores, best first.
  std::vector<std::vector<std::pair<int, double>>> pairs;
};

struct RenderedView {
  ViewRecord record;
  // Per pixel surface index·8 + face, -1 where nothing was hit or depth is
  // out of range.
  std::vector<int> label;
};

inline RenderedView render_view(const Scene& scene, const Camera& cam, std::size_t width, std::size_t height) {
  RenderedView out;
  std::vector<float> img(3 * width * height), dep(width * height, 0.0f);
  out.label.assign(width * height, -1);
  const Mat3 Kinv = inverse_intrinsics(cam.K);
  const Vec3 origin = cam.center();
  const Mat3 Rt = cam.R.transpose();
  const std::size_t P = width * height;
  parallel_for(0, height, [&](std::size_t y) {
    for (std::size_t x = 0; x < width; ++x) {
      const Vec3 dir = Rt * (Kinv * Vec3(static_cast<double>(x), static_cast<double>(y), 1.0));
      const Hit h = scene.first_hit(origin, dir);
      const std::size_t p = y * width + x;
      if (h.surface < 0) continue;
      const Vec3 X = origin + h.t * dir;
      const double z = (cam.R * X + cam.t).z();
      const Vec3 c = scene.shade(h);
      for (int k = 0; k < 3; ++k)
        img[k * P + p] = static_cast<float>(std::lround(std::clamp(c[k], 0.0, 1.0) * 255.0)) / 255.0f;
      if (z >= cam.d_min && z <= cam.d_max) {
        dep[p] = static_cast<float>(z);
        out.label[p] = h.surface * 8 + h.face;
      }
    }
  });
  out.record.image = Array({3, height, width}, std::move(img));
  out.record.depth = Array({height, width}, std::move(dep));
  out.record.camera = cam;
  return out;
}

struct SceneSpec {
  std::uint64_t seed = 0;
  int patches = 3;
  int cuboids = 1;
  double d_min = 2.0;
  double d_max = 4.0;
  int octaves = 3;
  int views = 3;
  std::size_t width = 80;
  std::size_t height = 64;
  double baseline = 1.0;
  bool converging = true;
  double texture_amplitude = 1.0;

  void validate() const {
    if (views < 2) throw ConfigError("scene: need at least 2 views");
    if (patches < 0 || cuboids < 0) throw ConfigError("scene: negative surface count");
    if (patches + cuboids < 1) throw ConfigError("scene: need at least one foreground surface");
    if (!(d_min > 0.0 && d_min < d_max)) throw ConfigError("scene: need 0 < d_min < d_max");
    if (width < 8 || height < 8) throw ConfigError("scene: image too small");
    if (octaves < 1) throw ConfigError("scene: octaves must be >= 1");
    if (!(baseline >= 0.0)) throw ConfigError("scene: negative baseline");
  }
};

inline Mat3 look_at(const Vec3& center, const Vec3& target) {
  const Vec3 z = (target - center).normalized();
  const Vec3 x = Vec3(0, 1, 0).cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 R;
  R.row(0) = x;
  R.row(1) = y;
  R.row(2) = z;
  return R;
}

// View 0 at the origin; the others alternate left/right along x at
// multiples of the baseline with a small vertical jitter.
inline std::vector<Camera> make_rig(const SceneSpec& spec, Rng& rng) {
  std::vector<Camera> cams;
  const double f = 0.9 * static_cast<double>(spec.width);
  Mat3 K;
  K << f, 0, (static_cast<double>(spec.width) - 1) / 2, 0, f, (static_cast<double>(spec.height) - 1) / 2, 0, 0, 1;
  const Vec3 target(0, 0, 0.5 * (spec.d_min + spec.d_max));
  for (int v = 0; v < spec.views; ++v) {
    const int step = (v + 1) / 2;
    const double side = v % 2 == 1 ? -1.0 : 1.0;
    Vec3 C(side * step * spec.baseline, 0.0, 0.0);
    if (v > 0) C.y() = rng.uniform(-0.1, 0.1) * spec.baseline;
    Camera c;
    c.K = K;
    c.R = spec.converging && v > 0 ? look_at(C, target) : Mat3::Identity();
    c.t = -c.R * C;
    c.d_min = spec.d_min;
    c.d_max = spec.d_max;
    cams.push_back(c);
  }
  return cams;
}

inline Texture random_texture(Rng& rng, double amplitude, int octaves) {
  Texture t;
  t.seed = rng.next_u64();
  t.octaves = octaves;
  t.amplitude = amplitude;
  t.frequency = rng.uniform(1.2, 1.9);
  t.base = Vec3(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7));
  t.chroma = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized() * 0.5;
  return t;
}

inline Mat3 tilted_frame(double ax, double ay) {
  return (Eigen::AngleAxisd(ay, Vec3::UnitY()) * Eigen::AngleAxisd(ax, Vec3::UnitX())).toRotationMatrix();
}

inline Surface make_plane(const Vec3& point, const Mat3& frame, const Texture& tex) {
  Surface s;
  s.kind = Surface::Kind::Plane;
  s.center = point;
  s.frame = frame;
  s.texture = tex;
  return s;
}

inline Surface make_quad(const Vec3& center, const Mat3& frame, double hx, double hy, const Texture& tex) {
  Surface s = make_plane(center, frame, tex);
  s.kind = Surface::Kind::Quad;
  s.half = Vec3(hx, hy, 0.0);
  return s;
}

inline Surface make_box(const Vec3& center, const Mat3& frame, const Vec3& half, const Texture& tex) {
  Surface s;
  s.kind = Surface::Kind::Box;
  s.center = center;
  s.frame = frame;
  s.half = half;
  s.texture = tex;
  return s;
}

// Largest depth jump between 4-neighbours of valid pixels.
inline double max_depth_jump(const Array& depth) {
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  double best = 0.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const float d = depth[y * W + x];
      if (d <= 0.0f) continue;
      if (x + 1 < W && depth[y * W + x + 1] > 0.0f) best = std::max(best, double(std::abs(depth[y * W + x + 1] - d)));
      if (y + 1 < H && depth[(y + 1) * W + x] > 0.0f) best = std::max(best, double(std::abs(depth[(y + 1) * W + x] - d)));
    }
  return best;
}

inline std::vector<std::vector<std::pair<int, double>>> default_pairs(const std::vector<Camera>& cams) {
  std::vector<std::vector<std::pair<int, double>>> pairs(cams.size());
  for (std::size_t a = 0; a < cams.size(); ++a) {
    for (std::size_t b = 0; b < cams.size(); ++b) {
      if (a == b) continue;
      const double dist = (cams[a].center() - cams[b].center()).norm();
      pairs[a].push_back({static_cast<int>(b), 1.0 / (1.0 + dist)});
    }
    std::stable_sort(pairs[a].begin(), pairs[a].end(), [](auto& l, auto& r) { return l.second > r.second; });
  }
  return pairs;
}

inline SceneData render_scene(const Scene& scene, const std::vector<Camera>& cams, std::size_t width,
                              std::size_t height, std::vector<std::vector<int>>* labels = nullptr) {
  SceneData data;
  for (const auto& c : cams) {
    RenderedView r = render_view(scene, c, width, height);
    data.views.push_back(std::move(r.record));
    if (labels) labels->push_back(std::move(r.label));
  }
  data.pairs = default_pairs(cams);
  return data;
}

struct GeneratedScene {
  Scene scene;
  std::vector<Camera> cameras;
  SceneData data;
  std::vector<std::vector<int>> labels;  // per view, see RenderedView::label
};

// Random slanted background, quads and boxes in front of it. Patch 0 is
// always placed well in front of the background near the image centre so
// every scene has a large depth discontinuity in view 0.
inline GeneratedScene generate_scene_full(const SceneSpec& spec) {
  spec.validate();
  const double range = spec.d_max - spec.d_min;
  const double f = 0.9 * static_cast<double>(spec.width);
  for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
    Rng rng(Rng::mix(spec.seed, attempt));
    GeneratedScene g;
    g.cameras = make_rig(spec, rng);
    const double d_bg = spec.d_min + rng.uniform(0.72, 0.82) * range;
    g.scene.surfaces.push_back(make_plane(Vec3(0, 0, d_bg), tilted_frame(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)),
                                          random_texture(rng, spec.texture_amplitude, spec.octaves)));
    auto pixel_ray = [&](double fx, double fy, double depth) {
      return Vec3((fx - 0.5) * spec.width / f * depth, (fy - 0.5) * spec.height / f * depth, depth);
    };
    for (int i = 0; i < spec.patches; ++i) {
      const bool first = i == 0;
      const double depth = first ? spec.d_min + rng.uniform(0.2, 0.4) * range
                                 : spec.d_min + rng.uniform(0.12, 0.6) * range;
      const Vec3 c = first ? pixel_ray(rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65), depth)
                           : pixel_ray(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), depth);
      const double scale = spec.width * depth / f;
      const bool weak = !first && rng.uniform() < 0.5;
      Texture tex = random_texture(rng, weak ? 0.08 * spec.texture_amplitude : spec.texture_amplitude,
                                   weak ? 1 : spec.octaves);
      g.scene.surfaces.push_back(make_quad(c, tilted_frame(rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35)),
                                           rng.uniform(0.1, 0.22) * scale, rng.uniform(0.1, 0.22) * scale, tex));
    }
    for (int i = 0; i < spec.cuboids; ++i) {
      const double depth = spec.d_min + rng.uniform(0.35, 0.5) * range;
      const Vec3 c = pixel_ray(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), depth);
      const double scale = spec.width * depth / f;
      const double hz = std::min(rng.uniform(0.08, 0.15) * scale, 0.5 * (depth - spec.d_min - 0.1 * range));
      Mat3 R = (Eigen::AngleAxisd(rng.uniform(-0.6, 0.6), Vec3::UnitY()) *
                Eigen::AngleAxisd(rng.uniform(-0.3, 0.3), Vec3::UnitX()))
                   .toRotationMatrix();
      g.scene.surfaces.push_back(make_box(c, R, Vec3(rng.uniform(0.08, 0.15) * scale, rng.uniform(0.08, 0.15) * scale, hz),
                                          random_texture(rng, spec.texture_amplitude, spec.octaves)));
    }
    g.data = render_scene(g.scene, g.cameras, spec.width, spec.height, &g.labels);
    if (max_depth_jump(g.data.views[0].depth) > 0.1 * range) return g;
  }
  throw ConfigError("scene: could not place a depth discontinuity for seed " + std::to_string(spec.seed));
}

inline SceneData generate_scene(const SceneSpec& spec) { return generate_scene_full(spec).data; }

// ---- hand-built scenes ----

inline GeneratedScene single_plane_scene(const SceneSpec& spec, double depth, double tilt_x = 0.0, double tilt_y = 0.0,
                                         std::optional<Texture> texture = std::nullopt) {
  spec.validate();
  Rng rng(spec.seed);
  GeneratedScene g;
  g.cameras = make_rig(spec, rng);
  const Texture tex = texture ? *texture : random_texture(rng, spec.texture_amplitude, spec.octaves);
  g.scene.surfaces.push_back(make_plane(Vec3(0, 0, depth), tilted_frame(tilt_x, tilt_y), tex));
  g.data = render_scene(g.scene, g.cameras, spec.width, spec.height, &g.labels);
  return g;
}

// Fronto-parallel background at d_far and a fronto-parallel foreground quad
// at d_near whose edge crosses view 0 along a random line.
inline GeneratedScene step_edge_scene(const SceneSpec& spec, double d_near, double d_far) {
  spec.validate();
  Rng rng(spec.seed);
  GeneratedScene g;
  g.cameras = make_rig(spec, rng);
  const double f = 0.9 * static_cast<double>(spec.width);
  g.scene.surfaces.push_back(
      make_plane(Vec3(0, 0, d_far), Mat3::Identity(), random_texture(rng, spec.texture_amplitude, spec.octaves)));
  const double angle = rng.uniform(-0.5, 0.5);
  const double edge_x = rng.uniform(-0.15, 0.15) * spec.width / f * d_near;
  const double big = 4.0 * spec.width / f * d_near;
  Mat3 frame = Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
  // Quad extends from the edge line towards +x' by 2·big.
  const Vec3 center = Vec3(edge_x, 0, d_near) + frame.col(0) * big;
  g.scene.surfaces.push_back(make_quad(center, frame, big, 2.0 * big, random_texture(rng, spec.texture_amplitude, spec.octaves)));
  g.data = render_scene(g.scene, g.cameras, spec.width, spec.height, &g.labels);
  return g;
}

// ---- photoconsistency ----

inline float sample_bilinear(const Array& map, std::size_t channel, double x, double y) {
  const std::size_t H = map.dim(map.rank() - 2), W = map.dim(map.rank() - 1);
  x = std::clamp(x, 0.0, double(W - 1));
  y = std::clamp(y, 0.0, double(H - 1));
  const std::size_t x0 = std::min<std::size_t>(std::size_t(x), W - 1), y0 = std::min<std::size_t>(std::size_t(y), H - 1);
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double fx = x - double(x0), fy = y - double(y0);
  const float* m = map.data().data() + channel * H * W;
  return static_cast<float>((1 - fy) * ((1 - fx) * m[y0 * W + x0] + fx * m[y0 * W + x1]) +
                            fy * ((1 - fx) * m[y1 * W + x0] + fx * m[y1 * W + x1]));
}

// Catmull-Rom interpolation over the 4×4 neighbourhood, border-clamped.
inline float sample_bicubic(const Array& map, std::size_t channel, double x, double y) {
  const long H = static_cast<long>(map.dim(map.rank() - 2)), W = static_cast<long>(map.dim(map.rank() - 1));
  x = std::clamp(x, 0.0, double(W - 1));
  y = std::clamp(y, 0.0, double(H - 1));
  const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
  const double fx = x - double(x0), fy = y - double(y0);
  auto weights = [](double t) {
    return std::array<double, 4>{((-t + 2) * t - 1) * t / 2, ((3 * t - 5) * t * t + 2) / 2,
                                 ((-3 * t + 4) * t + 1) * t / 2, (t - 1) * t * t / 2};
  };
  const auto wx = weights(fx), wy = weights(fy);
  const float* m = map.data().data() + channel * static_cast<std::size_t>(H * W);
  double acc = 0.0;
  for (int j = 0; j < 4; ++j) {
    const long yy = std::clamp(y0 - 1 + j, 0L, H - 1);
    double row = 0.0;
    for (int i = 0; i < 4; ++i) row += wx[i] * m[yy * W + std::clamp(x0 - 1 + i, 0L, W - 1)];
    acc += wy[j] * row;
  }
  return static_cast<float>(acc);
}

// True when X is seen by `view` at the projected location: all four depth
// neighbours are valid and agree with X's depth within rel_tol.
inline bool visible_in(const ViewRecord& view, const Vec3& X, double rel_tol = 0.01) {
  const std::size_t H = view.depth.dim(0), W = view.depth.dim(1);
  const Vec3 Xc = view.camera.R * X + view.camera.t;
  if (Xc.z() <= 0.0) return false;
  const Vec3 h = view.camera.K * Xc;
  const double x = h.x() / h.z(), y = h.y() / h.z();
  if (x < 0.0 || y < 0.0 || x > double(W - 1) || y > double(H - 1)) return false;
  const std::size_t x0 = std::min<std::size_t>(std::size_t(x), W - 1), y0 = std::min<std::size_t>(std::size_t(y), H - 1);
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  for (std::size_t yy : {y0, y1})
    for (std::size_t xx : {x0, x1}) {
      const double d = view.depth[yy * W + xx];
      if (d <= 0.0 || std::abs(d - Xc.z()) > rel_tol * Xc.z()) return false;
    }
  return true;
}

// All pixels within `reach` of the cell containing p carry `label`.
inline bool same_label_footprint(int label, const std::vector<int>& map, std::size_t W, std::size_t H, const Vec2& p,
                                 long reach = 0) {
  const long x0 = static_cast<long>(p.x()), y0 = static_cast<long>(p.y());
  for (long yy = y0 - reach; yy <= y0 + 1 + reach; ++yy)
    for (long xx = x0 - reach; xx <= x0 + 1 + reach; ++xx) {
      const std::size_t cy = static_cast<std::size_t>(std::clamp(yy, 0L, long(H) - 1));
      const std::size_t cx = static_cast<std::size_t>(std::clamp(xx, 0L, long(W) - 1));
      if (map[cy * W + cx] != label) return false;
    }
  return true;
}

struct PhotoReport {
  double max_deviation = 0.0;  // fraction of the [0,1] dynamic range
  std::size_t checked = 0;
  std::size_t excluded = 0;  // occluded or out of view
};

// Samples valid pixels of each view, carries them into every other view by
// their ground-truth depth and compares colours where the point is visible.
// With `labels` (per-view surface/face maps from rendering), samples whose
// interpolation footprint straddles two faces are excluded as well.
inline PhotoReport photoconsistency_check(const std::vector<ViewRecord>& views, std::size_t samples_per_pair = 1000,
                                          std::uint64_t seed = 0,
                                          const std::vector<std::vector<int>>* labels = nullptr) {
  PhotoReport rep;
  Rng rng(seed);
  for (std::size_t a = 0; a < views.size(); ++a)
    for (std::size_t b = 0; b < views.size(); ++b) {
      if (a == b) continue;
      const auto& va = views[a];
      const std::size_t H = va.depth.dim(0), W = va.depth.dim(1);
      for (std::size_t s = 0; s < samples_per_pair; ++s) {
        const std::size_t x = rng.below(W), y = rng.below(H);
        const double d = va.depth[y * W + x];
        if (d <= 0.0) {
          ++rep.excluded;
          continue;
        }
        const Vec3 X = back_project(va.camera, double(x), double(y), d);
        if (!visible_in(views[b], X)) {
          ++rep.excluded;
          continue;
        }
        const Vec2 p = project_point(views[b].camera, X).pixel;
        if (labels && !same_label_footprint((*labels)[a][y * W + x], (*labels)[b], views[b].depth.dim(1),
                                            views[b].depth.dim(0), p, 1)) {
          ++rep.excluded;
          continue;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double diff = std::abs(double(va.image[(c * H + y) * W + x]) -
                                       double(sample_bicubic(views[b].image, c, p.x(), p.y())));
          rep.max_deviation = std::max(rep.max_deviation, diff);
        }
        ++rep.checked;
      }
    }
  return rep;
}

// ---- dataset files ----

inline std::string view_name(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%08zu", i);
  return buf;
}

inline Image8 to_image8(const Array& img) {
  Image8 out;
  out.height = img.dim(1);
  out.width = img.dim(2);
  out.channels = 3;
  const std::size_t P = out.width * out.height;
  out.data.resize(3 * P);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      out.data[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(img[c * P + p], 0.0f, 1.0f) * 255.0f));
  return out;
}

inline Array from_image8(const Image8& img) {
  const std::size_t P = img.width * img.height;
  std::vector<float> v(3 * P);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < 3; ++c) v[c * P + p] = static_cast<float>(img.data[p * 3 + c]) / 255.0f;
  return Array({3, img.height, img.width}, std::move(v));
}

inline FloatMap to_float_map(const Array& depth) {
  FloatMap m;
  m.height = depth.dim(0);
  m.width = depth.dim(1);
  m.channels = 1;
  m.data.assign(depth.data().begin(), depth.data().end());
  return m;
}

inline std::string format_pairs(const std::vector<std::vector<std::pair<int, double>>>& pairs) {
  std::ostringstream os;
  os << pairs.size() << "\n";
  char buf[32];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    os << i << "\n" << pairs[i].size();
    for (const auto& [idx, score] : pairs[i]) {
      std::snprintf(buf, sizeof buf, "%.6f", score);
      os << " " << idx << " " << buf;
    }
    os << "\n";
  }
  return os.str();
}

inline std::vector<std::vector<std::pair<int, double>>> parse_pairs(const std::string& path, const std::string& text,
                                                                    std::size_t views) {
  std::istringstream is(text);
  auto offset = [&]() { return is.eof() ? text.size() : static_cast<std::size_t>(is.tellg()); };
  std::size_t n = 0;
  if (!(is >> n) || n != views) throw ParseError(path, 0, "view count does not match the dataset");
  std::vector<std::vector<std::pair<int, double>>> pairs(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t at = offset();
    std::size_t idx = 0, k = 0;
    if (!(is >> idx) || idx >= n) throw ParseError(path, at, "bad view index");
    at = offset();
    if (!(is >> k) || k >= n) throw ParseError(path, at, "bad source count");
    for (std::size_t j = 0; j < k; ++j) {
      at = offset();
      int s = 0;
      double score = 0.0;
      if (!(is >> s >> score) || s < 0 || static_cast<std::size_t>(s) >= n || static_cast<std::size_t>(s) == idx)
        throw ParseError(path, at, "bad source entry");
      pairs[idx].push_back({s, score});
    }
  }
  return pairs;
}

inline void write_dataset(const SceneData& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "cams");
  fs::create_directories(fs::path(dir) / "depths");
  for (std::size_t i = 0; i < data.views.size(); ++i) {
    const auto& v = data.views[i];
    const std::string n = view_name(i);
    write_png((fs::path(dir) / "images" / (n + ".png")).string(), to_image8(v.image));
    detail::write_file_atomic((fs::path(dir) / "cams" / (n + "_cam.txt")).string(), format_camera(v.camera));
    write_pfm((fs::path(dir) / "depths" / (n + ".pfm")).string(), to_float_map(v.depth));
  }
  detail::write_file_atomic((fs::path(dir) / "pair.txt").string(), format_pairs(data.pairs));
}

inline SceneData read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  SceneData data;
  const fs::path images = fs::path(dir) / "images";
  if (!fs::is_directory(images)) throw ParseError(images.string(), 0, "missing images directory");
  std::size_t n = 0;
  while (fs::exists(images / (view_name(n) + ".png"))) ++n;
  if (n < 2) throw ParseError(images.string(), 0, "need at least 2 views");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = view_name(i);
    ViewRecord v;
    v.image = from_image8(read_png((images / (name + ".png")).string()));
    v.camera = read_camera((fs::path(dir) / "cams" / (name + "_cam.txt")).string());
    const std::string dpath = (fs::path(dir) / "depths" / (name + ".pfm")).string();
    if (fs::exists(dpath)) {
      FloatMap m = read_pfm(dpath);
      if (m.channels != 1 || m.width != v.image.dim(2) || m.height != v.image.dim(1))
        throw ParseError(dpath, 0, "depth map does not match the image size");
      v.depth = Array({m.height, m.width}, std::move(m.data));
    }
    data.views.push_back(std::move(v));
  }
  const std::string ppath = (fs::path(dir) / "pair.txt").string();
  if (fs::exists(ppath)) {
    data.pairs = parse_pairs(ppath, detail::read_file_bytes(ppath), n);
  } else {
    std::vector<Camera> cams;
    for (const auto& v : data.views) cams.push_back(v.camera);
    data.pairs = default_pairs(cams);
  }
  return data;
}

}  // namespace dspm
