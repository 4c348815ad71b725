#pragma once

// Depth-map fusion with geometric consistency filtering, per-map depth
// metrics and point-cloud accuracy / completeness.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dspm/checkpoint.hpp"
#include "dspm/error.hpp"
#include "dspm/geometry.hpp"
#include "dspm/parallel.hpp"
#include "dspm/tensor.hpp"

namespace dspm {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<std::array<std::uint8_t, 3>> colors;  // empty or one per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct FusionOptions {
  double tau_px = 1.0;
  double tau_rel = 0.01;
  std::size_t n_consist = 2;
};

// One depth map per view, [H, W], 0 = invalid. Images ([3, H, W] in [0,1])
// are optional and only colour the output points.
struct FusionInput {
  std::vector<Array> depths;
  std::vector<Camera> cameras;
  std::vector<Array> images;
};

namespace detail {

inline std::optional<double> depth_at(const Array& depth, long x, long y) {
  const long H = static_cast<long>(depth.dim(0)), W = static_cast<long>(depth.dim(1));
  if (x < 0 || y < 0 || x >= W || y >= H) return std::nullopt;
  const double d = depth[static_cast<std::size_t>(y * W + x)];
  if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
  return d;
}

// Forward-backward check of pixel (x, y) with depth d of view a against
// view b. Returns the depth of b's reprojected point in a's frame when
// consistent.
inline std::optional<double> check_pair(const Camera& ca, const Camera& cb, const Array& db, std::size_t x,
                                        std::size_t y, double d, const FusionOptions& opt) {
  const Vec3 X = back_project(ca, double(x), double(y), d);
  const Vec3 Xb = cb.R * X + cb.t;
  if (!(Xb.z() > 0.0)) return std::nullopt;
  const Vec2 q = project_point(cb, X).pixel;
  const auto dq = depth_at(db, std::lround(q.x()), std::lround(q.y()));
  if (!dq) return std::nullopt;
  const Vec3 Y = back_project(cb, std::round(q.x()), std::round(q.y()), *dq);
  const Vec3 Ya = ca.R * Y + ca.t;
  if (!(Ya.z() > 0.0)) return std::nullopt;
  const Vec2 p = project_point(ca, Y).pixel;
  const double px = (p - Vec2(double(x), double(y))).norm();
  if (px >= opt.tau_px || std::abs(Ya.z() - d) >= opt.tau_rel * d) return std::nullopt;
  return Ya.z();
}

}  // namespace detail

// Per view: 1 where the pixel survived, and its fused depth (0 elsewhere).
struct FusedView {
  Array mask;
  Array depth;
};

// A pixel survives when at least n_consist other views pass the
// forward-backward check; its depth becomes the mean of its own depth and
// the consistent reprojected depths.
inline std::vector<FusedView> consistency_filter(const FusionInput& in, const FusionOptions& opt = {}) {
  const std::size_t N = in.depths.size();
  if (N < 2 || in.cameras.size() != N) throw UsageError("fuse: need at least two depth maps with one camera each");
  std::vector<FusedView> out(N);
  parallel_for(0, N, [&](std::size_t a) {
    const Array& da = in.depths[a];
    const std::size_t H = da.dim(0), W = da.dim(1);
    std::vector<float> mask(H * W, 0.0f), fused(H * W, 0.0f);
    std::vector<double> ds;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const auto d = detail::depth_at(da, long(x), long(y));
        if (!d) continue;
        ds.assign(1, *d);
        for (std::size_t b = 0; b < N; ++b) {
          if (b == a) continue;
          if (const auto r = detail::check_pair(in.cameras[a], in.cameras[b], in.depths[b], x, y, *d, opt))
            ds.push_back(*r);
        }
        if (ds.size() < opt.n_consist + 1) continue;
        // Sorted summation keeps the result independent of view order.
        std::sort(ds.begin() + 1, ds.end());
        mask[y * W + x] = 1.0f;
        fused[y * W + x] = static_cast<float>(std::accumulate(ds.begin(), ds.end(), 0.0) / double(ds.size()));
      }
    out[a] = {Array({H, W}, std::move(mask)), Array({H, W}, std::move(fused))};
  });
  return out;
}

inline PointCloud fuse(const FusionInput& in, const FusionOptions& opt = {}) {
  if (!in.images.empty() && in.images.size() != in.depths.size()) throw UsageError("fuse: one image per view or none");
  const auto views = consistency_filter(in, opt);
  PointCloud cloud;
  for (std::size_t a = 0; a < views.size(); ++a) {
    const std::size_t H = views[a].mask.dim(0), W = views[a].mask.dim(1);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (views[a].mask[y * W + x] == 0.0f) continue;
        cloud.points.push_back(back_project(in.cameras[a], double(x), double(y), views[a].depth[y * W + x]));
        if (in.images.empty()) continue;
        std::array<std::uint8_t, 3> c{};
        for (std::size_t k = 0; k < 3; ++k)
          c[k] = static_cast<std::uint8_t>(
              std::lround(std::clamp<double>(in.images[a][(k * H + y) * W + x], 0.0, 1.0) * 255.0));
        cloud.colors.push_back(c);
      }
  }
  return cloud;
}

// ---- depth metrics ----

struct DepthMetrics {
  double mae = 0.0;
  double within1 = 0.0;  // fraction with |error| < theta1
  double within2 = 0.0;
  std::size_t count = 0;
};

// mask: nonzero where the pixel counts. Thresholds in scene units.
inline DepthMetrics depth_metrics(const Array& depth, const Array& gt, const Array& mask, double theta1 = 0.05,
                                  double theta2 = 0.1) {
  if (depth.shape() != gt.shape() || mask.shape() != gt.shape())
    throw DimensionError("depth_metrics: shapes " + to_string(depth.shape()) + ", " + to_string(gt.shape()) + ", " +
                         to_string(mask.shape()));
  DepthMetrics m;
  double sum = 0.0;
  std::size_t in1 = 0, in2 = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (mask[i] == 0.0f) continue;
    const double e = std::abs(double(depth[i]) - double(gt[i]));
    sum += e;
    in1 += e < theta1;
    in2 += e < theta2;
    ++m.count;
  }
  if (m.count == 0) throw DomainError("depth_metrics: empty mask");
  m.mae = sum / double(m.count);
  m.within1 = double(in1) / double(m.count);
  m.within2 = double(in2) / double(m.count);
  return m;
}

// Mask of valid ground truth at least `border` pixels from the image edge.
inline Array interior_mask(const Array& gt, std::size_t border) {
  const std::size_t H = gt.dim(0), W = gt.dim(1);
  std::vector<float> m(H * W, 0.0f);
  for (std::size_t y = border; y + border < H; ++y)
    for (std::size_t x = border; x + border < W; ++x) m[y * W + x] = gt[y * W + x] > 0.0f ? 1.0f : 0.0f;
  return Array({H, W}, std::move(m));
}

// ---- nearest neighbours ----

// Static 3-d tree over a point set, median splits on the widest axis.
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& pts) : pts_(pts), idx_(pts.size()) {
    std::iota(idx_.begin(), idx_.end(), std::size_t(0));
    if (!idx_.empty()) root_ = build(0, idx_.size());
  }

  bool empty() const { return pts_.empty(); }

  // Index and distance of the nearest point; ties keep the lower index.
  std::pair<std::size_t, double> nearest(const Vec3& q) const {
    if (empty()) throw DomainError("KdTree::nearest: empty tree");
    std::size_t best = std::numeric_limits<std::size_t>::max();
    double best_d2 = std::numeric_limits<double>::infinity();
    search(root_, q, best, best_d2);
    return {best, std::sqrt(best_d2)};
  }

 private:
  struct Node {
    std::size_t begin, end;  // leaf range in idx_
    int axis = -1;           // -1 for leaves
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };
  static constexpr std::size_t kLeaf = 8;

  std::size_t build(std::size_t begin, std::size_t end) {
    Node n{begin, end};
    if (end - begin > kLeaf) {
      Vec3 lo = pts_[idx_[begin]], hi = lo;
      for (std::size_t i = begin; i < end; ++i) {
        lo = lo.cwiseMin(pts_[idx_[i]]);
        hi = hi.cwiseMax(pts_[idx_[i]]);
      }
      Vec3 ext = hi - lo;
      ext.maxCoeff(&n.axis);
      const std::size_t mid = begin + (end - begin) / 2;
      const int ax = n.axis;
      std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                       [&](std::size_t a, std::size_t b) { return pts_[a][ax] < pts_[b][ax]; });
      n.split = pts_[idx_[mid]][ax];
      nodes_.push_back(n);
      const std::size_t self = nodes_.size() - 1;
      const std::size_t l = build(begin, mid);
      const std::size_t r = build(mid, end);
      nodes_[self].left = l;
      nodes_[self].right = r;
      return self;
    }
    nodes_.push_back(n);
    return nodes_.size() - 1;
  }

  void search(std::size_t ni, const Vec3& q, std::size_t& best, double& best_d2) const {
    const Node& n = nodes_[ni];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t k = idx_[i];
        const double d2 = (pts_[k] - q).squaredNorm();
        if (d2 < best_d2 || (d2 == best_d2 && k < best)) {
          best_d2 = d2;
          best = k;
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::size_t first = diff < 0 ? n.left : n.right, second = diff < 0 ? n.right : n.left;
    search(first, q, best, best_d2);
    if (diff * diff <= best_d2) search(second, q, best, best_d2);
  }

  std::vector<Vec3> pts_;
  std::vector<std::size_t> idx_;
  std::vector<Node> nodes_;
  std::size_t root_ = 0;
};

// ---- cloud metrics ----

struct CloudMetrics {
  double acc = 0.0;
  double comp = 0.0;
  double overall = 0.0;
};

inline double mean_nearest_distance(const std::vector<Vec3>& from, const KdTree& to) {
  std::vector<double> d(from.size());
  parallel_for(0, from.size(), [&](std::size_t i) { d[i] = to.nearest(from[i]).second; }, 256);
  return std::accumulate(d.begin(), d.end(), 0.0) / double(d.size());
}

// Acc: cloud -> ground truth, Comp: ground truth -> cloud, Overall their
// mean. An empty cloud scores +inf.
inline CloudMetrics cloud_metrics(const std::vector<Vec3>& cloud, const std::vector<Vec3>& gt) {
  if (gt.empty()) throw DomainError("cloud_metrics: no ground-truth samples");
  CloudMetrics m;
  if (cloud.empty()) {
    std::cerr << "warning: empty point cloud, metrics are infinite\n";
    m.acc = m.comp = m.overall = std::numeric_limits<double>::infinity();
    return m;
  }
  const KdTree gt_tree(gt), cloud_tree(cloud);
  m.acc = mean_nearest_distance(cloud, gt_tree);
  m.comp = mean_nearest_distance(gt, cloud_tree);
  m.overall = (m.acc + m.comp) / 2.0;
  return m;
}

// Ground-truth surface samples: every valid pixel of every ground-truth
// depth map, back-projected. Depths are exact ray-surface intersections.
inline std::vector<Vec3> gt_samples(const std::vector<Array>& depths, const std::vector<Camera>& cameras,
                                    std::size_t stride = 1) {
  if (depths.size() != cameras.size()) throw UsageError("gt_samples: one camera per depth map");
  if (stride == 0) throw UsageError("gt_samples: stride must be positive");
  std::vector<Vec3> out;
  for (std::size_t v = 0; v < depths.size(); ++v) {
    const std::size_t H = depths[v].dim(0), W = depths[v].dim(1);
    for (std::size_t y = 0; y < H; y += stride)
      for (std::size_t x = 0; x < W; x += stride)
        if (const float d = depths[v][y * W + x]; d > 0.0f) out.push_back(back_project(cameras[v], double(x), double(y), d));
  }
  return out;
}

// ---- PLY ----

inline std::string encode_ply(const PointCloud& cloud) {
  const bool color = !cloud.colors.empty();
  if (color && cloud.colors.size() != cloud.points.size()) throw DimensionError("ply: one colour per point");
  std::string s = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
                  "\nproperty float x\nproperty float y\nproperty float z\n";
  if (color) s += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  s += "end_header\n";
  char buf[160];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    int n = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", float(p.x()), float(p.y()), float(p.z()));
    if (color)
      n += std::snprintf(buf + n, sizeof buf - n, " %u %u %u", cloud.colors[i][0], cloud.colors[i][1], cloud.colors[i][2]);
    s.append(buf, static_cast<std::size_t>(n));
    s.push_back('\n');
  }
  return s;
}

inline void write_ply(const std::string& path, const PointCloud& cloud) {
  detail::write_file_atomic(path, encode_ply(cloud));
}

inline PointCloud parse_ply(const std::string& path, const std::string& text) {
  std::size_t pos = 0, line_start = 0;
  auto next_line = [&]() {
    if (pos >= text.size()) throw ParseError(path, pos, "unexpected end of file");
    line_start = pos;
    const std::size_t e = text.find('\n', pos);
    const std::size_t end = e == std::string::npos ? text.size() : e;
    pos = end + 1;
    return text.substr(line_start, end - line_start);
  };
  if (next_line() != "ply") throw ParseError(path, 0, "missing 'ply' magic");
  if (next_line() != "format ascii 1.0") throw ParseError(path, line_start, "only 'format ascii 1.0' is supported");
  std::size_t n = 0, props = 0;
  bool have_count = false;
  for (;;) {
    const std::string l = next_line();
    if (l == "end_header") break;
    if (l.rfind("element vertex ", 0) == 0) {
      try {
        n = std::stoul(l.substr(15));
      } catch (const std::exception&) {
        throw ParseError(path, line_start, "bad vertex count");
      }
      have_count = true;
    } else if (l.rfind("property ", 0) == 0) {
      ++props;
    } else if (l.rfind("comment", 0) != 0) {
      throw ParseError(path, line_start, "unexpected header line '" + l + "'");
    }
  }
  if (!have_count) throw ParseError(path, pos, "missing vertex element");
  if (props != 3 && props != 6) throw ParseError(path, pos, "expected 3 or 6 vertex properties");
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string l = next_line();
    double v[6] = {};
    const int got = std::sscanf(l.c_str(), "%lf %lf %lf %lf %lf %lf", &v[0], &v[1], &v[2], &v[3], &v[4], &v[5]);
    if (got != static_cast<int>(props)) throw ParseError(path, line_start, "bad vertex line");
    c.points.emplace_back(v[0], v[1], v[2]);
    if (props == 6)
      c.colors.push_back({static_cast<std::uint8_t>(v[3]), static_cast<std::uint8_t>(v[4]), static_cast<std::uint8_t>(v[5])});
  }
  return c;
}

inline PointCloud read_ply(const std::string& path) { return parse_ply(path, detail::read_file_bytes(path)); }

}  // namespace dspm
