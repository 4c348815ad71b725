#pragma once

// Intra-view correlation pyramid, plane flow decoding and flow-guided
// hypothesis propagation.
//
// A flow field at a level is [2M, H, W] with channel 2k = dx of offset k and
// 2k+1 = dy, in pixels of that level.

#include <string>
#include <vector>

#include "dspm/backbone.hpp"

namespace dspm {

struct PlaneConfig {
  std::size_t radius = 3;     // correlation search radius R₁
  std::size_t offsets = 8;    // M
  std::size_t used = 8;       // m₁ offsets consumed by propagation
  double max_offset = 16.0;   // R_flow, per level
  std::size_t width = 24;     // channels of each dense block

  std::size_t entries() const { return (2 * radius + 1) * (2 * radius + 1); }
  void validate() const {
    if (radius < 1) throw ConfigError("plane: radius must be >= 1");
    if (offsets < 1) throw ConfigError("plane: need at least one offset");
    if (used > offsets) throw ConfigError("plane: m1 = " + std::to_string(used) + " exceeds M = " + std::to_string(offsets));
    if (!(max_offset > 0.0)) throw ConfigError("plane: max offset must be positive");
  }
};

// c(p, η) = <φ[p], φ[p+η]> / √h for ‖η‖∞ ≤ R, border-clamped.
template <typename T>
Tensor<T> build_correlation(const Tensor<T>& features, std::size_t radius) {
  return local_correlation(features, radius);
}

// Offsets (±1,0), (0,±1), (±3,0), (0,±3) repeated to M entries.
inline std::vector<double> template_offsets(std::size_t M) {
  static const double base[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {3, 0}, {-3, 0}, {0, 3}, {0, -3}};
  std::vector<double> v(2 * M);
  for (std::size_t k = 0; k < M; ++k) {
    v[2 * k] = base[k % 8][0];
    v[2 * k + 1] = base[k % 8][1];
  }
  return v;
}

template <typename T>
Tensor<T> template_flow(std::size_t M, std::size_t H, std::size_t W) {
  const auto off = template_offsets(M);
  std::vector<T> v(2 * M * H * W);
  for (std::size_t c = 0; c < 2 * M; ++c)
    for (std::size_t p = 0; p < H * W; ++p) v[c * H * W + p] = static_cast<T>(off[c]);
  return Tensor<T>({2 * M, H, W}, std::move(v));
}

template <typename T>
void add_plane_params(ParamSet<T>& ps, const PlaneConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t cin = cfg.entries();
  for (int b = 1; b <= 4; ++b) {
    add_cbl(ps, "plane.block" + std::to_string(b), cin, cfg.width, 3, rng);
    cin += cfg.width;
  }
  add_conv(ps, "plane.pred_field", cin, 2 * cfg.offsets, 3, rng, 0.1);
  add_conv(ps, "plane.pred_residual", cin, 2, 3, rng, 0.1);
  // Start from the fixed template so training refines a sensible field.
  auto& bias = ps.at("plane.pred_field.bias");
  const auto off = template_offsets(cfg.offsets);
  auto b = bias.mutable_data();
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double r = off[i] / cfg.max_offset;
    b[i] = static_cast<T>(cfg.max_offset * std::atanh(r));
  }
}

// Dense trunk shared by all levels: each block sees the correlation volume
// and every earlier block's output.
template <typename T>
Tensor<T> plane_trunk(ParamSet<T>& ps, const Tensor<T>& corr, bool training) {
  std::vector<Tensor<T>> feats{corr};
  for (int b = 1; b <= 4; ++b) feats.push_back(cbl(ps, "plane.block" + std::to_string(b), concat(feats, 0), training));
  return concat(feats, 0);
}

template <typename T>
Tensor<T> upsample_bilinear_times(Tensor<T> x, std::size_t times) {
  for (std::size_t i = 0; i < times; ++i) x = upsample_bilinear2x(x);
  return x;
}

// Pixel grid plus per-offset displacement: coords [2, M, H, W] for a flow
// [2M, H, W], scaled by `gain`.
template <typename T>
Tensor<T> displaced_grid(const Tensor<T>& flow, T gain) {
  const std::size_t M = flow.dim(0) / 2, H = flow.dim(1), W = flow.dim(2);
  std::vector<T> g(2 * M * H * W);
  for (std::size_t k = 0; k < M; ++k)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        g[(k * H + y) * W + x] = static_cast<T>(x);
        g[M * H * W + (k * H + y) * W + x] = static_cast<T>(y);
      }
  // flow channels (dx_k, dy_k) -> coordinate planes (x: all k, y: all k)
  const Tensor<T> f = permute(reshape(flow, Shape{M, 2, H, W}), {1, 0, 2, 3});
  return Tensor<T>({2, M, H, W}, std::move(g)) + f * gain;
}

struct FlowOptions {
  bool zero_residual = false;  // replace the residual predictor output by zero
  bool zero_field = false;     // replace the level-1 field by zero
};

// F_1 from C_1, then F_l = γ·F_1↑ + F̃_l[p + γ·F_1↑] (γ = 2^(l-1)) for the
// finer correlation levels; all offsets clamped to ±R_flow.
template <typename T>
std::vector<Tensor<T>> decode_plane_flow(ParamSet<T>& ps, const PlaneConfig& cfg,
                                         const std::vector<Tensor<T>>& correlations, bool training,
                                         const FlowOptions& opt = {}) {
  if (correlations.empty()) throw UsageError("decode_plane_flow: empty correlation pyramid");
  const T R = static_cast<T>(cfg.max_offset);
  std::vector<Tensor<T>> fields;
  const Tensor<T> raw = conv(ps, "plane.pred_field", plane_trunk(ps, correlations[0], training));
  Tensor<T> f1 = tanh(raw / R) * R;
  if (opt.zero_field) f1 = f1 * T(0);
  fields.push_back(f1);
  for (std::size_t l = 1; l < correlations.size(); ++l) {
    const T gamma = static_cast<T>(std::size_t(1) << l);
    const Tensor<T> up = upsample_bilinear_times(f1, l) * gamma;
    const std::size_t M = up.dim(0) / 2, H = up.dim(1), W = up.dim(2);
    if (correlations[l].dim(1) != H || correlations[l].dim(2) != W)
      throw DimensionError("decode_plane_flow: correlation level " + std::to_string(l + 1) + " has the wrong size");
    Tensor<T> resid = conv(ps, "plane.pred_residual", plane_trunk(ps, correlations[l], training));
    if (opt.zero_residual) resid = resid * T(0);
    // fetched [2, M, H, W] -> [M, 2, H, W] -> [2M, H, W]
    const Tensor<T> fetched = bilinear_sample(resid, displaced_grid(up, T(1)));
    const Tensor<T> per_offset = reshape(permute(fetched, {1, 0, 2, 3}), Shape{2 * M, H, W});
    fields.push_back(clamp(up + per_offset, -R, R));
  }
  return fields;
}

// Finest-level field: the last decoded field upsampled ×2 with doubled
// magnitudes.
template <typename T>
Tensor<T> extend_flow(const Tensor<T>& field, double max_offset) {
  const T R = static_cast<T>(max_offset);
  return clamp(upsample_bilinear2x(field) * T(2), -R, R);
}

// Appends, for each of the first m₁ offsets, the current best depth fetched
// bilinearly at p + o_k. candidates [m, H, W], best [H, W] (z domain).
// Result [m + m₁, H, W], fetched values clamped to [0, 1].
template <typename T>
Tensor<T> propagate(const Tensor<T>& candidates, const Tensor<T>& best, const Tensor<T>& flow, std::size_t used) {
  if (flow.rank() != 3 || flow.dim(0) % 2 != 0) throw DimensionError("propagate: flow must be [2M,H,W]");
  const std::size_t M = flow.dim(0) / 2, H = flow.dim(1), W = flow.dim(2);
  if (used > M) throw ConfigError("propagate: m1 = " + std::to_string(used) + " exceeds M = " + std::to_string(M));
  if (best.rank() != 2 || best.dim(0) != H || best.dim(1) != W) throw DimensionError("propagate: best depth shape");
  if (candidates.rank() != 3 || candidates.dim(1) != H || candidates.dim(2) != W)
    throw DimensionError("propagate: candidate shape");
  if (used == 0) return candidates;
  const Tensor<T> f = used == M ? flow : slice(flow, 0, 0, 2 * used);
  const Tensor<T> fetched = bilinear_sample(reshape(best, Shape{1, H, W}), displaced_grid(f, T(1)));
  return concat(std::vector<Tensor<T>>{candidates, clamp(reshape(fetched, Shape{used, H, W}), T(0), T(1))}, 0);
}

}  // namespace dspm
