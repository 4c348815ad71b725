#pragma once

// Cost volumes, the two-component Laplace mixture with uncertainty maps,
// the unified-volume depth regression and uncertainty-aware perturbation.
//
// Mixture coordinates: y = z·m₀ (one unit per initial inverse-depth
// interval). A Laplace component with parameter σ has density
// exp(−√2|y−μ|/σ)/(√2σ), i.e. scale b = σ/√2 and standard deviation σ.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dspm/geometry.hpp"
#include "dspm/params.hpp"

namespace dspm {

inline constexpr double kSqrt2 = 1.41421356237309504880;

struct Mixture {
  double mu = 0.0;
  double alpha1 = 1.0, alpha2 = 0.0;
  double sigma1 = 1.0, sigma2 = 2.0;
};

inline double laplace_pdf(double y, double mu, double sigma) {
  return std::exp(-kSqrt2 * std::abs(y - mu) / sigma) / (kSqrt2 * sigma);
}

inline double laplace_cdf(double y, double mu, double sigma) {
  const double b = sigma / kSqrt2;
  return y < mu ? 0.5 * std::exp((y - mu) / b) : 1.0 - 0.5 * std::exp(-(y - mu) / b);
}

inline double laplace_inv_cdf(double q, double mu, double sigma) {
  if (!(q > 0.0 && q < 1.0)) throw DomainError("laplace_inv_cdf: q must lie in (0,1)");
  if (!(sigma > 0.0)) throw DomainError("laplace_inv_cdf: sigma must be positive");
  const double b = sigma / kSqrt2;
  return q < 0.5 ? mu + b * std::log(2.0 * q) : mu - b * std::log(2.0 * (1.0 - q));
}

inline double mixture_pdf(double y, const Mixture& m) {
  return m.alpha1 * laplace_pdf(y, m.mu, m.sigma1) + m.alpha2 * laplace_pdf(y, m.mu, m.sigma2);
}

inline double mixture_cdf(double y, const Mixture& m) {
  return m.alpha1 * laplace_cdf(y, m.mu, m.sigma1) + m.alpha2 * laplace_cdf(y, m.mu, m.sigma2);
}

// P(|y − μ| < R₂) under the mixture; `squared` squares each component term.
inline double uncertainty(const Mixture& m, double r2, bool squared = false) {
  if (!(r2 >= 0.0)) throw DomainError("uncertainty: R2 must be non-negative");
  double a = 1.0 - std::exp(-kSqrt2 * r2 / m.sigma1), b = 1.0 - std::exp(-kSqrt2 * r2 / m.sigma2);
  if (squared) {
    a *= a;
    b *= b;
  }
  return m.alpha1 * a + m.alpha2 * b;
}

inline double expected_sigma(const std::vector<double>& u, const std::vector<double>& sigma2, double eps_u = 1e-6) {
  if (u.empty() || u.size() != sigma2.size()) throw DimensionError("expected_sigma: need matching non-empty inputs");
  double total = 0.0, e = 0.0;
  for (double x : u) total += x;
  for (std::size_t i = 0; i < u.size(); ++i) e += u[i] / (total + eps_u) * sigma2[i];
  return e;
}

// Bin edges in units of σ around μ: the mass P̃ of [μ − εσ, μ + εσ] split
// into m₂ equal parts, centred so the tails carry P*/2 each.
inline std::vector<double> perturbation_edges(double eps, std::size_t m2) {
  if (!(eps > 0.0)) throw DomainError("perturb: eps must be positive");
  if (m2 < 1) throw DomainError("perturb: m2 must be >= 1");
  const double mass = 1.0 - std::exp(-kSqrt2 * eps);
  const double tail = 0.5 * (1.0 - mass);
  std::vector<double> edges(m2 + 1);
  for (std::size_t j = 0; j <= m2; ++j)
    edges[j] = laplace_inv_cdf(static_cast<double>(j) / static_cast<double>(m2) * mass + tail, 0.0, 1.0);
  return edges;
}

// Candidate offsets (units of σ): midpoints of the bin edges.
inline std::vector<double> perturbation_offsets(double eps, std::size_t m2) {
  const auto edges = perturbation_edges(eps, m2);
  std::vector<double> out(m2);
  for (std::size_t j = 0; j < m2; ++j) out[j] = 0.5 * (edges[j] + edges[j + 1]);
  return out;
}

inline std::vector<double> perturb(double mu, double sigma, double eps, std::size_t m2, double y_min, double y_max) {
  auto c = perturbation_offsets(eps, m2);
  for (auto& v : c) v = std::clamp(mu + sigma * v, y_min, y_max);
  return c;
}

// ---- tensor side ----

struct MatcherConfig {
  std::size_t groups = 8;
  double sigma1 = 1.0;
  double r2 = 1.0;
  double sigma_max = 16.0;
  double eps_sigma = 1e-3;
  double eps_u = 1e-6;
  bool eq5_squared = false;
  std::size_t branch_width = 16;
  std::size_t reg_width = 8;
  bool cosine_cost = true;
  double reg_init_gain = 30.0;  // 0: keep the random regularizer init
};

// Per-pixel L2 normalization over channels, scaled to norm √h so that the
// mean of the G group correlations is the cosine similarity.
template <typename T>
Tensor<T> normalize_features(const Tensor<T>& feat) {
  const T h = static_cast<T>(feat.dim(0));
  return feat / sqrt(sum(feat * feat, 0, true) / h + T(1e-6));
}

// S[g, j, p] = (G/h)·Σ_{c∈g} ref[c, p]·warped[c, j, p].
template <typename T>
Tensor<T> group_correlation(const Tensor<T>& ref, const Tensor<T>& warped, std::size_t groups) {
  if (ref.rank() != 3 || warped.rank() != 4 || warped.dim(0) != ref.dim(0) || warped.dim(2) != ref.dim(1) ||
      warped.dim(3) != ref.dim(2))
    throw DimensionError("group_correlation: shapes " + to_string(ref.shape()) + " and " + to_string(warped.shape()));
  const std::size_t h = ref.dim(0), m = warped.dim(1), P = ref.dim(1) * ref.dim(2);
  if (groups == 0 || h % groups != 0)
    throw ConfigError("group_correlation: " + std::to_string(groups) + " groups do not divide " + std::to_string(h) +
                      " channels");
  const std::size_t per = h / groups;
  const T scale = static_cast<T>(groups) / static_cast<T>(h);
  const auto rv = ref.data();
  const auto wv = warped.data();
  std::vector<T> out(groups * m * P, T(0));
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t c = g * per; c < (g + 1) * per; ++c)
      for (std::size_t j = 0; j < m; ++j) {
        T* o = out.data() + (g * m + j) * P;
        const T* r = rv.data() + c * P;
        const T* w = wv.data() + (c * m + j) * P;
        for (std::size_t p = 0; p < P; ++p) o[p] += r[p] * w[p];
      }
  for (auto& v : out) v *= scale;
  return detail::make_result<T>("group_correlation", Shape{groups, m, ref.dim(1), ref.dim(2)}, std::move(out),
                                {ref, warped}, [groups, per, m, P, scale](Node<T>& self) {
                                  const auto& rv = self.parents[0]->value;
                                  const auto& wv = self.parents[1]->value;
                                  auto* gr = detail::sink(self, 0);
                                  auto* gw = detail::sink(self, 1);
                                  for (std::size_t g = 0; g < groups; ++g)
                                    for (std::size_t c = g * per; c < (g + 1) * per; ++c)
                                      for (std::size_t j = 0; j < m; ++j) {
                                        const T* go = self.grad.data() + (g * m + j) * P;
                                        for (std::size_t p = 0; p < P; ++p) {
                                          const T gs = go[p] * scale;
                                          if (gr) (*gr)[c * P + p] += gs * wv[(c * m + j) * P + p];
                                          if (gw) (*gw)[(c * m + j) * P + p] += gs * rv[c * P + p];
                                        }
                                      }
                                });
}

// One volume [G, m, H, W] per source view. Cameras must already be scaled
// to the feature resolution; candidates are z values [m, H, W].
template <typename T>
std::vector<Tensor<T>> build_cost_volumes(const Tensor<T>& ref_feat, const std::vector<Tensor<T>>& src_feats,
                                          const Camera& ref_cam, const std::vector<Camera>& src_cams,
                                          const DepthDomain& dom, const Tensor<T>& candidates, std::size_t groups) {
  if (src_feats.size() != src_cams.size()) throw DimensionError("build_cost_volumes: one camera per source view");
  std::vector<Tensor<T>> vols;
  for (std::size_t i = 0; i < src_feats.size(); ++i) {
    const Tensor<T> coords = plane_sweep_coords(ref_cam, src_cams[i], dom, candidates);
    vols.push_back(group_correlation(ref_feat, bilinear_sample(src_feats[i], coords), groups));
  }
  return vols;
}

template <typename T>
void add_matcher_params(ParamSet<T>& ps, const MatcherConfig& cfg, Rng& rng) {
  const std::size_t G = cfg.groups, B = cfg.branch_width, Rw = cfg.reg_width;
  ps.add_weight("matcher.cand.weight", {B / 2, G, 3, 1, 1}, G * 3, rng);
  ps.add_constant("matcher.cand.bias", {B / 2}, T(0));
  add_cbl(ps, "matcher.branch1", B, B, 3, rng);
  add_cbl(ps, "matcher.branch2", B, B, 3, rng);
  add_conv(ps, "matcher.head", B, 3, 1, rng, 0.1);
  add_conv3(ps, "matcher.reg1", G, Rw, 3, rng);
  add_conv3(ps, "matcher.reg2", Rw, Rw, 3, rng);
  add_conv3(ps, "matcher.reg3", Rw, 1, 3, rng, 0.5);
  if (cfg.reg_init_gain > 0) {
    // Output channel 0 of each layer becomes a centre tap carrying the
    // group mean; the other channels keep their random init.
    const auto centre = [](Tensor<T>& w, std::size_t o, std::size_t i, T v) {
      auto d = w.mutable_data();
      if (i == 0) std::fill(d.begin() + o * w.dim(1) * 27, d.begin() + (o + 1) * w.dim(1) * 27, T(0));
      d[(o * w.dim(1) + i) * 27 + 13] = v;
    };
    for (std::size_t g = 0; g < G; ++g) centre(ps.at("matcher.reg1.weight"), 0, g, T(1) / static_cast<T>(G));
    centre(ps.at("matcher.reg2.weight"), 0, 0, T(1));
    centre(ps.at("matcher.reg3.weight"), 0, 0, static_cast<T>(cfg.reg_init_gain));
  }
}

template <typename T>
struct MixtureMaps {
  Tensor<T> sigma2;  // [V, H, W], y units
  Tensor<T> alpha;   // [V, 2, H, W]
  Tensor<T> alpha_logits;
  Tensor<T> u;       // [V, H, W]
};

template <typename T>
Tensor<T> uncertainty_map(const MatcherConfig& cfg, const Tensor<T>& alpha, const Tensor<T>& sigma2) {
  const std::size_t V = alpha.dim(0), H = alpha.dim(2), W = alpha.dim(3);
  const Tensor<T> a1 = reshape(slice(alpha, 1, 0, 1), Shape{V, H, W});
  const Tensor<T> a2 = reshape(slice(alpha, 1, 1, 1), Shape{V, H, W});
  T c1 = static_cast<T>(1.0 - std::exp(-kSqrt2 * cfg.r2 / cfg.sigma1));
  Tensor<T> c2 = T(1) - exp(static_cast<T>(-kSqrt2 * cfg.r2) / sigma2);
  if (cfg.eq5_squared) {
    c1 *= c1;
    c2 = c2 * c2;
  }
  return a1 * c1 + a2 * c2;
}

// raw [V, 3, H, W]: channel 0 drives σ₂ = min(σ₁ + ε_σ + softplus(raw), σ_max),
// channels 1-2 are the α logits.
template <typename T>
MixtureMaps<T> mixture_from_raw(const MatcherConfig& cfg, const Tensor<T>& raw) {
  if (raw.rank() != 4 || raw.dim(1) != 3) throw DimensionError("mixture_from_raw: raw must be [V,3,H,W]");
  const std::size_t V = raw.dim(0), H = raw.dim(2), W = raw.dim(3);
  MixtureMaps<T> out;
  const T s1 = static_cast<T>(cfg.sigma1);
  const Tensor<T> sig = softplus(reshape(slice(raw, 1, 0, 1), Shape{V, H, W})) + (s1 + static_cast<T>(cfg.eps_sigma));
  out.sigma2 = clamp(sig, s1, static_cast<T>(cfg.sigma_max));
  out.alpha_logits = slice(raw, 1, 1, 2);
  out.alpha = softmax(out.alpha_logits, 1);
  out.u = uncertainty_map(cfg, out.alpha, out.sigma2);
  return out;
}

// Branch 1: candidate-axis convolution, max and mean pooling over
// candidates, two CBL layers and a 1×1 head giving (raw σ₂, two α logits).
template <typename T>
MixtureMaps<T> infer_mixture(ParamSet<T>& ps, const MatcherConfig& cfg, const std::vector<Tensor<T>>& vols,
                             bool training) {
  if (vols.empty()) throw UsageError("infer_mixture: no source views");
  const std::size_t H = vols[0].dim(2), W = vols[0].dim(3);
  std::vector<Tensor<T>> pooled;
  for (const auto& s : vols) {
    const Tensor<T> e = leaky_relu(conv3d(s, ps.at("matcher.cand.weight"), ps.at("matcher.cand.bias")), T(0.1));
    const Tensor<T> both = concat(std::vector<Tensor<T>>{max(e, 1), mean(e, 1)}, 0);
    pooled.push_back(reshape(both, Shape{1, both.dim(0), H, W}));
  }
  Tensor<T> x = concat(pooled, 0);
  x = cbl(ps, "matcher.branch2", cbl(ps, "matcher.branch1", x, training), training);
  return mixture_from_raw(cfg, conv(ps, "matcher.head", x));
}

// û_i = u_i / (Σ u + ε_u), [V, H, W].
template <typename T>
Tensor<T> normalized_weights(const Tensor<T>& u, double eps_u) {
  return u / (sum(u, 0, true) + static_cast<T>(eps_u));
}

template <typename T>
struct MatchResult {
  Tensor<T> mu;              // [H, W], z domain
  Tensor<T> weights;         // [m, H, W]
  Tensor<T> scores;          // [m, H, W]
  MixtureMaps<T> mixture;
  Tensor<T> expected_sigma;  // [H, W], y units
};

// μ = Σ_j w_j z_j with w a softmax over the candidate axis.
template <typename T>
Tensor<T> weighted_depth(const Tensor<T>& weights, const Tensor<T>& candidates) {
  if (weights.shape() != candidates.shape()) throw DimensionError("weighted_depth: shape mismatch");
  return sum(weights * candidates, 0);
}

// Unified volume Σ û_i S_i -> 3-D regularizer -> softmax over candidates.
template <typename T>
Tensor<T> regularize(ParamSet<T>& ps, const Tensor<T>& unified) {
  const std::size_t m = unified.dim(1), H = unified.dim(2), W = unified.dim(3);
  Tensor<T> x = leaky_relu(conv3(ps, "matcher.reg1", unified), T(0.1));
  x = leaky_relu(conv3(ps, "matcher.reg2", x), T(0.1));
  return reshape(conv3(ps, "matcher.reg3", x), Shape{m, H, W});
}

template <typename T>
MatchResult<T> regress_depth(ParamSet<T>& ps, const MatcherConfig& cfg, const std::vector<Tensor<T>>& vols,
                             const MixtureMaps<T>& mix, const Tensor<T>& candidates) {
  const std::size_t V = vols.size(), H = candidates.dim(1), W = candidates.dim(2);
  const Tensor<T> uhat = normalized_weights(mix.u, cfg.eps_u);
  Tensor<T> unified;
  for (std::size_t i = 0; i < V; ++i) {
    const Tensor<T> wi = reshape(slice(uhat, 0, i, 1), Shape{1, 1, H, W});
    unified = i == 0 ? vols[i] * wi : unified + vols[i] * wi;
  }
  MatchResult<T> r;
  r.mixture = mix;
  r.scores = regularize(ps, unified);
  r.weights = softmax(r.scores, 0);
  r.mu = weighted_depth(r.weights, candidates);
  r.expected_sigma = sum(uhat * mix.sigma2, 0);
  return r;
}

template <typename T>
MatchResult<T> evaluate_candidates(ParamSet<T>& ps, const MatcherConfig& cfg, const Tensor<T>& ref_feat,
                                   const std::vector<Tensor<T>>& src_feats, const Camera& ref_cam,
                                   const std::vector<Camera>& src_cams, const DepthDomain& dom,
                                   const Tensor<T>& candidates, bool training) {
  std::vector<Tensor<T>> vols;
  if (cfg.cosine_cost) {
    std::vector<Tensor<T>> src;
    for (const auto& f : src_feats) src.push_back(normalize_features(f));
    vols = build_cost_volumes(normalize_features(ref_feat), src, ref_cam, src_cams, dom, candidates,
                              cfg.groups);
  } else {
    vols = build_cost_volumes(ref_feat, src_feats, ref_cam, src_cams, dom, candidates, cfg.groups);
  }
  return regress_depth(ps, cfg, vols, infer_mixture(ps, cfg, vols, training), candidates);
}

// m₂ candidates per pixel [m₂, H, W] in z, from μ (z) and E(σ₂) (y units),
// clamped to [0, 1]. Not differentiable: hypotheses are fixed inputs of the
// next scale.
template <typename T>
Tensor<T> perturb_candidates(const Tensor<T>& mu, const Tensor<T>& sigma, double eps, std::size_t m2, int m0) {
  const auto c = perturbation_offsets(eps, m2);
  const std::size_t P = mu.size();
  std::vector<T> out(m2 * P);
  for (std::size_t j = 0; j < m2; ++j)
    for (std::size_t p = 0; p < P; ++p) {
      const double y = static_cast<double>(mu[p]) * m0 + static_cast<double>(sigma[p]) * c[j];
      out[j * P + p] = static_cast<T>(std::clamp(y, 0.0, static_cast<double>(m0)) / m0);
    }
  Shape s{m2};
  for (auto d : mu.shape()) s.push_back(d);
  return Tensor<T>(std::move(s), std::move(out));
}

// Ablation baseline: m₂ equally spaced candidates over μ ± ε·mean(E(σ₂)),
// the same span at every pixel.
template <typename T>
Tensor<T> uniform_candidates(const Tensor<T>& mu, const Tensor<T>& sigma, double eps, std::size_t m2, int m0) {
  double mean_sigma = 0.0;
  for (auto v : sigma.data()) mean_sigma += static_cast<double>(v);
  mean_sigma /= static_cast<double>(sigma.size());
  const std::size_t P = mu.size();
  std::vector<T> out(m2 * P);
  for (std::size_t j = 0; j < m2; ++j) {
    const double off = eps * mean_sigma * ((2.0 * j + 1.0) / static_cast<double>(m2) - 1.0);
    for (std::size_t p = 0; p < P; ++p) {
      const double y = static_cast<double>(mu[p]) * m0 + off;
      out[j * P + p] = static_cast<T>(std::clamp(y, 0.0, static_cast<double>(m0)) / m0);
    }
  }
  Shape s{m2};
  for (auto d : mu.shape()) s.push_back(d);
  return Tensor<T>(std::move(s), std::move(out));
}

// −log p(y | ψ) for every view and pixel, [V, H, W]; μ shared ([H, W], y
// units), computed as a log-sum-exp over the two components.
template <typename T>
Tensor<T> mixture_nll(const Tensor<T>& mu_y, const MixtureMaps<T>& mix, const Tensor<T>& y, double sigma1) {
  const std::size_t V = mix.alpha.dim(0), H = mix.alpha.dim(2), W = mix.alpha.dim(3);
  const Tensor<T> dev = abs(y - mu_y) * T(kSqrt2);  // [H, W]
  const Tensor<T> loga = log_softmax(mix.alpha_logits, 1);
  const T s1 = static_cast<T>(sigma1);
  const Tensor<T> l1 = reshape(slice(loga, 1, 0, 1), Shape{V, H, W}) - (dev / s1 + T(std::log(kSqrt2 * sigma1)));
  const Tensor<T> l2 =
      reshape(slice(loga, 1, 1, 1), Shape{V, H, W}) - (dev / mix.sigma2 + log(mix.sigma2 * T(kSqrt2)));
  const Tensor<T> both = concat(std::vector<Tensor<T>>{reshape(l1, Shape{1, V, H, W}), reshape(l2, Shape{1, V, H, W})}, 0);
  return -logsumexp(both, 0);
}

}  // namespace dspm
