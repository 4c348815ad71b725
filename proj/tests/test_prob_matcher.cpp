#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dspm/gradcheck.hpp"
#include "dspm/prob_matcher.hpp"
#include "dspm/synthscene.hpp"

using namespace dspm;

namespace {

double simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
               double whole, double tol, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol) return left + right + (left + right - whole) / 15.0;
  return simpson(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), 1e-12, 50);
}

// Laplace CDF written from the density exp(−√2|y−μ|/σ)/(√2σ).
double oracle_cdf(double y, double mu, double sigma) {
  const double k = kSqrt2 / sigma;
  return y < mu ? 0.5 * std::exp(k * (y - mu)) : 1.0 - 0.5 * std::exp(-k * (y - mu));
}

// Fraction of mixture samples within R of μ.
double monte_carlo_mass(const Mixture& m, double r, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> pick(0.0, 1.0);
  std::exponential_distribution<double> e1(kSqrt2 / m.sigma1), e2(kSqrt2 / m.sigma2);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = pick(gen) < m.alpha1 ? e1(gen) : e2(gen);
    if (dev < r) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(n);
}

// Patch embedding whose inner product peaks when two 5×5 luminance patches
// agree: for each neighbour, (cos kI, sin kI) pairs at two frequencies.
Array patch_features(const Array& image) {
  const std::size_t H = image.dim(1), W = image.dim(2), P = H * W;
  std::vector<float> lum(P);
  for (std::size_t p = 0; p < P; ++p) lum[p] = (image[p] + image[P + p] + image[2 * P + p]) / 3.0f;
  const float freqs[2] = {6.0f, 12.0f};
  std::vector<float> v(100 * P);
  std::size_t c = 0;
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx)
      for (float k : freqs) {
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const long yy = std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(H) - 1);
            const long xx = std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(W) - 1);
            const float l = lum[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
            v[c * P + y * W + x] = std::cos(k * l);
            v[(c + 1) * P + y * W + x] = std::sin(k * l);
          }
        c += 2;
      }
  return Array({100, H, W}, std::move(v));
}

Array uniform_candidates_grid(std::size_t m, std::size_t H, std::size_t W) {
  std::vector<float> v(m * H * W);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < H * W; ++p) v[j * H * W + p] = (static_cast<float>(j) + 0.5f) / static_cast<float>(m);
  return Array({m, H, W}, std::move(v));
}

struct PlanePair {
  GeneratedScene scene;
  DepthDomain dom;
  Array ref, src;
  double z_true = 0.0;
};

PlanePair rectified_plane(double depth) {
  SceneSpec spec;
  spec.baseline = 0.5;
  spec.seed = 21;
  spec.views = 2;
  spec.converging = false;
  PlanePair p;
  p.scene = single_plane_scene(spec, depth);
  p.dom = DepthDomain::of(p.scene.cameras[0], 16);
  p.ref = patch_features(p.scene.data.views[0].image);
  p.src = patch_features(p.scene.data.views[1].image);
  p.z_true = p.dom.normalize(depth);
  return p;
}

}  // namespace

TEST(Mixture, DensityAtTheMean) {
  const Mixture m{0.0, 0.5, 0.5, 1.0, 2.0};
  EXPECT_NEAR(mixture_pdf(0.0, m), 0.530330, 1e-6);
  EXPECT_NEAR(mixture_pdf(0.0, m), 0.5 / std::sqrt(2.0) + 0.25 / std::sqrt(2.0), 1e-15);
}

TEST(Mixture, NormalizesToOneUnderQuadrature) {
  for (const Mixture& m : {Mixture{0.0, 0.5, 0.5, 1.0, 2.0}, Mixture{3.0, 0.9, 0.1, 1.0, 7.5},
                           Mixture{-1.0, 0.2, 0.8, 1.0, 1.001}}) {
    auto f = [&](double y) { return mixture_pdf(y, m); };
    const double half = 40.0 * m.sigma2;
    const double total = integrate(f, m.mu - half, m.mu) + integrate(f, m.mu, m.mu + half);
    EXPECT_NEAR(total, 1.0, 1e-6);
    for (double y = m.mu - half; y <= m.mu + half; y += 0.37) ASSERT_GE(f(y), 0.0);
    EXPECT_NEAR(mixture_cdf(m.mu + half, m) - mixture_cdf(m.mu - half, m), 1.0, 1e-12);
  }
}

TEST(Mixture, InverseCdfMedianAndDomainErrors) {
  EXPECT_DOUBLE_EQ(laplace_inv_cdf(0.5, 1.25, 3.0), 1.25);
  for (double q : {0.01, 0.2, 0.7, 0.999}) EXPECT_NEAR(oracle_cdf(laplace_inv_cdf(q, 0.3, 1.7), 0.3, 1.7), q, 1e-12);
  EXPECT_THROW(laplace_inv_cdf(0.0, 0.0, 1.0), DomainError);
  EXPECT_THROW(laplace_inv_cdf(1.0, 0.0, 1.0), DomainError);
  EXPECT_THROW(laplace_inv_cdf(0.5, 0.0, 0.0), DomainError);
}

TEST(Uncertainty, ClosedFormAndMonteCarlo) {
  const Mixture single{0.0, 1.0, 0.0, 1.0, 2.0};
  EXPECT_NEAR(uncertainty(single, 1.0), 1.0 - std::exp(-std::sqrt(2.0)), 1e-15);
  EXPECT_NEAR(uncertainty(single, 1.0), 0.756883, 1e-6);
  EXPECT_NEAR(monte_carlo_mass(single, 1.0, 1000000, 7), uncertainty(single, 1.0), 1.5e-3);
  const Mixture mix{0.0, 0.3, 0.7, 1.0, 3.5};
  EXPECT_NEAR(monte_carlo_mass(mix, 1.0, 1000000, 8), uncertainty(mix, 1.0), 1.5e-3);
}

TEST(Uncertainty, LimitsAndMonotonicity) {
  const Mixture m{0.0, 0.4, 0.6, 1.0, 2.0};
  EXPECT_NEAR(uncertainty(m, 1e3), 1.0, 1e-12);
  EXPECT_NEAR(uncertainty(m, 0.0), 0.0, 1e-15);
  EXPECT_LT(uncertainty(Mixture{0.0, 0.0, 1.0, 1.0, 1e12}, 1.0), 1e-11);
  double prev = 0.0;
  for (double r = 0.1; r < 5.0; r += 0.1) {
    const double u = uncertainty(m, r);
    EXPECT_GT(u, prev);
    EXPECT_LT(u, 1.0);
    prev = u;
  }
  prev = 1.0;
  for (double s = 1.01; s < 16.0; s += 0.5) {
    const double u = uncertainty(Mixture{0.0, 0.4, 0.6, 1.0, s}, 1.0);
    EXPECT_LT(u, prev);
    prev = u;
  }
  EXPECT_NEAR(uncertainty(Mixture{0.0, 1.0, 0.0, 1.0, 2.0}, 1.0, true), std::pow(1.0 - std::exp(-kSqrt2), 2), 1e-12);
}

TEST(ExpectedSigma, WeightedMeanExamples) {
  EXPECT_NEAR(expected_sigma({0.6, 0.2}, {2.0, 4.0}), 2.5, 1e-5);
  EXPECT_NEAR(expected_sigma({0.3}, {5.0}), 5.0, 1e-4);
  EXPECT_NEAR(expected_sigma({0.1, 0.5, 0.9}, {3.0, 3.0, 3.0}), 3.0, 1e-4);
  EXPECT_THROW(expected_sigma({0.1}, {1.0, 2.0}), DimensionError);
}

TEST(Perturb, WorkedTwoCandidateCase) {
  const auto edges = perturbation_edges(2.0, 2);
  EXPECT_NEAR(edges[0], -2.0, 1e-12);
  EXPECT_NEAR(edges[1], 0.0, 1e-12);
  EXPECT_NEAR(edges[2], 2.0, 1e-12);
  const auto c = perturb(0.0, 1.0, 2.0, 2, -100.0, 100.0);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_NEAR(c[0], -1.0, 1e-12);
  EXPECT_NEAR(c[1], 1.0, 1e-12);
  EXPECT_NEAR(1.0 - std::exp(-2.0 * kSqrt2), 0.940894, 1e-6);
  EXPECT_NEAR(0.5 * std::exp(-2.0 * kSqrt2), 0.02956, 1e-5);
}

TEST(Perturb, EveryBinCarriesEqualMass) {
  for (double eps : {0.5, 1.0, 2.0, 3.0})
    for (std::size_t m2 : {1u, 2u, 3u, 8u, 16u}) {
      const double mass = 1.0 - std::exp(-kSqrt2 * eps);
      const auto e = perturbation_edges(eps, m2);
      EXPECT_NEAR(e.front(), -eps, 1e-9);
      EXPECT_NEAR(e.back(), eps, 1e-9);
      for (std::size_t j = 0; j < m2; ++j)
        EXPECT_NEAR(oracle_cdf(e[j + 1], 0.0, 1.0) - oracle_cdf(e[j], 0.0, 1.0), mass / m2, 1e-9);
    }
}

TEST(Perturb, SymmetricWideningAndSigmaMonotone) {
  EXPECT_NEAR(perturb(4.0, 2.0, 1.5, 1, 0.0, 16.0)[0], 4.0, 1e-12);
  const auto c = perturb(8.0, 1.5, 2.0, 8, 0.0, 16.0);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_NEAR(c[j] - 8.0, 8.0 - c[7 - j], 1e-12);
    EXPECT_GT(c[j], 8.0 - 2.0 * 1.5);
    EXPECT_LT(c[j], 8.0 + 2.0 * 1.5);
    if (j > 0) EXPECT_GT(c[j], c[j - 1]);
  }
  for (std::size_t j = 4; j + 1 < 8; ++j) EXPECT_GE(c[j + 1] - c[j], c[j] - c[j - 1] - 1e-12);
  const auto wide = perturb(8.0, 3.0, 2.0, 8, 0.0, 16.0);
  EXPECT_GT(wide.back() - wide.front(), c.back() - c.front());
  const auto clamped = perturb(0.5, 4.0, 2.0, 4, 0.0, 16.0);
  EXPECT_DOUBLE_EQ(clamped.front(), 0.0);
}

TEST(Perturb, TensorVersionMatchesScalar) {
  const Array mu({1, 3}, {0.1f, 0.5f, 0.98f});
  const Array sig({1, 3}, {1.0f, 2.5f, 4.0f});
  const Array c = perturb_candidates(mu, sig, 2.0, 4, 16);
  ASSERT_EQ(c.shape(), (Shape{4, 1, 3}));
  for (std::size_t p = 0; p < 3; ++p) {
    const auto ref = perturb(mu[p] * 16.0, sig[p], 2.0, 4, 0.0, 16.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(c[j * 3 + p], ref[j] / 16.0, 1e-6);
  }
  const Array u = uniform_candidates(mu, sig, 2.0, 4, 16);
  const double mean_sigma = (1.0 + 2.5 + 4.0) / 3.0;
  EXPECT_NEAR((u[3 + 1] - u[1]) * 16.0, 2.0 * mean_sigma * 0.5, 1e-5);
}

TEST(GroupCorrelation, ShapesErrorsAndGradients) {
  Rng rng(1);
  const auto ref = random_tensor<double>({8, 3, 4}, rng);
  const auto warped = random_tensor<double>({8, 5, 3, 4}, rng);
  const auto s = group_correlation(ref, warped, 4);
  ASSERT_EQ(s.shape(), (Shape{4, 5, 3, 4}));
  double expect = 0.0;
  for (std::size_t c = 2; c < 4; ++c) expect += ref[c * 12 + 7] * warped[(c * 5 + 3) * 12 + 7];
  EXPECT_NEAR(s[(1 * 5 + 3) * 12 + 7], expect * 4.0 / 8.0, 1e-12);
  EXPECT_THROW(group_correlation(ref, warped, 3), ConfigError);
  GradCheckOptions opt;
  opt.step = 1e-6;
  const auto proj = random_tensor<double>({4, 5, 3, 4}, rng);
  const auto res = check_gradients<double>(
      "group_correlation", [&](const std::vector<Tensor<double>>& in) { return sum(group_correlation(in[0], in[1], 4) * proj); },
      {ref, warped}, opt);
  EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(CostVolume, IdenticalViewGivesSelfCorrelation) {
  SceneSpec spec;
  spec.views = 2;
  const auto g = single_plane_scene(spec, 3.0);
  const Camera& cam = g.cameras[0];
  const auto dom = DepthDomain::of(cam, 16);
  Rng rng(2);
  const Array feat = random_tensor<float>({8, 64, 80}, rng);
  const Array cand = uniform_candidates_grid(4, 64, 80);
  const auto vols = build_cost_volumes(feat, {feat}, cam, {cam}, dom, cand, 2);
  ASSERT_EQ(vols.size(), 1u);
  const std::size_t P = 64 * 80;
  for (std::size_t g2 = 0; g2 < 2; ++g2)
    for (std::size_t p = 0; p < P; p += 97) {
      double self = 0.0;
      for (std::size_t c = 4 * g2; c < 4 * g2 + 4; ++c) self += feat[c * P + p] * feat[c * P + p];
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(vols[0][(g2 * 4 + j) * P + p], self * 2.0 / 8.0, 1e-5);
    }
  const auto zero = build_cost_volumes(feat, {Array::zeros({8, 64, 80})}, cam, {g.cameras[1]}, dom, cand, 2);
  for (float v : zero[0].data()) ASSERT_EQ(v, 0.0f);
}

TEST(CostVolume, RectifiedPlaneArgmaxIsTheNearestCandidate) {
  const auto pp = rectified_plane(3.0);
  const std::size_t m = 16, H = 64, W = 80, P = H * W;
  const Array cand = uniform_candidates_grid(m, H, W);
  const auto& cams = pp.scene.cameras;
  const auto vols = build_cost_volumes(pp.ref, {pp.src}, cams[0], {cams[1]}, pp.dom, cand, 4);
  const std::size_t want = static_cast<std::size_t>(std::floor(pp.z_true * m));
  std::size_t good = 0, total = 0;
  for (std::size_t y = 4; y < H - 4; ++y)
    for (std::size_t x = 20; x < W - 20; ++x) {
      std::size_t best = 0;
      double best_score = -1e30;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t g = 0; g < 4; ++g) s += vols[0][(g * m + j) * P + y * W + x];
        if (s > best_score) {
          best_score = s;
          best = j;
        }
      }
      good += best == want;
      ++total;
    }
  EXPECT_GT(static_cast<double>(good) / total, 0.95) << good << " of " << total;
}

TEST(Regression, UniformAndDominantScores) {
  Rng rng(3);
  const Array cand = random_tensor<float>({5, 2, 3}, rng, 0.0, 1.0);
  const Array mean_mu = weighted_depth(softmax(Array::zeros({5, 2, 3}), 0), cand);
  for (std::size_t p = 0; p < 6; ++p) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mean += cand[j * 6 + p];
    EXPECT_NEAR(mean_mu[p], mean / 5.0, 1e-6);
  }
  std::vector<float> sc(30, 0.0f);
  for (std::size_t p = 0; p < 6; ++p) sc[(p % 5) * 6 + p] = 20.0f;
  const Array dom_mu = weighted_depth(softmax(Array({5, 2, 3}, sc), 0), cand);
  for (std::size_t p = 0; p < 6; ++p) EXPECT_NEAR(dom_mu[p], cand[(p % 5) * 6 + p], 1e-6);
  const Array rnd = weighted_depth(softmax(random_tensor<float>({5, 2, 3}, rng, -30, 30), 0), cand);
  for (std::size_t p = 0; p < 6; ++p) {
    float lo = 1, hi = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      lo = std::min(lo, cand[j * 6 + p]);
      hi = std::max(hi, cand[j * 6 + p]);
    }
    EXPECT_GE(rnd[p], lo - 1e-6f);
    EXPECT_LE(rnd[p], hi + 1e-6f);
  }
}

TEST(Regression, IdentityLikeRegularizerRecoversThePlane) {
  const auto pp = rectified_plane(3.0);
  const std::size_t m = 16, H = 64, W = 80;
  const Array cand = uniform_candidates_grid(m, H, W);
  MatcherConfig cfg;
  cfg.groups = 4;
  Rng rng(4);
  ParamSet<float> ps;
  add_matcher_params(ps, cfg, rng);
  for (const char* n : {"matcher.reg1.weight", "matcher.reg2.weight", "matcher.reg3.weight"})
    for (auto& v : ps.at(n).mutable_data()) v = 0.0f;
  // Centre taps: sum the groups into channel 0 and pass it through with a
  // sharpening gain.
  auto w1 = ps.at("matcher.reg1.weight").mutable_data();
  for (std::size_t g = 0; g < 4; ++g) w1[g * 27 + 13] = 1.0f;
  ps.at("matcher.reg2.weight").mutable_data()[13] = 50.0f;
  ps.at("matcher.reg3.weight").mutable_data()[13] = 50.0f;
  const auto& cams = pp.scene.cameras;
  const auto vols = build_cost_volumes(pp.ref, {pp.src}, cams[0], {cams[1]}, pp.dom, cand, 4);
  MixtureMaps<float> mix;
  mix.u = Array::full({1, H, W}, 0.7f);
  mix.sigma2 = Array::full({1, H, W}, 2.0f);
  const auto r = regress_depth(ps, cfg, vols, mix, cand);
  std::size_t good = 0, total = 0;
  for (std::size_t y = 4; y < H - 4; ++y)
    for (std::size_t x = 20; x < W - 20; ++x) {
      good += std::abs(r.mu[y * W + x] - pp.z_true) < 1.0 / m;
      ++total;
    }
  EXPECT_GT(static_cast<double>(good) / total, 0.9) << good << " of " << total;
  EXPECT_NEAR(r.expected_sigma[0], 2.0f, 1e-4);
}

TEST(MixtureHead, EqualLogitsAndSigmaFloor) {
  MatcherConfig cfg;
  const Array raw = Array::zeros({2, 3, 2, 2});
  const auto mix = mixture_from_raw(cfg, raw);
  for (float a : mix.alpha.data()) EXPECT_FLOAT_EQ(a, 0.5f);
  for (float s : mix.sigma2.data()) EXPECT_NEAR(s, 1.0 + 1e-3 + std::log(2.0), 1e-6);
  std::vector<float> v(12, 0.0f);
  for (std::size_t p = 0; p < 4; ++p) {
    v[p] = -200.0f;      // σ₂ at its floor
    v[4 + p] = 3.0f;     // α logits
    v[8 + p] = -1.0f;
  }
  const auto low = mixture_from_raw(cfg, Array({1, 3, 2, 2}, v));
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_GT(low.sigma2[p], 1.0f);
    EXPECT_NEAR(low.sigma2[p], 1.001f, 1e-6);
    EXPECT_NEAR(low.alpha[p] + low.alpha[4 + p], 1.0f, 1e-6);
    EXPECT_GT(low.u[p], 0.0f);
    EXPECT_LT(low.u[p], 1.0f);
  }
  v[0] = 500.0f;
  const auto high = mixture_from_raw(cfg, Array({1, 3, 2, 2}, v));
  EXPECT_FLOAT_EQ(high.sigma2[0], 16.0f);
}

TEST(MixtureHead, NllAtTheTruthWithASingleComponent) {
  MatcherConfig cfg;
  std::vector<double> v(3, 0.0);
  v[1] = 50.0;
  v[2] = -50.0;
  const auto mix = mixture_from_raw(cfg, Tensor<double>({1, 3, 1, 1}, v));
  const Tensor<double> mu({1, 1}, {4.0});
  const auto nll = mixture_nll(mu, mix, mu, cfg.sigma1);
  EXPECT_NEAR(nll[0], -std::log(1.0 / std::sqrt(2.0)), 1e-9);
  EXPECT_NEAR(nll[0], 0.346574, 1e-6);
}

TEST(MixtureHead, BranchGradientsThroughTheNllMatchFiniteDifferences) {
  MatcherConfig cfg;
  cfg.groups = 2;
  cfg.branch_width = 4;
  Rng rng(5);
  ParamSet<double> ps;
  add_matcher_params(ps, cfg, rng);
  std::vector<Tensor<double>> vols{random_tensor<double>({2, 4, 3, 3}, rng), random_tensor<double>({2, 4, 3, 3}, rng)};
  const auto mu = random_tensor<double>({3, 3}, rng, 4.0, 8.0);
  const auto y = random_tensor<double>({3, 3}, rng, 4.0, 8.0);
  GradCheckOptions opt;
  opt.step = 1e-6;
  opt.max_entries_per_input = 32;
  for (const std::string name : {"matcher.cand.weight", "matcher.branch1.weight", "matcher.branch2.bn.gamma",
                                 "matcher.head.weight", "matcher.head.bias"}) {
    const auto res = check_gradients<double>(
        name,
        [&](const std::vector<Tensor<double>>& in) {
          ps.at(name) = in[0];
          return mean(mixture_nll(mu, infer_mixture(ps, cfg, vols, true), y, cfg.sigma1));
        },
        {ps.at(name).detach()}, opt);
    EXPECT_TRUE(res.passed) << name << " rel err " << res.max_rel_error;
  }
}

TEST(Regression, GradientsThroughTheRegularizerMatchFiniteDifferences) {
  MatcherConfig cfg;
  cfg.groups = 2;
  cfg.branch_width = 4;
  Rng rng(6);
  ParamSet<double> ps;
  add_matcher_params(ps, cfg, rng);
  std::vector<Tensor<double>> vols{random_tensor<double>({2, 4, 3, 3}, rng), random_tensor<double>({2, 4, 3, 3}, rng)};
  const auto cand = random_tensor<double>({4, 3, 3}, rng, 0.0, 1.0);
  const auto proj = random_tensor<double>({3, 3}, rng);
  GradCheckOptions opt;
  opt.step = 1e-6;
  opt.max_entries_per_input = 32;
  for (const std::string name : {"matcher.reg1.weight", "matcher.reg3.bias", "matcher.head.weight"}) {
    const auto res = check_gradients<double>(
        name,
        [&](const std::vector<Tensor<double>>& in) {
          ps.at(name) = in[0];
          const auto r = regress_depth(ps, cfg, vols, infer_mixture(ps, cfg, vols, true), cand);
          return sum(r.mu * proj);
        },
        {ps.at(name).detach()}, opt);
    EXPECT_TRUE(res.passed) << name << " rel err " << res.max_rel_error;
  }
}
