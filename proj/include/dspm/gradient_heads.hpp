#pragma once

// Finite-difference cases for the learned heads (plane-flow decoder,
// mixture branch, regularized regression) and the matcher-side fused ops.
// Every parameter of a head is checked in the same case.

#include <string>
#include <vector>

#include "dspm/gradient_suite.hpp"
#include "dspm/plane_indicator.hpp"
#include "dspm/prob_matcher.hpp"

namespace dspm {

namespace detail {

// Inputs = every parameter of ps in registration order, then `extra`.
inline GradCheckResult check_head(const std::string& name, ParamSet<D>& ps, std::vector<DT> extra,
                                  const std::function<DT(const std::vector<DT>&)>& loss, std::uint64_t seed) {
  const std::vector<std::string> names = ps.names();
  std::vector<DT> inputs;
  for (const auto& n : names) inputs.push_back(ps.at(n).detach());
  const std::size_t k = inputs.size();
  for (auto& e : extra) inputs.push_back(e);
  Fn f = [&ps, names, k, loss](const std::vector<DT>& in) {
    for (std::size_t i = 0; i < k; ++i) ps.at(names[i]) = in[i];
    return loss(std::vector<DT>(in.begin() + static_cast<long>(k), in.end()));
  };
  return check_gradients<D>(name, f, inputs, suite_check_options(seed));
}

}  // namespace detail

inline std::vector<GradCase> head_gradient_cases() {
  using namespace detail;
  std::vector<GradCase> cases;
  cases.push_back({"plane_flow_decoder", [](std::uint64_t seed) {
                     Rng rng(seed);
                     PlaneConfig cfg;
                     cfg.radius = 1;
                     cfg.offsets = rnd_dim(rng, 1, 3);
                     cfg.used = cfg.offsets;
                     cfg.width = rnd_dim(rng, 2, 4);
                     const std::size_t H = rnd_dim(rng, 2, 4), W = rnd_dim(rng, 2, 4);
                     ParamSet<D> ps;
                     add_plane_params(ps, cfg, rng);
                     std::vector<DT> corr;
                     for (std::size_t l = 0; l < 2; ++l) corr.push_back(random_tensor<D>({cfg.entries(), H << l, W << l}, rng));
                     return check_head("plane_flow_decoder", ps, corr,
                                       [&ps, cfg, seed](const std::vector<DT>& c) {
                                         const auto f = decode_plane_flow(ps, cfg, c, true);
                                         return random_projection(f[0], seed + 7) + random_projection(f[1], seed + 8);
                                       },
                                       seed);
                   }});
  cases.push_back({"mixture_branch", [](std::uint64_t seed) {
                     Rng rng(seed);
                     MatcherConfig cfg;
                     cfg.groups = 2;
                     cfg.branch_width = 4;
                     cfg.reg_width = 2;
                     cfg.reg_init_gain = 0.0;  // zeroed init weights sit exactly on the leaky-ReLU kink
                     const std::size_t m = rnd_dim(rng, 2, 4), H = rnd_dim(rng, 2, 4), W = rnd_dim(rng, 2, 4);
                     ParamSet<D> ps;
                     add_matcher_params(ps, cfg, rng);
                     std::vector<DT> vols{random_tensor<D>({2, m, H, W}, rng), random_tensor<D>({2, m, H, W}, rng)};
                     const DT mu = random_tensor<D>({H, W}, rng, 4.0, 8.0);
                     const DT y = random_tensor<D>({H, W}, rng, 4.0, 8.0);
                     return check_head("mixture_branch", ps, vols,
                                       [&ps, cfg, mu, y](const std::vector<DT>& v) {
                                         return mean(mixture_nll(mu, infer_mixture(ps, cfg, v, true), y, cfg.sigma1));
                                       },
                                       seed);
                   }});
  cases.push_back({"regularized_regression", [](std::uint64_t seed) {
                     Rng rng(seed);
                     MatcherConfig cfg;
                     cfg.groups = 2;
                     cfg.branch_width = 4;
                     cfg.reg_width = 2;
                     cfg.reg_init_gain = 0.0;  // zeroed init weights sit exactly on the leaky-ReLU kink
                     const std::size_t m = rnd_dim(rng, 2, 4), H = rnd_dim(rng, 2, 3), W = rnd_dim(rng, 2, 3);
                     ParamSet<D> ps;
                     add_matcher_params(ps, cfg, rng);
                     std::vector<DT> vols{random_tensor<D>({2, m, H, W}, rng), random_tensor<D>({2, m, H, W}, rng)};
                     const DT cand = random_tensor<D>({m, H, W}, rng, 0.0, 1.0);
                     return check_head("regularized_regression", ps, vols,
                                       [&ps, cfg, cand, seed](const std::vector<DT>& v) {
                                         const auto r = regress_depth(ps, cfg, v, infer_mixture(ps, cfg, v, true), cand);
                                         return random_projection(r.mu, seed + 7) +
                                                random_projection(r.expected_sigma, seed + 8);
                                       },
                                       seed);
                   }});
  cases.push_back({"group_correlation", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t G = rnd_dim(rng, 1, 3), h = G * rnd_dim(rng, 1, 3), m = rnd_dim(rng, 1, 4);
                     const std::size_t H = rnd_dim(rng, 1, 4), W = rnd_dim(rng, 1, 4);
                     DT ref = random_tensor<D>({h, H, W}, rng);
                     DT warped = random_tensor<D>({h, m, H, W}, rng);
                     Fn f = [G, seed](const std::vector<DT>& in) {
                       return random_projection(group_correlation(in[0], in[1], G), seed + 7);
                     };
                     return check_gradients<D>("group_correlation", f, {ref, warped}, suite_check_options(seed));
                   }});
  cases.push_back({"normalize_features", [](std::uint64_t seed) {
                     Rng rng(seed);
                     DT x = random_tensor<D>({rnd_dim(rng, 1, 6), rnd_dim(rng, 1, 4), rnd_dim(rng, 1, 4)}, rng);
                     Fn f = [seed](const std::vector<DT>& in) { return random_projection(normalize_features(in[0]), seed + 7); };
                     return check_gradients<D>("normalize_features", f, {x}, suite_check_options(seed));
                   }});
  cases.push_back(pointwise_case("rdiv_scalar", [](const DT& x) { return 1.5 / x; }, 0.5, 2.0));
  return cases;
}

// Primitives plus heads: the full suite the CLI and acceptance run.
inline std::vector<GradCase> all_gradient_cases() {
  auto cases = primitive_gradient_cases();
  for (auto& c : head_gradient_cases()) cases.push_back(std::move(c));
  return cases;
}

}  // namespace dspm
