#pragma once

// Finite-difference cases for every differentiable primitive, each run on
// several seeded random instances (the learned heads are added in
// gradient_heads.hpp).
// Checks run on the double instantiation of the templated primitives so the
// central differences are not swamped by float rounding.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "dspm/gradcheck.hpp"
#include "dspm/nn.hpp"

namespace dspm {

struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

struct SuiteOptions {
  std::size_t instances = 5;
  std::uint64_t seed = 1;
  bool inject_broken = false;  // test hook: adds a primitive with a wrong gradient
  std::string filter;          // substring match on case names
};

struct SuiteReport {
  std::vector<GradCheckResult> results;
  double seconds = 0.0;
  bool passed() const {
    for (const auto& r : results)
      if (!r.passed) return false;
    return !results.empty();
  }
};

namespace detail {

using D = double;
using DT = Tensor<double>;
using Fn = std::function<DT(const std::vector<DT>&)>;

inline GradCheckOptions suite_check_options(std::uint64_t seed) {
  GradCheckOptions o;
  o.step = 1e-6;
  o.tolerance = 1e-3;
  o.seed = seed;
  o.max_entries_per_input = 64;
  return o;
}

inline std::size_t rnd_dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

inline Shape rnd_shape(Rng& rng, std::size_t rank, std::size_t lo = 1, std::size_t hi = 4) {
  Shape s(rank);
  for (auto& d : s) d = rnd_dim(rng, lo, hi);
  return s;
}

// Unary pointwise check on a random shape with inputs drawn from [lo, hi].
inline GradCase pointwise_case(std::string name, std::function<DT(const DT&)> op, double lo, double hi) {
  return {name, [name, op, lo, hi](std::uint64_t seed) {
            Rng rng(seed);
            const Shape s = rnd_shape(rng, 1 + rng.below(3));
            DT x = random_tensor<D>(s, rng, lo, hi);
            Fn f = [op, seed](const std::vector<DT>& in) { return random_projection(op(in[0]), seed + 7); };
            return check_gradients<D>(name, f, {x}, suite_check_options(seed));
          }};
}

inline GradCase binary_case(std::string name, std::function<DT(const DT&, const DT&)> op, double lo, double hi) {
  return {name, [name, op, lo, hi](std::uint64_t seed) {
            Rng rng(seed);
            Shape a = rnd_shape(rng, 3);
            Shape b = a;
            // broadcast along a random subset of axes
            for (auto& d : b)
              if (rng.below(3) == 0) d = 1;
            if (rng.below(2)) b.erase(b.begin());
            DT x = random_tensor<D>(a, rng, lo, hi);
            DT y = random_tensor<D>(b, rng, lo, hi);
            Fn f = [op, seed](const std::vector<DT>& in) { return random_projection(op(in[0], in[1]), seed + 7); };
            return check_gradients<D>(name, f, {x, y}, suite_check_options(seed));
          }};
}

inline GradCase axis_case(std::string name, std::function<DT(const DT&, std::size_t)> op) {
  return {name, [name, op](std::uint64_t seed) {
            Rng rng(seed);
            const Shape s = rnd_shape(rng, 3, 2, 5);
            const std::size_t axis = rng.below(3);
            DT x = random_tensor<D>(s, rng, -2.0, 2.0);
            Fn f = [op, axis, seed](const std::vector<DT>& in) { return random_projection(op(in[0], axis), seed + 7); };
            return check_gradients<D>(name, f, {x}, suite_check_options(seed));
          }};
}

}  // namespace detail

inline std::vector<GradCase> primitive_gradient_cases() {
  using namespace detail;
  std::vector<GradCase> cases;
  cases.push_back(binary_case("add", [](const DT& a, const DT& b) { return a + b; }, -1, 1));
  cases.push_back(binary_case("sub", [](const DT& a, const DT& b) { return a - b; }, -1, 1));
  cases.push_back(binary_case("mul", [](const DT& a, const DT& b) { return a * b; }, -1, 1));
  cases.push_back(binary_case("div", [](const DT& a, const DT& b) { return a / b; }, 0.5, 2.0));
  cases.push_back(pointwise_case("scalar_arith", [](const DT& x) { return (2.0 - x * 3.0 + 1.5) / 4.0; }, -1, 1));
  cases.push_back(pointwise_case("exp", [](const DT& x) { return exp(x); }, -2, 2));
  cases.push_back(pointwise_case("log", [](const DT& x) { return log(x); }, 0.2, 3));
  cases.push_back(pointwise_case("abs", [](const DT& x) { return abs(x); }, -2, 2));
  cases.push_back(pointwise_case("square", [](const DT& x) { return square(x); }, -2, 2));
  cases.push_back(pointwise_case("sqrt", [](const DT& x) { return sqrt(x); }, 0.2, 3));
  cases.push_back(pointwise_case("tanh", [](const DT& x) { return tanh(x); }, -3, 3));
  cases.push_back(pointwise_case("sigmoid", [](const DT& x) { return sigmoid(x); }, -4, 4));
  cases.push_back(pointwise_case("softplus", [](const DT& x) { return softplus(x); }, -4, 4));
  cases.push_back(pointwise_case("leaky_relu", [](const DT& x) { return leaky_relu(x, 0.1); }, -2, 2));
  cases.push_back(pointwise_case("clamp", [](const DT& x) { return clamp(x, -0.5, 0.7); }, -1, 1));
  cases.push_back(pointwise_case("sum", [](const DT& x) { return sum(x) * x; }, -1, 1));
  cases.push_back(pointwise_case("mean", [](const DT& x) { return mean(x) * x; }, -1, 1));
  cases.push_back(axis_case("sum_axis", [](const DT& x, std::size_t a) { return sum(x, a); }));
  cases.push_back(axis_case("mean_axis", [](const DT& x, std::size_t a) { return mean(x, a, true); }));
  cases.push_back(axis_case("max_axis", [](const DT& x, std::size_t a) { return max(x, a); }));
  cases.push_back(axis_case("softmax", [](const DT& x, std::size_t a) { return softmax(x, a); }));
  cases.push_back(axis_case("logsumexp", [](const DT& x, std::size_t a) { return logsumexp(x, a); }));
  cases.push_back(axis_case("log_softmax", [](const DT& x, std::size_t a) { return log_softmax(x, a); }));
  cases.push_back(axis_case("slice", [](const DT& x, std::size_t a) { return slice(x, a, 1, x.dim(a) - 1); }));
  cases.push_back(axis_case("concat", [](const DT& x, std::size_t a) { return concat<D>({x, x * 2.0, x}, a); }));
  cases.push_back(axis_case("reshape", [](const DT& x, std::size_t) { return reshape(x, {x.size()}); }));
  cases.push_back(axis_case("permute", [](const DT& x, std::size_t a) {
    return a == 0 ? permute(x, {2, 0, 1}) : (a == 1 ? permute(x, {1, 2, 0}) : permute(x, {0, 2, 1}));
  }));
  cases.push_back(axis_case("sort_axis0", [](const DT& x, std::size_t) { return sort_axis0(x); }));
  cases.push_back({"masked_mean", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const Shape s = rnd_shape(rng, 3, 2, 5);
                     DT x = random_tensor<D>(s, rng);
                     std::vector<D> m(x.size());
                     for (auto& v : m) v = rng.below(3) ? 1.0 : 0.0;
                     DT mask(s, m);
                     Fn f = [mask](const std::vector<DT>& in) { return masked_mean(square(in[0]), mask); };
                     return check_gradients<D>("masked_mean", f, {x}, suite_check_options(seed));
                   }});
  cases.push_back({"conv2d", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t B = rnd_dim(rng, 1, 2), C = rnd_dim(rng, 1, 3), O = rnd_dim(rng, 1, 4);
                     const std::size_t k = rng.below(2) ? 3 : 1, stride = rnd_dim(rng, 1, 2);
                     const std::size_t H = rnd_dim(rng, 4, 7), W = rnd_dim(rng, 4, 7);
                     DT x = random_tensor<D>({B, C, H, W}, rng);
                     DT w = random_tensor<D>({O, C, k, k}, rng);
                     DT b = random_tensor<D>({O}, rng);
                     Fn f = [k, stride, seed](const std::vector<DT>& in) {
                       return random_projection(conv2d<D>(in[0], in[1], in[2], stride, k / 2), seed + 7);
                     };
                     return check_gradients<D>("conv2d", f, {x, w, b}, suite_check_options(seed));
                   }});
  cases.push_back({"conv3d", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t C = rnd_dim(rng, 1, 3), O = rnd_dim(rng, 1, 3);
                     const std::size_t D_ = rnd_dim(rng, 2, 5), H = rnd_dim(rng, 2, 5), W = rnd_dim(rng, 2, 5);
                     const std::size_t kd = rng.below(2) ? 3 : 1;
                     DT x = random_tensor<D>({C, D_, H, W}, rng);
                     DT w = random_tensor<D>({O, C, kd, 3, 3}, rng);
                     DT b = random_tensor<D>({O}, rng);
                     Fn f = [seed](const std::vector<DT>& in) { return random_projection(conv3d<D>(in[0], in[1], in[2]), seed + 7); };
                     return check_gradients<D>("conv3d", f, {x, w, b}, suite_check_options(seed));
                   }});
  for (bool training : {true, false}) {
    const std::string name = training ? "batch_norm_train" : "batch_norm_eval";
    cases.push_back({name, [name, training](std::uint64_t seed) {
                       Rng rng(seed);
                       const std::size_t B = rnd_dim(rng, 1, 3), C = rnd_dim(rng, 1, 4);
                       DT x = random_tensor<D>({B, C, rnd_dim(rng, 2, 4), rnd_dim(rng, 2, 4)}, rng, -2, 2);
                       DT g = random_tensor<D>({C}, rng, 0.5, 1.5);
                       DT b = random_tensor<D>({C}, rng);
                       auto state = std::make_shared<BatchNormState<D>>(C);
                       for (std::size_t c = 0; c < C; ++c) {
                         state->running_mean[c] = rng.uniform(-0.5, 0.5);
                         state->running_var[c] = rng.uniform(0.5, 2.0);
                       }
                       Fn f = [state, training, seed](const std::vector<DT>& in) {
                         return random_projection(batch_norm<D>(in[0], in[1], in[2], *state, training), seed + 7);
                       };
                       return check_gradients<D>(name, f, {x, g, b}, suite_check_options(seed));
                     }});
  }
  cases.push_back(axis_case("upsample_nearest2x", [](const DT& x, std::size_t) { return upsample_nearest2x(x); }));
  cases.push_back(axis_case("upsample_bilinear2x", [](const DT& x, std::size_t) { return upsample_bilinear2x(x); }));
  cases.push_back({"bilinear_sample", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t C = rnd_dim(rng, 1, 3), H = rnd_dim(rng, 3, 6), W = rnd_dim(rng, 3, 6);
                     DT map = random_tensor<D>({C, H, W}, rng);
                     const std::size_t P = rnd_dim(rng, 2, 6);
                     std::vector<D> c(2 * P * 2);
                     // stay off the lattice (kinks) and mostly inside the image
                     for (std::size_t i = 0; i < 2 * P; ++i) {
                       c[i] = std::floor(rng.uniform(-1.0, static_cast<double>(W))) + rng.uniform(0.1, 0.9);
                       c[2 * P + i] = std::floor(rng.uniform(-1.0, static_cast<double>(H))) + rng.uniform(0.1, 0.9);
                     }
                     DT coords({2, 2, P}, c);
                     Fn f = [seed](const std::vector<DT>& in) { return random_projection(bilinear_sample(in[0], in[1]), seed + 7); };
                     return check_gradients<D>("bilinear_sample", f, {map, coords}, suite_check_options(seed));
                   }});
  cases.push_back({"local_correlation", [](std::uint64_t seed) {
                     Rng rng(seed);
                     DT x = random_tensor<D>({rnd_dim(rng, 1, 4), rnd_dim(rng, 2, 6), rnd_dim(rng, 2, 6)}, rng);
                     const std::size_t R = rnd_dim(rng, 1, 2);
                     Fn f = [R, seed](const std::vector<DT>& in) { return random_projection(local_correlation(in[0], R), seed + 7); };
                     return check_gradients<D>("local_correlation", f, {x}, suite_check_options(seed));
                   }});
  cases.push_back({"composite_conv_bn_softmax", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t C = rnd_dim(rng, 1, 3), O = rnd_dim(rng, 2, 4);
                     DT x = random_tensor<D>({2, C, rnd_dim(rng, 3, 5), rnd_dim(rng, 3, 5)}, rng);
                     DT w = random_tensor<D>({O, C, 3, 3}, rng);
                     DT g = random_tensor<D>({O}, rng, 0.5, 1.5);
                     DT b = random_tensor<D>({O}, rng);
                     auto state = std::make_shared<BatchNormState<D>>(O);
                     Fn f = [state, seed](const std::vector<DT>& in) {
                       auto y = batch_norm<D>(conv2d<D>(in[0], in[1], std::nullopt, 1, 1), in[2], in[3], *state, true);
                       return random_projection(sum(softmax(leaky_relu(y, 0.1), 1), 0), seed + 7);
                     };
                     return check_gradients<D>("composite_conv_bn_softmax", f, {x, w, g, b}, suite_check_options(seed));
                   }});
  return cases;
}

// A primitive whose backward is deliberately off by 10%; used to prove the
// suite fails when a gradient is wrong.
inline GradCase broken_gradient_case() {
  return {"broken_scale_hook", [](std::uint64_t seed) {
            Rng rng(seed);
            detail::DT x = random_tensor<double>({3, 4}, rng);
            detail::Fn f = [](const std::vector<detail::DT>& in) {
              const auto& a = in[0];
              std::vector<double> v(a.data().begin(), a.data().end());
              for (auto& e : v) e *= 2.0;
              auto y = detail::make_result<double>("broken_scale", a.shape(), std::move(v), {a}, [](Node<double>& self) {
                auto* g = detail::sink(self, 0);
                if (!g) return;
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.2 * self.grad[i];
              });
              return random_projection(y, 11);
            };
            return check_gradients<double>("broken_scale_hook", f, {x}, detail::suite_check_options(seed));
          }};
}

inline SuiteReport run_gradient_suite(const SuiteOptions& opt, const std::vector<GradCase>& cases) {
  SuiteReport report;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GradCase> all = cases;
  if (opt.inject_broken) all.push_back(broken_gradient_case());
  for (const auto& c : all) {
    if (!opt.filter.empty() && c.name.find(opt.filter) == std::string::npos) continue;
    GradCheckResult worst;
    worst.name = c.name;
    worst.passed = true;
    for (std::size_t i = 0; i < opt.instances; ++i) {
      auto r = c.run(Rng::mix(opt.seed, i));
      worst.entries_checked += r.entries_checked;
      worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
      worst.passed = worst.passed && r.passed;
    }
    report.results.push_back(worst);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace dspm
