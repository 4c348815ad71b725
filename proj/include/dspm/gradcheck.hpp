#pragma once

// Central finite-difference verification of recorded gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dspm/ops.hpp"
#include "dspm/rng.hpp"

namespace dspm {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;  // worst over inputs of max|a-n| / max(|a|_inf, |n|_inf)
  std::size_t entries_checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  std::size_t max_entries_per_input = 256;  // random subset above this
  std::uint64_t seed = 0;
};

// Compares backward() against central differences of `f` for every input.
// Inputs are leaf tensors; they are temporarily perturbed in place.
template <typename T>
GradCheckResult check_gradients(const std::string& name,
                                const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                                std::vector<Tensor<T>> inputs, const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor<T> loss = f(inputs);
    backward(loss);
  }
  GradCheckResult res;
  res.name = name;
  Rng rng(opt.seed ^ 0x5151);
  for (auto& in : inputs) {
    const std::vector<T> analytic = in.grad();
    std::vector<std::size_t> idx(in.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > opt.max_entries_per_input) {
      for (std::size_t i = 0; i < opt.max_entries_per_input; ++i)
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(opt.max_entries_per_input);
    }
    double max_diff = 0.0, scale_a = 0.0, scale_n = 0.0;
    auto values = in.mutable_data();
    for (std::size_t k : idx) {
      const T orig = values[k];
      double fp = 0.0, fm = 0.0;
      {
        NoGradGuard ng;
        values[k] = orig + static_cast<T>(opt.step);
        fp = static_cast<double>(f(inputs).item());
        values[k] = orig - static_cast<T>(opt.step);
        fm = static_cast<double>(f(inputs).item());
      }
      values[k] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = static_cast<double>(analytic[k]);
      max_diff = std::max(max_diff, std::abs(a - numeric));
      scale_a = std::max(scale_a, std::abs(a));
      scale_n = std::max(scale_n, std::abs(numeric));
    }
    for (std::size_t i = 0; i < in.size(); ++i) scale_a = std::max(scale_a, std::abs(static_cast<double>(analytic[i])));
    const double scale = std::max({scale_a, scale_n, 1e-12});
    res.max_rel_error = std::max(res.max_rel_error, max_diff / scale);
    res.entries_checked += idx.size();
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

// Scalar head for checks: sum(y * r) with fixed random weights r, so every
// output element influences the loss differently.
template <typename T>
Tensor<T> random_projection(const Tensor<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> w(y.size());
  for (auto& v : w) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return sum(y * Tensor<T>(y.shape(), std::move(w)));
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(shape, std::move(v));
}

}  // namespace dspm
