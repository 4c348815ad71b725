#pragma once

// Named parameter storage and the small layer vocabulary shared by the
// learned modules.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dspm/checkpoint.hpp"
#include "dspm/nn.hpp"
#include "dspm/rng.hpp"

namespace dspm {

template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> values) {
    if (params_.count(name) || bn_.count(name)) throw ConfigError("duplicate parameter " + name);
    order_.push_back(name);
    return params_.emplace(name, Tensor<T>(std::move(shape), std::move(values), true)).first->second;
  }

  // He-style uniform init for a layer followed by a leaky ReLU.
  Tensor<T>& add_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(shape), std::move(v));
  }

  Tensor<T>& add_constant(const std::string& name, Shape shape, T value) {
    std::vector<T> v(numel(shape), value);
    return add(name, std::move(shape), std::move(v));
  }

  BatchNormState<T>& add_bn(const std::string& name, std::size_t channels) {
    add_constant(name + ".gamma", {channels}, T(1));
    add_constant(name + ".beta", {channels}, T(0));
    bn_order_.push_back(name);
    return bn_.emplace(name, BatchNormState<T>(channels)).first->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) > 0; }

  BatchNormState<T>& bn(const std::string& name) {
    auto it = bn_.find(name);
    if (it == bn_.end()) throw ConfigError("unknown batch norm " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
  }

  // Parameters first (registration order), then running statistics.
  std::vector<NamedTensor> export_named() const {
    std::vector<NamedTensor> out;
    for (const auto& n : order_) {
      const auto& t = params_.at(n);
      out.push_back({n, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
    }
    for (const auto& n : bn_order_) {
      const auto& s = bn_.at(n);
      out.push_back({n + ".running_mean", {s.running_mean.size()},
                     std::vector<float>(s.running_mean.begin(), s.running_mean.end())});
      out.push_back({n + ".running_var", {s.running_var.size()},
                     std::vector<float>(s.running_var.begin(), s.running_var.end())});
    }
    return out;
  }

  // Every parameter and statistic must be present with a matching shape;
  // extra entries are rejected too.
  void import_named(const std::vector<NamedTensor>& entries, const std::string& source = "checkpoint") {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    auto fetch = [&](const std::string& name, const Shape& shape) -> const NamedTensor& {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError(source + ": missing tensor " + name);
      if (it->second->shape != shape)
        throw ConfigError(source + ": tensor " + name + " has shape " + to_string(it->second->shape) + ", expected " +
                          to_string(shape));
      const NamedTensor& found = *it->second;
      by_name.erase(it);
      return found;
    };
    for (const auto& n : order_) {
      auto& t = params_.at(n);
      const auto& e = fetch(n, t.shape());
      auto dst = t.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
    }
    for (const auto& n : bn_order_) {
      auto& s = bn_.at(n);
      const auto& m = fetch(n + ".running_mean", {s.running_mean.size()});
      const auto& v = fetch(n + ".running_var", {s.running_var.size()});
      for (std::size_t i = 0; i < s.running_mean.size(); ++i) {
        s.running_mean[i] = static_cast<T>(m.values[i]);
        s.running_var[i] = static_cast<T>(v.values[i]);
      }
    }
    if (!by_name.empty()) throw ConfigError(source + ": unexpected tensor " + by_name.begin()->first);
  }

 private:
  std::vector<std::string> order_;
  std::vector<std::string> bn_order_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, BatchNormState<T>> bn_;
};

// Conv (no bias) -> batch norm -> leaky ReLU.
template <typename T>
void add_cbl(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
  ps.add_weight(name + ".weight", {cout, cin, k, k}, cin * k * k, rng);
  ps.add_bn(name + ".bn", cout);
}

template <typename T>
Tensor<T> cbl(ParamSet<T>& ps, const std::string& name, const Tensor<T>& x, bool training, std::size_t stride = 1) {
  const Tensor<T>& w = ps.at(name + ".weight");
  const std::size_t k = w.dim(2);
  Tensor<T> y = conv2d(x, w, std::nullopt, stride, k / 2);
  y = batch_norm(y, ps.at(name + ".bn.gamma"), ps.at(name + ".bn.beta"), ps.bn(name + ".bn"), training);
  return leaky_relu(y, T(0.1));
}

// Plain convolution with bias.
template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
              double gain = 1.0) {
  ps.add_weight(name + ".weight", {cout, cin, k, k}, cin * k * k, rng, gain);
  ps.add_constant(name + ".bias", {cout}, T(0));
}

template <typename T>
Tensor<T> conv(ParamSet<T>& ps, const std::string& name, const Tensor<T>& x) {
  const Tensor<T>& w = ps.at(name + ".weight");
  return conv2d(x, w, ps.at(name + ".bias"), 1, w.dim(2) / 2);
}

template <typename T>
void add_conv3(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
               double gain = 1.0) {
  ps.add_weight(name + ".weight", {cout, cin, k, k, k}, cin * k * k * k, rng, gain);
  ps.add_constant(name + ".bias", {cout}, T(0));
}

template <typename T>
Tensor<T> conv3(ParamSet<T>& ps, const std::string& name, const Tensor<T>& x) {
  return conv3d(x, ps.at(name + ".weight"), ps.at(name + ".bias"));
}

}  // namespace dspm
