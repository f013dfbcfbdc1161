#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "strek/tensor.hpp"

namespace strek {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Owns the trainable tensors of a network. Names are unique.
template <class T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    if (!names_.insert(name).second) throw std::invalid_argument("parameter registered twice: " + name);
    params_.push_back({name, Tensor<T>::leaf(std::move(shape), std::move(values))});
    return params_.back().tensor;
  }

  /// Registers a parameter drawn from N(0, stddev^2).
  template <class Rng>
  Tensor<T> add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return add(name, std::move(shape), std::move(v));
  }

  std::vector<Parameter<T>>& items() { return params_; }
  const std::vector<Parameter<T>>& items() const { return params_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  /// Copies values from another set with identical names and shapes.
  void copy_values_from(const ParameterSet& other) {
    if (other.params_.size() != params_.size()) throw std::invalid_argument("parameter sets differ in size");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != other.params_[i].name || params_[i].tensor.shape() != other.params_[i].tensor.shape())
        throw std::invalid_argument("parameter mismatch at " + params_[i].name);
      params_[i].tensor.values() = other.params_[i].tensor.values();
    }
  }

  bool all_finite() const {
    for (const auto& p : params_)
      for (T v : p.tensor.values())
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_set<std::string> names_;
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. State is keyed by parameter position in the
/// set passed to step(), so the same set must be used on every call.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  const AdamOptions& options() const { return opts_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  /// Restores optimizer state saved from an identical parameter set.
  void restore(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != v.size()) throw std::invalid_argument("adam restore: moment lists differ");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  void step(ParameterSet<T>& params) {
    auto& items = params.items();
    for (const auto& p : items)
      if (!p.tensor.has_grad()) throw std::logic_error("adam_step: parameter '" + p.name + "' has no gradient");
    if (m_.empty()) {
      for (const auto& p : items) {
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
      }
    }
    if (m_.size() != items.size()) throw std::logic_error("adam_step: parameter set changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& tensor = items[i].tensor;
      auto values = tensor.data();
      auto grad = tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double g = grad[j];
        m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
        v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
        const double mhat = m[j] / bc1, vhat = v[j] / bc2;
        values[j] = static_cast<T>(values[j] - opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
  }

 private:
  AdamOptions opts_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace strek
