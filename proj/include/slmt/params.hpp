#pragma once

#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "slmt/autodiff.hpp"
#include "slmt/rng.hpp"

namespace slmt {

// Named, ordered collection of trainable leaves. Iteration order (by name) is
// the serialization and optimizer order.
template <typename T>
class ParameterSet {
 public:
  using Tensor = ad::Tensor<T>;

  Tensor& add(const std::string& name, ad::Shape shape, std::vector<T> values) {
    auto [it, inserted] = params_.emplace(name, Tensor::from_data(std::move(shape), std::move(values), true));
    if (!inserted) throw std::logic_error("parameter registered twice: " + name);
    return it->second;
  }

  // Uniform in [-bound, bound].
  Tensor& add_uniform(const std::string& name, ad::Shape shape, double bound, std::mt19937_64& rng) {
    std::vector<T> values(ad::numel(shape));
    for (auto& v : values) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
    return add(name, std::move(shape), std::move(values));
  }

  Tensor& add_constant(const std::string& name, ad::Shape shape, T value) {
    return add(name, shape, std::vector<T>(ad::numel(shape), value));
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

}  // namespace slmt
