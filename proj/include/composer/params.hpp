#pragma once

#include <map>
#include <string>
#include <vector>

#include "composer/errors.hpp"
#include "composer/rng.hpp"
#include "composer/tensor.hpp"

namespace composer {

// Named parameter map with deterministic (lexicographic) iteration order.
template <typename T>
struct ParamMapT {
  std::map<std::string, TensorT<T>> tensors;

  bool contains(const std::string& name) const {
    return tensors.count(name) != 0;
  }

  TensorT<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw ContractError("params: unknown parameter " + name);
    return it->second;
  }

  const TensorT<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw ContractError("params: unknown parameter " + name);
    return it->second;
  }

  TensorT<T>& create(const std::string& name, TensorT<T> value) {
    if (contains(name))
      throw ContractError("params: duplicate parameter " + name);
    value.set_requires_grad(true);
    return tensors.emplace(name, std::move(value)).first->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(tensors.size());
    for (const auto& [k, v] : tensors) out.push_back(k);
    return out;
  }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : tensors) n += v.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [k, v] : tensors) v.zero_grad();
  }
};

using ParamMap = ParamMapT<float>;

// Deep-copies a parameter map into another scalar type (shadow-mode checks).
template <typename To, typename From>
ParamMapT<To> param_cast(const ParamMapT<From>& src) {
  ParamMapT<To> out;
  for (const auto& [name, t] : src.tensors) out.create(name, tensor_cast<To>(t));
  return out;
}

// Deep copy (fresh storage, same values).
template <typename T>
ParamMapT<T> param_clone(const ParamMapT<T>& src) {
  ParamMapT<T> out;
  for (const auto& [name, t] : src.tensors) out.create(name, t.clone());
  return out;
}

namespace init {

// He-style normal fan-in init for conv [O,C,k,k] / linear [in,out] weights.
inline Tensor conv_weight(Shape shape, Rng& rng) {
  auto w = Tensor::randn(shape, rng);
  int64_t fan_in = shape[1] * shape[2] * shape[3];
  float s = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) w.ptr()[i] *= s;
  return w;
}

inline Tensor linear_weight(int64_t in, int64_t out, Rng& rng) {
  auto w = Tensor::randn({in, out}, rng);
  float s = 1.0f / std::sqrt(static_cast<float>(in));
  for (int64_t i = 0; i < w.numel(); ++i) w.ptr()[i] *= s;
  return w;
}

}  // namespace init

}  // namespace composer
