#include "magic/parameters.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace magic {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t state) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    state ^= p[i];
    state *= 0x100000001b3ull;
  }
  return state;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
Var<T> ParameterSet<T>::add(const std::string& name, Tensor<T> init, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  auto v = Var<T>::leaf(std::move(init), trainable);
  params_.emplace_back(name, v);
  return v;
}

template <typename T>
Var<T> ParameterSet<T>::add_fan_in(const std::string& name, Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return add(name, std::move(t));
}

template <typename T>
Var<T> ParameterSet<T>::add_zeros(const std::string& name, Shape shape) {
  return add(name, Tensor<T>(std::move(shape), T(0)));
}

template <typename T>
Var<T> ParameterSet<T>::add_ones(const std::string& name, Shape shape) {
  return add(name, Tensor<T>(std::move(shape), T(1)));
}

template <typename T>
const Var<T>& ParameterSet<T>::get(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw std::out_of_range("unknown parameter: " + name);
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return true;
  return false;
}

template <typename T>
std::int64_t ParameterSet<T>::element_count() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().numel();
  return n;
}

template <typename T>
void ParameterSet<T>::set_trainable(bool on) {
  for (auto& [n, v] : params_) {
    Var<T> copy = v;
    copy.set_requires_grad(on);
  }
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& [n, v] : params_) {
    Var<T> copy = v;
    copy.zero_grad();
  }
}

template <typename T>
void ParameterSet<T>::load(const std::vector<std::pair<std::string, Tensor<T>>>& values) {
  if (values.size() != params_.size()) {
    throw std::invalid_argument("parameter count mismatch: have " + std::to_string(params_.size()) + ", got " +
                                std::to_string(values.size()));
  }
  for (const auto& [name, t] : values) {
    Var<T> v = get(name);
    if (v.shape() != t.shape()) {
      throw ShapeError("parameter " + name + ": shape " + shape_str(v.shape()) + " vs stored " + shape_str(t.shape()));
    }
    v.mutable_value() = t;
  }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ParameterSet<T>::snapshot() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(params_.size());
  for (const auto& [n, v] : params_) out.emplace_back(n, v.value());
  return out;
}

template <typename T>
std::string ParameterSet<T>::digest() const {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& [n, v] : params_) {
    h = fnv1a(n.data(), n.size(), h);
    for (auto e : v.shape()) h = fnv1a(&e, sizeof e, h);
    h = fnv1a(v.value().ptr(), static_cast<std::size_t>(v.value().numel()) * sizeof(T), h);
  }
  return hex64(h);
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace magic
