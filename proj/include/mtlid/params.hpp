#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mtlid/tensor.hpp"

namespace mtlid {

enum class Init { TruncatedNormal, Zeros, Ones };

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Box-Muller standard normal; hand-rolled so draws do not depend on the
/// standard library's distribution implementation.
inline double standard_normal(Rng& rng) {
  constexpr double two_pi = 6.283185307179586476925;
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

}  // namespace detail

/// Seed for a named stream derived from a global seed.
inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view name) {
  return detail::splitmix64(global_seed ^ detail::splitmix64(detail::fnv1a(name)));
}

inline constexpr double kInitStddev = 0.02;

/// Truncated normal (sigma = 0.02, cut at 2 sigma) drawn sequentially from a
/// stream seeded by (global_seed, name). Tensors sharing a name and seed
/// share a value prefix regardless of their total size.
template <typename T>
std::vector<T> truncated_normal_init(std::uint64_t global_seed, std::string_view name,
                                     std::size_t count) {
  Rng rng(derive_seed(global_seed, name));
  std::vector<T> out(count);
  for (auto& v : out) {
    double z = detail::standard_normal(rng);
    while (std::abs(z) > 2.0) z = detail::standard_normal(rng);
    v = static_cast<T>(kInitStddev * z);
  }
  return out;
}

/// Named learnable tensors, iterated in name order.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T>& create(const std::string& name, Shape shape, Init init) {
    if (params_.count(name)) throw Error("duplicate parameter name " + name);
    const std::size_t n = numel(shape);
    std::vector<T> values;
    switch (init) {
      case Init::TruncatedNormal:
        values = truncated_normal_init<T>(seed_, name, n);
        break;
      case Init::Zeros:
        values.assign(n, T{0});
        break;
      case Init::Ones:
        values.assign(n, T{1});
        break;
    }
    return params_.emplace(name, Tensor<T>(std::move(shape), std::move(values), true))
        .first->second;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::uint64_t seed() const { return seed_; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.numel();
    return n;
  }

  /// Plain value copy keyed by name.
  std::map<std::string, std::vector<T>> snapshot() const {
    std::map<std::string, std::vector<T>> out;
    for (const auto& [name, p] : params_) out.emplace(name, std::vector<T>(p.data().begin(), p.data().end()));
    return out;
  }

  void restore(const std::map<std::string, std::vector<T>>& values) {
    for (auto& [name, p] : params_) {
      const auto& v = values.at(name);
      if (v.size() != p.numel()) throw ShapeError("snapshot size mismatch for " + name);
      std::copy(v.begin(), v.end(), p.data().begin());
    }
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor<T>> params_;
};

}  // namespace mtlid
