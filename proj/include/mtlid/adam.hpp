#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mtlid/params.hpp"

namespace mtlid {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class AdamState {
 public:
  AdamState(const ParameterStore<T>& params, AdamOptions options) : options_(options) {
    if (!(options.learning_rate > 0.0) || !(options.beta1 > 0.0 && options.beta1 < 1.0) ||
        !(options.beta2 > 0.0 && options.beta2 < 1.0) || !(options.epsilon > 0.0)) {
      throw Error("invalid Adam hyperparameters");
    }
    for (const auto& [name, p] : params) {
      moments_.emplace(name, Moments{std::vector<T>(p.numel(), T{0}),
                                     std::vector<T>(p.numel(), T{0})});
    }
  }

  const AdamOptions& options() const { return options_; }
  std::uint64_t step_count() const { return step_; }

  /// Bias-corrected Adam update applied in place to every registered
  /// parameter. Throws if a parameter never received a gradient buffer.
  void step(ParameterStore<T>& params) {
    for (const auto& [name, p] : params) {
      if (!moments_.count(name)) throw Error("parameter " + name + " not registered with Adam");
      if (!p.has_grad()) throw Error("missing gradient for parameter " + name);
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    const T b1 = static_cast<T>(options_.beta1);
    const T b2 = static_cast<T>(options_.beta2);
    const T lr = static_cast<T>(options_.learning_rate);
    const T eps = static_cast<T>(options_.epsilon);
    const T inv_c1 = static_cast<T>(1.0 / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    for (auto& [name, p] : params) {
      auto& m = moments_.at(name);
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m.first[i] = b1 * m.first[i] + (T{1} - b1) * g[i];
        m.second[i] = b2 * m.second[i] + (T{1} - b2) * g[i] * g[i];
        const T mhat = m.first[i] * inv_c1;
        const T vhat = m.second[i] * inv_c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
  };
  AdamOptions options_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state) {
  state.step(params);
}

}  // namespace mtlid
