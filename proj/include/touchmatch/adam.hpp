#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "touchmatch/error.hpp"
#include "touchmatch/tensor.hpp"

namespace touchmatch {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates for a fixed list of parameters.
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  AdamState() = default;

  AdamState(std::span<Tensor* const> params, AdamHyper h = {}) : hyper(h) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Tensor* p : params) {
      m.emplace_back(p->shape(), 0.0);
      v.emplace_back(p->shape(), 0.0);
    }
  }
};

/// One bias-corrected Adam update, applied in place.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(state.m.size()) +
                         " state slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->require_same_shape(grads[i], "adam_step");
    params[i]->require_same_shape(state.m[i], "adam_step");
  }
  state.t += 1;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.epsilon);
    }
  }
}

}  // namespace touchmatch
