#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fixed_dg/autodiff.hpp"

namespace fixed_dg {

struct AdamConfig {
  double lr = 1e-2;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// Adam with decoupled weight decay:
///   p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments are created on the first call and must keep their shapes after.
inline void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size())
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params but " + std::to_string(grads.size()) +
                         " gradients");
  if (state.m.empty() && state.step == 0) {
    for (Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state tracks a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& s = params[i]->value.shape();
    if (grads[i].shape() != s || state.m[i].shape() != s)
      throw DimensionError("adam_step: shape mismatch for '" + params[i]->name + "': param " + shape_str(s) + ", grad " +
                           shape_str(grads[i].shape()));
  }

  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - c.lr * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->value.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[j] = p[j] * decay - c.lr * mh / (std::sqrt(vh) + c.eps);
    }
  }
}

}  // namespace fixed_dg
