#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fixed_dg/autodiff.hpp"
#include "fixed_dg/rng.hpp"

namespace fixed_dg {

/// Symmetric Beta(alpha, alpha), optionally restricted to [lo, hi].
struct BetaParams {
  double alpha = 0.2;
  std::optional<std::pair<double, double>> truncation;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("beta: alpha must be > 0, got " + std::to_string(alpha));
    if (truncation) {
      auto [lo, hi] = *truncation;
      if (!(lo >= 0.0 && lo < hi && hi <= 1.0))
        throw ConfigError("beta: truncation interval must satisfy 0 <= a < b <= 1");
    }
  }
};

/// Draw via the two-gamma construction; truncated draws are rejection
/// filtered.
inline double sample_beta(const BetaParams& params, Rng& rng) {
  params.validate();
  std::gamma_distribution<double> gamma(params.alpha, 1.0);
  constexpr int kMaxTries = 10'000'000;
  for (int tries = 0; tries < kMaxTries; ++tries) {
    const double x = gamma(rng);
    const double y = gamma(rng);
    if (x + y <= 0.0) continue;  // both underflowed; happens for tiny alpha
    const double lam = x / (x + y);
    if (!params.truncation) return lam;
    if (lam >= params.truncation->first && lam <= params.truncation->second) return lam;
  }
  throw NumericError("sample_beta: rejection sampler exhausted its budget");
}

/// Uniform random permutation of [0, batch_size).
inline std::vector<std::size_t> pair_shuffle(std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("pair_shuffle: batch_size must be >= 1");
  std::vector<std::size_t> perm(batch_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = batch_size - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(perm[i], perm[pick(rng)]);
  }
  return perm;
}

enum class MixSite { Input, Hidden, Bottleneck };

struct MixPlan {
  double lambda = 1.0;
  std::vector<std::size_t> perm;
  MixSite site = MixSite::Bottleneck;
  std::size_t hidden_layer = 0;  // only meaningful for MixSite::Hidden
};

inline void check_lambda(double lambda, const char* op) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument(std::string(op) + ": lambda must lie in [0,1], got " + std::to_string(lambda));
}

/// lambda * a + (1 - lambda) * b, differentiable in both operands.
inline Var mix_tensors(const Var& a, const Var& b, double lambda) {
  check_lambda(lambda, "mix_tensors");
  if (a.shape() != b.shape())
    throw DimensionError("mix_tensors: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return add(scale(a, lambda), scale(b, 1.0 - lambda));
}

inline Tensor mix_tensors(const Tensor& a, const Tensor& b, double lambda) {
  check_lambda(lambda, "mix_tensors");
  if (a.shape() != b.shape())
    throw DimensionError("mix_tensors: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  return out;
}

inline std::vector<double> mix_labels(std::span<const double> yi, std::span<const double> yj, double lambda) {
  check_lambda(lambda, "mix_labels");
  if (yi.size() != yj.size())
    throw DimensionError("mix_labels: " + std::to_string(yi.size()) + " vs " + std::to_string(yj.size()) + " classes");
  std::vector<double> out(yi.size());
  for (std::size_t k = 0; k < yi.size(); ++k) out[k] = lambda * yi[k] + (1.0 - lambda) * yj[k];
  return out;
}

namespace detail {

inline void check_perm(const std::vector<std::size_t>& perm, std::size_t batch) {
  if (perm.size() != batch)
    throw DimensionError("apply_mix_plan: permutation of length " + std::to_string(perm.size()) + " for batch of " +
                         std::to_string(batch));
}

inline Tensor mix_label_rows(const Tensor& labels, const MixPlan& plan) {
  const std::size_t b = labels.dim(0), k = labels.dim(1);
  Tensor out(labels.shape());
  for (std::size_t i = 0; i < b; ++i) {
    auto row = mix_labels(labels.data().subspan(i * k, k), labels.data().subspan(plan.perm[i] * k, k), plan.lambda);
    std::copy(row.begin(), row.end(), out.data().begin() + i * k);
  }
  return out;
}

}  // namespace detail

/// Row i is mixed with row perm[i] using the plan's single lambda; label rows
/// [B, K] are mixed identically. Domain labels are not touched.
inline std::pair<Var, Tensor> apply_mix_plan(const Var& batch, const Tensor& labels, const MixPlan& plan) {
  check_lambda(plan.lambda, "apply_mix_plan");
  const std::size_t b = batch.shape().at(0);
  detail::check_perm(plan.perm, b);
  if (labels.rank() != 2 || labels.dim(0) != b)
    throw DimensionError("apply_mix_plan: labels " + shape_str(labels.shape()) + " for batch of " + std::to_string(b));
  Var partner = gather_rows(batch, plan.perm);
  return {mix_tensors(batch, partner, plan.lambda), detail::mix_label_rows(labels, plan)};
}

inline std::pair<Tensor, Tensor> apply_mix_plan(const Tensor& batch, const Tensor& labels, const MixPlan& plan) {
  Graph g;
  auto [mixed, y] = apply_mix_plan(g.constant(batch), labels, plan);
  return {mixed.value(), std::move(y)};
}

/// Samples lambda from Beta(alpha, alpha) and a pairing permutation.
inline MixPlan make_mix_plan(std::size_t batch_size, double alpha, MixSite site, Rng& rng, std::size_t hidden_layer = 0) {
  MixPlan plan;
  plan.lambda = sample_beta(BetaParams{alpha, std::nullopt}, rng);
  plan.perm = pair_shuffle(batch_size, rng);
  plan.site = site;
  plan.hidden_layer = hidden_layer;
  return plan;
}

}  // namespace fixed_dg
