#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fixed_dg/autodiff.hpp"

namespace fixed_dg {

inline Var cross_entropy(const Var& logits, const Tensor& target) {
  if (logits.shape().size() != 2 || target.rank() != 2 || logits.shape()[1] != target.dim(1))
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  return softmax_cross_entropy(logits, target);
}

/// Hinge on the normalized score gap to rival classes.
struct MarginConfig {
  double gamma = 1.0;          // desired distance to the decision boundary
  std::size_t top_k = 1;       // rivals averaged per sample
  double denom_eps = 1e-8;     // added to the gradient-difference norm

  void validate(std::size_t classes) const {
    if (classes < 2) throw ConfigError("margin loss needs at least 2 classes");
    if (!(gamma >= 0.0)) throw ConfigError("margin.gamma must be >= 0");
    if (top_k < 1 || top_k > classes - 1)
      throw ConfigError("margin.top_k must lie in [1, " + std::to_string(classes - 1) + "], got " + std::to_string(top_k));
    if (!(denom_eps >= 0.0)) throw ConfigError("margin denominator eps must be >= 0");
  }
};

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes, const char* op) {
  if (labels.size() != batch)
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw DimensionError(std::string(op) + ": label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
}

// Indices of the top_k largest rival terms of row i, ties broken by class index.
inline std::vector<std::size_t> top_rivals(const std::vector<double>& terms, std::size_t y, std::size_t top_k) {
  std::vector<std::size_t> idx;
  idx.reserve(terms.size() - 1);
  for (std::size_t k = 0; k < terms.size(); ++k)
    if (k != y) idx.push_back(k);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top_k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return terms[a] > terms[b] || (terms[a] == terms[b] && a < b); });
  idx.resize(top_k);
  return idx;
}

}  // namespace detail

/// Fused hinge: mean over the batch of the mean of the top_k values of
///   max(0, gamma + (logits[i,k] - logits[i,y_i]) * inv_denom[i,k]),  k != y_i.
/// `inv_denom` is treated as a constant.
inline Var margin_hinge(const Var& logits, std::span<const int> labels, const Tensor& inv_denom, double gamma,
                        std::size_t top_k) {
  const Tensor& L = logits.value();
  if (L.rank() != 2 || inv_denom.shape() != L.shape())
    throw DimensionError("margin_hinge: logits " + shape_str(L.shape()) + " vs denominators " + shape_str(inv_denom.shape()));
  const std::size_t b = L.dim(0), k = L.dim(1);
  if (b == 0) throw DimensionError("margin_hinge: empty batch");
  MarginConfig{gamma, top_k, 0.0}.validate(k);
  detail::check_labels(labels, b, k, "margin_hinge");

  // Active (sample, rival) pairs with positive hinge, for the backward pass.
  std::vector<std::pair<std::size_t, std::size_t>> active;
  std::vector<int> ys(labels.begin(), labels.end());
  double total = 0.0;
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < b; ++i) {
    const auto y = static_cast<std::size_t>(ys[i]);
    for (std::size_t c = 0; c < k; ++c)
      terms[c] = c == y ? 0.0 : gamma + (L[i * k + c] - L[i * k + y]) * inv_denom[i * k + c];
    double row = 0.0;
    for (std::size_t c : detail::top_rivals(terms, y, top_k)) {
      if (terms[c] > 0.0) {
        row += terms[c];
        active.emplace_back(i, c);
      }
    }
    total += row / static_cast<double>(top_k);
  }
  const double scale_factor = 1.0 / (static_cast<double>(b) * static_cast<double>(top_k));
  return logits.graph->record(OpKind::MarginHinge, {logits.id}, Tensor::scalar(total / static_cast<double>(b)),
                              [active = std::move(active), ys = std::move(ys), inv_denom, k, scale_factor](
                                  const Tensor& go, std::span<Tensor* const> pg) {
                                if (!pg[0]) return;
                                for (auto [i, c] : active) {
                                  const double v = go[0] * scale_factor * inv_denom[i * k + c];
                                  (*pg[0])[i * k + c] += v;
                                  (*pg[0])[i * k + static_cast<std::size_t>(ys[i])] -= v;
                                }
                              });
}

/// Per-class input gradients: out[k] has the shape of `features` and row i
/// holds grad_z h_k(z_i). `head` maps (Graph&, Var features) -> Var logits [B, K] and must act on
/// each row independently, so that d(sum_i h_k(z_i))/dz_i = grad h_k(z_i).
template <class Head>
std::vector<Tensor> class_input_gradients(Head& head, const Tensor& features) {
  Graph scratch;
  Var z = scratch.input(features);
  Var logits = head(scratch, z);
  if (logits.shape().size() != 2 || logits.shape()[0] != features.dim(0))
    throw DimensionError("class_input_gradients: head produced " + shape_str(logits.shape()));
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  std::vector<Tensor> per_class;
  per_class.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    Var score = sum(pick(logits, std::vector<std::size_t>(b, c)));
    per_class.push_back(scratch.backward(score).of(z));
  }
  return per_class;
}

/// 1 / (||grad h_k - grad h_{y_i}||_2 + eps) as a [B, K] tensor (entry at
/// k == y_i is unused and set to 0).
template <class Head>
Tensor margin_inverse_denominators(Head& head, const Tensor& features, std::span<const int> labels, double eps) {
  auto grads = class_input_gradients(head, features);
  const std::size_t k = grads.size();
  const std::size_t b = features.dim(0);
  detail::check_labels(labels, b, k, "large_margin_loss");
  const std::size_t row = features.row_size();
  Tensor inv(Shape{b, k});
  for (std::size_t i = 0; i < b; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    for (std::size_t c = 0; c < k; ++c) {
      if (c == y) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < row; ++j) {
        const double d = grads[c][i * row + j] - grads[y][i * row + j];
        s += d * d;
      }
      const double denom = std::sqrt(s) + eps;
      if (!std::isfinite(denom) || denom <= 0.0)
        throw NumericError("large_margin_loss: gradient-difference norm is " + std::to_string(denom) + " for sample " +
                           std::to_string(i) + ", classes " + std::to_string(c) + "/" + std::to_string(y));
      inv[i * k + c] = 1.0 / denom;
    }
  }
  return inv;
}

/// First-order large-margin loss on classifier-input features `z`.
/// Gradients flow through the score gap only.
template <class Head>
Var large_margin_loss(Head& head, const Var& z, std::span<const int> labels, const MarginConfig& cfg) {
  Var logits = head(*z.graph, z);
  cfg.validate(logits.shape().at(1));
  Tensor inv = margin_inverse_denominators(head, z.value(), labels, cfg.denom_eps);
  return margin_hinge(logits, labels, inv, cfg.gamma, cfg.top_k);
}

/// lambda * LM(z_mix, y_i) + (1 - lambda) * LM(z_mix, y_j).
template <class Head>
Var mixed_margin_loss(Head& head, const Var& z_mix, std::span<const int> yi, std::span<const int> yj, double lambda,
                      const MarginConfig& cfg) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("mixed_margin_loss: lambda outside [0,1]");
  Var logits = head(*z_mix.graph, z_mix);
  cfg.validate(logits.shape().at(1));
  Tensor inv_i = margin_inverse_denominators(head, z_mix.value(), yi, cfg.denom_eps);
  Var li = margin_hinge(logits, yi, inv_i, cfg.gamma, cfg.top_k);
  if (lambda == 1.0) return li;
  Tensor inv_j = margin_inverse_denominators(head, z_mix.value(), yj, cfg.denom_eps);
  Var lj = margin_hinge(logits, yj, inv_j, cfg.gamma, cfg.top_k);
  if (lambda == 0.0) return lj;
  return add(scale(li, lambda), scale(lj, 1.0 - lambda));
}

/// Exact distance from z to the boundary {h_k1 = h_k2} of a linear scorer
/// h(z) = W z + b, with W stored [K, F].
inline double boundary_distance_linear(const Tensor& W, const Tensor& b, std::span<const double> z, std::size_t k1,
                                       std::size_t k2) {
  if (W.rank() != 2 || b.shape() != Shape{W.dim(0)} || z.size() != W.dim(1) || k1 >= W.dim(0) || k2 >= W.dim(0))
    throw DimensionError("boundary_distance_linear: W " + shape_str(W.shape()) + ", b " + shape_str(b.shape()) + ", z of " +
                         std::to_string(z.size()));
  const std::size_t f = W.dim(1);
  double dot = 0.0, nrm = 0.0;
  for (std::size_t j = 0; j < f; ++j) {
    const double dw = W.at(k1, j) - W.at(k2, j);
    dot += dw * z[j];
    nrm += dw * dw;
  }
  if (nrm == 0.0) throw std::domain_error("boundary_distance_linear: classes have identical weight rows");
  return std::abs(dot + b[k1] - b[k2]) / std::sqrt(nrm);
}

namespace detail {

inline Var covariance(const Var& x) {
  const std::size_t n = x.shape()[0];
  Var centered = sub(x, mean_rows(x));
  return scale(matmul(transpose(centered), centered), 1.0 / static_cast<double>(n - 1));
}

}  // namespace detail

/// Mean over domain pairs of ||C_i - C_j||_F^2 / (4 F^2) with unbiased
/// per-domain feature covariances.
inline Var coral_loss(const std::vector<Var>& domains) {
  if (domains.size() < 2) throw std::invalid_argument("coral_loss: need at least 2 domains");
  const Shape& s0 = domains[0].shape();
  if (s0.size() != 2) throw DimensionError("coral_loss: features must be [B, F], got " + shape_str(s0));
  const std::size_t f = s0[1];
  std::vector<Var> covs;
  for (const Var& d : domains) {
    if (d.shape().size() != 2 || d.shape()[1] != f)
      throw DimensionError("coral_loss: inconsistent feature shapes " + shape_str(s0) + " vs " + shape_str(d.shape()));
    if (d.shape()[0] < 2) throw std::invalid_argument("coral_loss: every domain needs at least 2 samples");
    covs.push_back(detail::covariance(d));
  }
  const double norm = 1.0 / (4.0 * static_cast<double>(f) * static_cast<double>(f));
  std::vector<Var> terms;
  for (std::size_t i = 0; i < covs.size(); ++i)
    for (std::size_t j = i + 1; j < covs.size(); ++j) {
      Var d = sub(covs[i], covs[j]);
      terms.push_back(scale(sum(mul(d, d)), norm));
    }
  // Summing in value order keeps the result independent of domain order.
  std::stable_sort(terms.begin(), terms.end(), [](const Var& a, const Var& b) { return a.value()[0] < b.value()[0]; });
  Var total = terms[0];
  for (std::size_t t = 1; t < terms.size(); ++t) total = add(total, terms[t]);
  return scale(total, 1.0 / static_cast<double>(terms.size()));
}

/// Cross-entropy of discriminator logits [B, M] against domain indices.
inline Var domain_adv_loss(const Var& disc_logits, std::span<const int> domains) {
  if (disc_logits.shape().size() != 2) throw DimensionError("domain_adv_loss: logits must be [B, M]");
  const std::size_t m = disc_logits.shape()[1];
  detail::check_labels(domains, disc_logits.shape()[0], m, "domain_adv_loss");
  return softmax_cross_entropy(disc_logits, one_hot(domains, m));
}

}  // namespace fixed_dg
