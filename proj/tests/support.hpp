#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fixed_dg/autodiff.hpp"
#include "fixed_dg/losses.hpp"
#include "fixed_dg/mixup.hpp"
#include "fixed_dg/trainer.hpp"
#include "fixed_dg/rng.hpp"

namespace testsupport {

using namespace fixed_dg;

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Values bounded away from zero, for inputs that hit a relu kink.
inline Tensor away_from_zero(Shape s, Rng& rng, double gap = 0.05) {
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

/// One differentiable expression over some input tensors. `fd_sign` is the
/// expected ratio analytic / finite-difference (-eta for gradient reversal).
struct GradCase {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<Var(Graph&, const std::vector<Var>&)> build;
  double fd_sign = 1.0;
};

/// Scalarizes an output with a fixed random projection so every output
/// entry contributes.
inline double projected_value(const GradCase& c, const std::vector<Tensor>& inputs, const Tensor& proj, Gradients* grads,
                              std::vector<NodeId>* ids) {
  Graph g;
  std::vector<Var> vs;
  for (const auto& t : inputs) vs.push_back(g.input(t));
  Var out = c.build(g, vs);
  Var loss = out.shape().empty() ? scale(out, proj[0]) : sum(mul(out, g.constant(proj)));
  if (grads) {
    *grads = g.backward(loss);
    ids->clear();
    for (const auto& v : vs) ids->push_back(v.id);
  }
  return loss.value().item();
}

/// Largest per-input relative error ||a - n|| / max(||a||, ||n||) between the
/// analytic and central-difference gradients.
inline double grad_check(const GradCase& c, Rng& rng, double h = 1e-6) {
  Shape out_shape;
  {
    Graph g;
    std::vector<Var> vs;
    for (const auto& t : c.inputs) vs.push_back(g.input(t));
    out_shape = c.build(g, vs).shape();
  }
  const Tensor proj = random_tensor(out_shape, rng, 0.5, 1.5);
  Gradients grads({}, {}, {}, {});
  std::vector<NodeId> ids;
  projected_value(c, c.inputs, proj, &grads, &ids);
  double worst = 0.0;
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    const Tensor analytic = grads.of(ids[k]);
    std::vector<Tensor> in = c.inputs;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < in[k].size(); ++j) {
      const double x0 = in[k][j];
      in[k][j] = x0 + h;
      const double fp = projected_value(c, in, proj, nullptr, nullptr);
      in[k][j] = x0 - h;
      const double fm = projected_value(c, in, proj, nullptr, nullptr);
      in[k][j] = x0;
      const double num = c.fd_sign * (fp - fm) / (2.0 * h);
      const double a = analytic[j];
      diff2 += (a - num) * (a - num);
      a2 += a * a;
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

using CaseGen = std::function<GradCase(Rng&)>;

struct NamedGen {
  std::string op;
  CaseGen gen;
};

/// Random instance generators, one per differentiable op. Inputs that could
/// sit on a kink (relu at 0, pooling ties, hinge at 0) are generated with a gap.
inline std::vector<NamedGen> op_generators() {
  std::vector<NamedGen> g;
  auto dims = [](Rng& r, int lo, int hi) { return static_cast<std::size_t>(std::uniform_int_distribution<int>(lo, hi)(r)); };

  g.push_back({"matmul", [=](Rng& r) {
                 const auto m = dims(r, 1, 4), n = dims(r, 1, 4), p = dims(r, 1, 4);
                 return GradCase{"matmul", {random_tensor({m, n}, r), random_tensor({n, p}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }};
               }});
  g.push_back({"transpose", [=](Rng& r) {
                 return GradCase{"transpose", {random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return transpose(v[0]); }};
               }});
  g.push_back({"add", [=](Rng& r) {
                 const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                 const bool bc = std::bernoulli_distribution(0.5)(r);
                 return GradCase{"add", {random_tensor({m, n}, r), bc ? random_tensor({n}, r) : random_tensor({m, n}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); }};
               }});
  g.push_back({"sub", [=](Rng& r) {
                 const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                 const bool bc = std::bernoulli_distribution(0.5)(r);
                 return GradCase{"sub", {random_tensor({m, n}, r), bc ? random_tensor({n}, r) : random_tensor({m, n}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return sub(v[0], v[1]); }};
               }});
  g.push_back({"mul", [=](Rng& r) {
                 const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                 const bool bc = std::bernoulli_distribution(0.5)(r);
                 return GradCase{"mul", {random_tensor({m, n}, r), bc ? random_tensor({n}, r) : random_tensor({m, n}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); }};
               }});
  g.push_back({"scale", [=](Rng& r) {
                 const double c = std::uniform_real_distribution<double>(-2, 2)(r);
                 return GradCase{"scale", {random_tensor({dims(r, 1, 3), dims(r, 1, 4)}, r)},
                                 [c](Graph&, const std::vector<Var>& v) { return scale(v[0], c); }};
               }});
  g.push_back({"add_scalar", [=](Rng& r) {
                 return GradCase{"add_scalar", {random_tensor({dims(r, 1, 3), dims(r, 1, 4)}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return add_scalar(v[0], 0.7); }};
               }});
  g.push_back({"relu", [=](Rng& r) {
                 return GradCase{"relu", {away_from_zero({dims(r, 1, 4), dims(r, 1, 5)}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return relu(v[0]); }};
               }});
  g.push_back({"sum", [=](Rng& r) {
                 return GradCase{"sum", {random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return sum(v[0]); }};
               }});
  g.push_back({"mean", [=](Rng& r) {
                 return GradCase{"mean", {random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return mean(v[0]); }};
               }});
  g.push_back({"mean_rows", [=](Rng& r) {
                 return GradCase{"mean_rows", {random_tensor({dims(r, 1, 5), dims(r, 1, 4)}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return mean_rows(v[0]); }};
               }});
  g.push_back({"reshape", [=](Rng& r) {
                 const auto a = dims(r, 1, 3), b = dims(r, 1, 3), c = dims(r, 1, 3);
                 return GradCase{"reshape", {random_tensor({a, b, c}, r)},
                                 [a, b, c](Graph&, const std::vector<Var>& v) { return reshape(v[0], Shape{a, b * c}); }};
               }});
  g.push_back({"gather_rows", [=](Rng& r) {
                 const auto m = dims(r, 1, 4), n = dims(r, 1, 3), k = dims(r, 1, 6);
                 std::vector<std::size_t> idx(k);
                 for (auto& i : idx) i = dims(r, 0, static_cast<int>(m) - 1);
                 return GradCase{"gather_rows", {random_tensor({m, n}, r)},
                                 [idx](Graph&, const std::vector<Var>& v) { return gather_rows(v[0], idx); }};
               }});
  g.push_back({"slice_rows", [=](Rng& r) {
                 const auto m = dims(r, 2, 6), n = dims(r, 1, 3);
                 const auto b = dims(r, 0, static_cast<int>(m) - 1);
                 const auto e = dims(r, static_cast<int>(b) + 1, static_cast<int>(m));
                 return GradCase{"slice_rows", {random_tensor({m, n}, r)},
                                 [b, e](Graph&, const std::vector<Var>& v) { return slice_rows(v[0], b, e); }};
               }});
  g.push_back({"pick", [=](Rng& r) {
                 const auto m = dims(r, 1, 5), n = dims(r, 1, 4);
                 std::vector<std::size_t> cols(m);
                 for (auto& c : cols) c = dims(r, 0, static_cast<int>(n) - 1);
                 return GradCase{"pick", {random_tensor({m, n}, r)},
                                 [cols](Graph&, const std::vector<Var>& v) { return pick(v[0], cols); }};
               }});
  g.push_back({"l2_norm_rows", [=](Rng& r) {
                 return GradCase{"l2_norm_rows", {away_from_zero({dims(r, 1, 4), dims(r, 1, 5)}, r, 0.2)},
                                 [](Graph&, const std::vector<Var>& v) { return l2_norm_rows(v[0]); }};
               }});
  g.push_back({"conv1d", [=](Rng& r) {
                 const auto b = dims(r, 1, 2), c = dims(r, 1, 3), o = dims(r, 1, 3), k = dims(r, 1, 4);
                 Conv1dParams cp{dims(r, 1, 2), dims(r, 0, 2)};
                 const auto len = dims(r, static_cast<int>(k), 9);
                 return GradCase{"conv1d", {random_tensor({b, c, len}, r), random_tensor({o, c, k}, r), random_tensor({o}, r)},
                                 [cp](Graph&, const std::vector<Var>& v) { return conv1d(v[0], v[1], v[2], cp); }};
               }});
  g.push_back({"max_pool1d", [=](Rng& r) {
                 const auto b = dims(r, 1, 2), c = dims(r, 1, 3), size = dims(r, 1, 3);
                 const auto len = size * dims(r, 1, 4) + dims(r, 0, static_cast<int>(size) - 1);
                 // Distinct values on a coarse lattice keep every window's max unique.
                 const std::size_t total = b * c * len;
                 std::vector<double> vals(total);
                 for (std::size_t i = 0; i < total; ++i) vals[i] = 0.1 * static_cast<double>(i) - 0.05 * static_cast<double>(total);
                 std::shuffle(vals.begin(), vals.end(), r);
                 return GradCase{"max_pool1d", {Tensor(Shape{b, c, len}, vals)},
                                 [size](Graph&, const std::vector<Var>& v) { return max_pool1d(v[0], size); }};
               }});
  g.push_back({"batch_norm_train", [=](Rng& r) {
                 const auto b = dims(r, 2, 4), c = dims(r, 1, 3);
                 const bool three = std::bernoulli_distribution(0.5)(r);
                 Shape s = three ? Shape{b, c, dims(r, 1, 4)} : Shape{b, c};
                 return GradCase{"batch_norm_train", {random_tensor(s, r), random_tensor({c}, r, 0.5, 1.5), random_tensor({c}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return batch_norm_train(v[0], v[1], v[2], 1e-5); }};
               }});
  g.push_back({"batch_norm_eval", [=](Rng& r) {
                 const auto b = dims(r, 1, 4), c = dims(r, 1, 3);
                 std::vector<double> mu(c), var(c);
                 for (auto& m : mu) m = std::uniform_real_distribution<double>(-1, 1)(r);
                 for (auto& s : var) s = std::uniform_real_distribution<double>(0.5, 2)(r);
                 return GradCase{"batch_norm_eval", {random_tensor({b, c, 3}, r), random_tensor({c}, r, 0.5, 1.5), random_tensor({c}, r)},
                                 [mu, var](Graph&, const std::vector<Var>& v) { return batch_norm_eval(v[0], v[1], v[2], mu, var, 1e-5); }};
               }});
  g.push_back({"softmax_cross_entropy", [=](Rng& r) {
                 const auto b = dims(r, 1, 4), k = dims(r, 2, 5);
                 Tensor t = random_tensor({b, k}, r, 0.0, 1.0);
                 for (std::size_t i = 0; i < b; ++i) {
                   double s = 0.0;
                   for (std::size_t j = 0; j < k; ++j) s += t.at(i, j);
                   for (std::size_t j = 0; j < k; ++j) t.at(i, j) /= s;
                 }
                 return GradCase{"softmax_cross_entropy", {random_tensor({b, k}, r, -3, 3)},
                                 [t](Graph&, const std::vector<Var>& v) { return softmax_cross_entropy(v[0], t); }};
               }});
  g.push_back({"grad_reverse", [=](Rng& r) {
                 const double eta = std::uniform_real_distribution<double>(0.1, 2.0)(r);
                 GradCase c{"grad_reverse", {random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r)},
                            [eta](Graph&, const std::vector<Var>& v) { return grad_reverse(v[0], eta); }};
                 c.fd_sign = -eta;
                 return c;
               }});
  g.push_back({"margin_hinge", [=](Rng& r) {
                 const auto b = dims(r, 1, 4), k = dims(r, 2, 5);
                 const auto top_k = dims(r, 1, static_cast<int>(k) - 1);
                 std::vector<int> y(b);
                 for (auto& v : y) v = static_cast<int>(dims(r, 0, static_cast<int>(k) - 1));
                 // Logits on a lattice with distinct offsets: every hinge term is
                 // well away from 0 and from its neighbours.
                 Tensor logits(Shape{b, k});
                 for (std::size_t i = 0; i < b; ++i) {
                   std::vector<double> lv(k);
                   for (std::size_t j = 0; j < k; ++j) lv[j] = 0.37 * static_cast<double>(j) + 0.011 * static_cast<double>(i);
                   std::shuffle(lv.begin(), lv.end(), r);
                   for (std::size_t j = 0; j < k; ++j) logits.at(i, j) = lv[j];
                 }
                 Tensor inv_fixed(Shape{b, k}, 1.0);
                 return GradCase{"margin_hinge", {logits},
                                 [y, inv_fixed, top_k](Graph&, const std::vector<Var>& v) {
                                   return margin_hinge(v[0], y, inv_fixed, 0.5, top_k);
                                 }};
               }});
  g.push_back({"coral_loss", [=](Rng& r) {
                 const auto f = dims(r, 1, 3);
                 return GradCase{"coral_loss", {random_tensor({3, f}, r), random_tensor({4, f}, r), random_tensor({3, f}, r)},
                                 [](Graph&, const std::vector<Var>& v) { return coral_loss(v); }};
               }});
  return g;
}

struct MixAlgebraStats {
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst = 0.0;
  std::string first_failure;
};

/// Endpoint, idempotence, convexity and label-mass invariants of one random
/// mixing case, recorded into `st` with tolerance `tol`.
inline void mix_algebra_case(Rng& rng, MixAlgebraStats& st, double tol = 1e-12) {
  std::uniform_int_distribution<int> bd(1, 8), fd(1, 6), kd(2, 5);
  const auto b = static_cast<std::size_t>(bd(rng)), f = static_cast<std::size_t>(fd(rng)), k = static_cast<std::size_t>(kd(rng));
  const Tensor x = random_tensor({b, f}, rng, -10, 10);
  std::vector<int> y(b);
  for (auto& v : y) v = std::uniform_int_distribution<int>(0, static_cast<int>(k) - 1)(rng);
  const Tensor labels = one_hot(y, k);
  MixPlan plan = make_mix_plan(b, std::uniform_real_distribution<double>(0.05, 3.0)(rng), MixSite::Input, rng);
  ++st.cases;
  auto note = [&](double err, const char* what) {
    st.worst = std::max(st.worst, err);
    if (!(err <= tol)) {
      if (st.failures++ == 0) st.first_failure = what;
    }
  };

  const auto [xm, ym] = apply_mix_plan(x, labels, plan);
  for (std::size_t i = 0; i < b; ++i) {
    double mass = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      mass += ym.at(i, c);
      note(std::max(0.0, -ym.at(i, c)), "label entries stay non-negative");
    }
    note(std::abs(mass - 1.0), "label mass");
    for (std::size_t j = 0; j < f; ++j) {
      const double a = x.at(i, j), p = x.at(plan.perm[i], j), v = xm.at(i, j);
      note(std::max(0.0, std::max(std::min(a, p) - v, v - std::max(a, p))), "convexity");
    }
  }

  MixPlan one = plan;
  one.lambda = 1.0;
  MixPlan zero = plan;
  zero.lambda = 0.0;
  const auto [x1, y1] = apply_mix_plan(x, labels, one);
  const auto [x0, y0] = apply_mix_plan(x, labels, zero);
  note(max_abs_diff(x1, x), "lambda=1 endpoint");
  note(max_abs_diff(y1, labels), "lambda=1 label endpoint");
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < f; ++j) note(std::abs(x0.at(i, j) - x.at(plan.perm[i], j)), "lambda=0 endpoint");
    for (std::size_t c = 0; c < k; ++c) note(std::abs(y0.at(i, c) - labels.at(plan.perm[i], c)), "lambda=0 label endpoint");
  }

  MixPlan self = plan;
  std::iota(self.perm.begin(), self.perm.end(), std::size_t{0});
  const auto [xs, ys] = apply_mix_plan(x, labels, self);
  note(max_abs_diff(xs, x), "idempotence");
  note(max_abs_diff(ys, labels), "label idempotence");
}

/// Linear scorer h(z) = z W^T + b usable as a margin head.
struct LinearHead {
  Tensor W;  // [K, F]
  Tensor b;  // [K]
  Var operator()(Graph& g, const Var& z) const { return add(matmul(z, transpose(g.constant(W))), g.constant(b)); }
};

/// Reference value of the margin loss for a linear head, built from exact
/// boundary distances: per sample, the mean of the top_k largest
/// max(0, gamma - signed distance to the boundary with each rival).
inline double linear_margin_reference(const LinearHead& h, const Tensor& z, std::span<const int> y, double gamma,
                                      std::size_t top_k) {
  const std::size_t n = z.dim(0), f = z.dim(1), k = h.W.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> zi(z.data().data() + i * f, f);
    auto score = [&](std::size_t c) {
      double s = h.b[c];
      for (std::size_t j = 0; j < f; ++j) s += h.W.at(c, j) * zi[j];
      return s;
    };
    const auto yi = static_cast<std::size_t>(y[i]);
    std::vector<double> terms;
    for (std::size_t c = 0; c < k; ++c) {
      if (c == yi) continue;
      const double dist = boundary_distance_linear(h.W, h.b, zi, yi, c);
      const double signed_dist = score(yi) >= score(c) ? dist : -dist;
      terms.push_back(std::max(0.0, gamma - signed_dist));
    }
    std::sort(terms.rbegin(), terms.rend());
    double row = 0.0;
    for (std::size_t t = 0; t < top_k; ++t) row += terms[t];
    total += row / static_cast<double>(top_k);
  }
  return total / static_cast<double>(n);
}

/// One random linear model; returns |loss - reference|.
inline double margin_exactness_case(Rng& rng) {
  std::uniform_int_distribution<int> kd(2, 6), fd(1, 6), bd(1, 8);
  const auto k = static_cast<std::size_t>(kd(rng)), f = static_cast<std::size_t>(fd(rng)), b = static_cast<std::size_t>(bd(rng));
  LinearHead h{random_tensor({k, f}, rng, -2, 2), random_tensor({k}, rng, -1, 1)};
  const Tensor z = random_tensor({b, f}, rng, -3, 3);
  std::vector<int> y(b);
  for (auto& v : y) v = std::uniform_int_distribution<int>(0, static_cast<int>(k) - 1)(rng);
  MarginConfig cfg;
  cfg.gamma = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
  cfg.top_k = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, static_cast<int>(k) - 1)(rng));
  cfg.denom_eps = 0.0;
  Graph g;
  const double got = large_margin_loss(h, g.input(z), y, cfg).value().item();
  return std::abs(got - linear_margin_reference(h, z, y, cfg.gamma, cfg.top_k));
}

struct Degeneration {
  double loss_gap = 0.0;      // |loss_a - loss_b| on the compared component
  double grad_gap = 0.0;      // max |grad_a - grad_b| over shared non-discriminator parameters
};

/// Builds one batch from `sources` and records `a` and `b` on it with the
/// same initial model and the same mix stream. `compare_total` selects the
/// total objective; otherwise only the classification component is compared.
inline Degeneration compare_steps(const DomainDataset& sources, const ModelConfig& mc, AlgorithmConfig a, AlgorithmConfig b,
                                  bool compare_total, std::uint64_t seed) {
  Rng data(seed);
  std::vector<std::vector<std::size_t>> order(sources.num_domains());
  for (std::size_t d = 0; d < order.size(); ++d) {
    order[d].resize(sources.domains[d].size());
    std::iota(order[d].begin(), order[d].end(), std::size_t{0});
    std::shuffle(order[d].begin(), order[d].end(), data);
  }
  const Batch batch = make_batch(sources, order, 0, std::min<std::size_t>(a.batch_per_domain, sources.domains[0].size()));
  a.seed = b.seed = seed;
  ModelBundle ma(arch_for(mc, sources), seed), mb(arch_for(mc, sources), seed);
  Rng ra = make_rng(seed, 2), rb = make_rng(seed, 2);
  Graph ga, gb;
  StepOutput sa = build_step(ga, ma, a, batch, ra);
  StepOutput sb = build_step(gb, mb, b, batch, rb);
  Degeneration out;
  const Var& la = compare_total ? sa.total : sa.class_loss;
  const Var& lb = compare_total ? sb.total : sb.class_loss;
  out.loss_gap = std::abs(la.value().item() - lb.value().item());
  Gradients da = ga.backward(sa.total), db = gb.backward(sb.total);
  for (const auto& p : ma.parameters()) {
    if (!p.trainable || p.name.rfind("discriminator", 0) == 0) continue;
    out.grad_gap = std::max(out.grad_gap, max_abs_diff(da.of(p), db.of(mb.param(p.name))));
  }
  return out;
}

}  // namespace testsupport
