#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fixed_dg/mixup.hpp"
#include "fixed_dg/rng.hpp"
#include "fixed_dg/tensor.hpp"

namespace fixed_dg::bounds {

inline constexpr double kSlack = 1e-12;

/// Finite weighted point set, optionally carrying binary labels.
struct EmpiricalDist {
  std::size_t dim = 1;
  std::vector<double> points;  // size() * dim, row-major
  std::vector<double> weights;
  std::vector<int> labels;     // empty when unlabeled

  std::size_t size() const { return weights.size(); }
  bool labeled() const { return !labels.empty(); }
  std::span<const double> point(std::size_t i) const { return {points.data() + i * dim, dim}; }

  void validate() const {
    if (dim == 0) throw ConfigError("EmpiricalDist: dim must be positive");
    if (weights.empty()) throw ConfigError("EmpiricalDist: no points");
    if (points.size() != weights.size() * dim) throw DimensionError("EmpiricalDist: points/weights size mismatch");
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ConfigError("EmpiricalDist: negative weight");
      s += w;
    }
    if (std::abs(s - 1.0) > kSlack) throw ConfigError("EmpiricalDist: weights sum to " + std::to_string(s));
    if (labeled()) {
      if (labels.size() != weights.size()) throw DimensionError("EmpiricalDist: labels/points size mismatch");
      for (int y : labels)
        if (y != 0 && y != 1) throw ConfigError("EmpiricalDist: labels must be 0 or 1");
    }
  }

  static EmpiricalDist uniform(std::size_t dim, std::vector<double> pts, std::vector<int> labels = {}) {
    EmpiricalDist d;
    d.dim = dim;
    const std::size_t n = dim == 0 ? 0 : pts.size() / dim;
    d.points = std::move(pts);
    d.weights.assign(n, n ? 1.0 / static_cast<double>(n) : 0.0);
    d.labels = std::move(labels);
    d.validate();
    return d;
  }
};

inline void check_phi(std::span<const double> phi, std::size_t m) {
  if (phi.size() != m) throw ConfigError("phi has " + std::to_string(phi.size()) + " weights for " + std::to_string(m) + " sources");
  double s = 0.0;
  for (double p : phi) {
    if (!(p >= 0.0)) throw ConfigError("phi weights must be nonnegative");
    s += p;
  }
  if (std::abs(s - 1.0) > kSlack) throw ConfigError("phi weights sum to " + std::to_string(s));
}

/// sum_i phi_i P_i as the union of all points, point p of P_i weighted phi_i * w_p.
inline EmpiricalDist mixture(const std::vector<EmpiricalDist>& parts, std::span<const double> phi) {
  if (parts.empty()) throw ConfigError("mixture: no components");
  check_phi(phi, parts.size());
  EmpiricalDist m;
  m.dim = parts.front().dim;
  bool labeled = true;
  for (const auto& p : parts) labeled = labeled && p.labeled();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (p.dim != m.dim) throw DimensionError("mixture: components differ in dimension");
    m.points.insert(m.points.end(), p.points.begin(), p.points.end());
    for (double w : p.weights) m.weights.push_back(phi[i] * w);
    if (labeled) m.labels.insert(m.labels.end(), p.labels.begin(), p.labels.end());
  }
  return m;
}

using Hypothesis = std::function<bool(std::span<const double>)>;

struct HypothesisClass {
  std::string description;
  std::size_t dim = 1;
  std::vector<Hypothesis> hypotheses;

  std::size_t size() const { return hypotheses.size(); }
  void validate() const {
    if (hypotheses.empty()) throw ConfigError("hypothesis class is empty");
  }
};

inline std::vector<double> linspace(double lo, double hi, std::size_t count) {
  if (count < 2) return {lo};
  std::vector<double> g(count);
  for (std::size_t i = 0; i < count; ++i) g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
  return g;
}

/// {x : x >= t} for every t in the grid.
inline HypothesisClass threshold_class(const std::vector<double>& grid) {
  HypothesisClass h{"thresholds x>=t, " + std::to_string(grid.size()) + " values", 1, {}};
  for (double t : grid) h.hypotheses.push_back([t](std::span<const double> x) { return x[0] >= t; });
  return h;
}

/// Upper-right quadrants {x : x0 >= a and x1 >= b} over a square grid of (a, b).
inline HypothesisClass quadrant_class(const std::vector<double>& grid) {
  HypothesisClass h{"quadrants x0>=a and x1>=b, " + std::to_string(grid.size()) + "^2 values", 2, {}};
  for (double a : grid)
    for (double b : grid) h.hypotheses.push_back([a, b](std::span<const double> x) { return x[0] >= a && x[1] >= b; });
  return h;
}

/// Half-planes {x : cos(t) x0 + sin(t) x1 >= c} with quantized angle and offset.
inline HypothesisClass linear_separator_class(std::size_t angles, const std::vector<double>& offsets) {
  HypothesisClass h{"half-planes, " + std::to_string(angles) + " angles x " + std::to_string(offsets.size()) + " offsets", 2, {}};
  for (std::size_t a = 0; a < angles; ++a) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(a) / static_cast<double>(angles);
    const double c0 = std::cos(t), s0 = std::sin(t);
    for (double c : offsets)
      h.hypotheses.push_back([c0, s0, c](std::span<const double> x) { return c0 * x[0] + s0 * x[1] >= c; });
  }
  return h;
}

/// Everything about one distribution that the divergences and errors need:
/// Pr(I_h), Pr(h xor h'), and the labeled error of each h.
struct Profile {
  std::size_t hyps = 0;
  std::vector<double> mass;
  std::vector<double> disagreement;  // hyps x hyps, symmetric, zero diagonal
  std::vector<double> error;         // empty when unlabeled

  double pair(std::size_t a, std::size_t b) const { return disagreement[a * hyps + b]; }
};

inline Profile profile(const EmpiricalDist& d, const HypothesisClass& h, bool pairs = true) {
  h.validate();
  d.validate();
  if (d.dim != h.dim) throw DimensionError("profile: distribution dim " + std::to_string(d.dim) + " vs class dim " + std::to_string(h.dim));
  const std::size_t nh = h.size(), n = d.size();
  std::vector<std::uint8_t> eval(nh * n);
  for (std::size_t k = 0; k < nh; ++k)
    for (std::size_t p = 0; p < n; ++p) eval[k * n + p] = h.hypotheses[k](d.point(p)) ? 1 : 0;

  Profile pr;
  pr.hyps = nh;
  pr.mass.assign(nh, 0.0);
  for (std::size_t k = 0; k < nh; ++k)
    for (std::size_t p = 0; p < n; ++p)
      if (eval[k * n + p]) pr.mass[k] += d.weights[p];
  if (d.labeled()) {
    pr.error.assign(nh, 0.0);
    for (std::size_t k = 0; k < nh; ++k)
      for (std::size_t p = 0; p < n; ++p)
        if (eval[k * n + p] != d.labels[p]) pr.error[k] += d.weights[p];
  }
  if (pairs) {
    pr.disagreement.assign(nh * nh, 0.0);
    for (std::size_t a = 0; a < nh; ++a)
      for (std::size_t b = a + 1; b < nh; ++b) {
        double s = 0.0;
        for (std::size_t p = 0; p < n; ++p)
          if (eval[a * n + p] != eval[b * n + p]) s += d.weights[p];
        pr.disagreement[a * nh + b] = pr.disagreement[b * nh + a] = s;
      }
  }
  return pr;
}

inline double h_divergence(const Profile& p, const Profile& q) {
  if (p.hyps != q.hyps || p.hyps == 0) throw ConfigError("h_divergence: profiles from different or empty classes");
  double best = 0.0;
  for (std::size_t k = 0; k < p.hyps; ++k) best = std::max(best, std::abs(p.mass[k] - q.mass[k]));
  return 2.0 * best;
}

inline double h_delta_h_divergence(const Profile& p, const Profile& q) {
  if (p.hyps != q.hyps || p.hyps == 0) throw ConfigError("h_delta_h_divergence: profiles from different or empty classes");
  if (p.disagreement.empty() || q.disagreement.empty()) throw ConfigError("h_delta_h_divergence: profile built without pairs");
  double best = 0.0;
  for (std::size_t k = 0; k < p.disagreement.size(); ++k) best = std::max(best, std::abs(p.disagreement[k] - q.disagreement[k]));
  return 2.0 * best;
}

inline double h_divergence(const EmpiricalDist& p, const EmpiricalDist& q, const HypothesisClass& h) {
  return h_divergence(profile(p, h, false), profile(q, h, false));
}

inline double h_delta_h_divergence(const EmpiricalDist& p, const EmpiricalDist& q, const HypothesisClass& h) {
  return h_delta_h_divergence(profile(p, h), profile(q, h));
}

inline double ideal_joint_error(const Profile& p, const Profile& q) {
  if (p.error.empty() || q.error.empty()) throw ConfigError("ideal_joint_error: both distributions must be labeled");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < p.hyps; ++k) best = std::min(best, p.error[k] + q.error[k]);
  return best;
}

inline double ideal_joint_error(const EmpiricalDist& p, const EmpiricalDist& q, const HypothesisClass& h) {
  return ideal_joint_error(profile(p, h, false), profile(q, h, false));
}

struct DaBoundReport {
  double lambda = 0.0;
  double divergence = 0.0;  // d_{HdH}(Q, P)
  std::vector<double> lhs, rhs, slack;  // per hypothesis, slack = rhs - lhs
  double max_violation = -std::numeric_limits<double>::infinity();
  double min_slack = std::numeric_limits<double>::infinity();
  double mean_slack = 0.0;
  std::size_t violations = 0;
};

/// eps_Q(h) <= lambda'' + eps_P(h) + d_{HdH}(Q, P) / 2 for every h.
inline DaBoundReport check_da_bound(const EmpiricalDist& p, const EmpiricalDist& q, const HypothesisClass& h) {
  const Profile pp = profile(p, h), pq = profile(q, h);
  DaBoundReport r;
  r.lambda = ideal_joint_error(pp, pq);
  r.divergence = h_delta_h_divergence(pq, pp);
  for (std::size_t k = 0; k < h.size(); ++k) {
    const double lhs = pq.error.at(k), rhs = r.lambda + pp.error.at(k) + 0.5 * r.divergence;
    r.lhs.push_back(lhs);
    r.rhs.push_back(rhs);
    r.slack.push_back(rhs - lhs);
    r.max_violation = std::max(r.max_violation, lhs - rhs);
    r.min_slack = std::min(r.min_slack, rhs - lhs);
    r.mean_slack += rhs - lhs;
    r.violations += rhs - lhs < -kSlack;
  }
  r.mean_slack /= static_cast<double>(h.size());
  return r;
}

/// Source-side quantities shared by every candidate S of one configuration.
struct SourceSet {
  std::vector<EmpiricalDist> sources;
  std::vector<double> phi;
  std::vector<Profile> profiles;
  EmpiricalDist mix;
  Profile mix_profile;
  double max_pairwise = 0.0;  // max_{i,j} d_{HdH}(P_i, P_j)

  SourceSet(std::vector<EmpiricalDist> src, std::vector<double> weights, const HypothesisClass& h)
      : sources(std::move(src)), phi(std::move(weights)) {
    if (sources.empty()) throw ConfigError("SourceSet: no sources");
    check_phi(phi, sources.size());
    for (const auto& s : sources) profiles.push_back(profile(s, h));
    mix = mixture(sources, phi);
    mix_profile = profile(mix, h);
    for (std::size_t i = 0; i < profiles.size(); ++i)
      for (std::size_t j = i + 1; j < profiles.size(); ++j)
        max_pairwise = std::max(max_pairwise, h_delta_h_divergence(profiles[i], profiles[j]));
  }

  /// sum_i phi_i d(P_i, S)
  double weighted_divergence(const Profile& s) const {
    double v = 0.0;
    for (std::size_t i = 0; i < profiles.size(); ++i) v += phi[i] * h_delta_h_divergence(profiles[i], s);
    return v;
  }
  /// d(sum_i phi_i P_i, S)
  double mixture_divergence(const Profile& s) const { return h_delta_h_divergence(mix_profile, s); }

  bool in_O(const Profile& s) const { return weighted_divergence(s) <= max_pairwise + kSlack; }
  bool in_Oprime(const Profile& s) const { return mixture_divergence(s) <= max_pairwise + kSlack; }
};

inline bool membership_O(const EmpiricalDist& s, const std::vector<EmpiricalDist>& sources, const std::vector<double>& phi,
                         const HypothesisClass& h) {
  const SourceSet set(sources, phi, h);
  return set.in_O(profile(s, h));
}

inline bool membership_Oprime(const EmpiricalDist& s, const std::vector<EmpiricalDist>& sources, const std::vector<double>& phi,
                              const HypothesisClass& h) {
  const SourceSet set(sources, phi, h);
  return set.in_Oprime(profile(s, h));
}

struct InclusionReport {
  std::size_t candidates = 0;
  std::size_t in_O = 0;
  std::size_t in_Oprime = 0;
  std::vector<std::size_t> counterexamples;  // in O but not in O'
  std::vector<double> triangle_slack;        // sum_i phi_i d(P_i,S) - d(mix, S)
  double min_triangle_slack = std::numeric_limits<double>::infinity();
  double max_pairwise = 0.0;
};

inline InclusionReport verify_inclusion(const std::vector<EmpiricalDist>& candidates, const SourceSet& set, const HypothesisClass& h) {
  InclusionReport r;
  r.candidates = candidates.size();
  r.max_pairwise = set.max_pairwise;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const Profile s = profile(candidates[c], h);
    const double lhs_o = set.weighted_divergence(s), lhs_op = set.mixture_divergence(s);
    const bool o = lhs_o <= set.max_pairwise + kSlack, op = lhs_op <= set.max_pairwise + kSlack;
    r.in_O += o;
    r.in_Oprime += op;
    if (o && !op) r.counterexamples.push_back(c);
    r.triangle_slack.push_back(lhs_o - lhs_op);
    r.min_triangle_slack = std::min(r.min_triangle_slack, lhs_o - lhs_op);
  }
  return r;
}

inline InclusionReport verify_inclusion(const std::vector<EmpiricalDist>& candidates, const std::vector<EmpiricalDist>& sources,
                                        const std::vector<double>& phi, const HypothesisClass& h) {
  return verify_inclusion(candidates, SourceSet(sources, phi, h), h);
}

enum class Coverage { O, Oprime };

struct DgBoundReport {
  std::size_t candidates_in_set = 0;
  std::size_t checks = 0;
  std::size_t violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  // The bound as printed: one joint-error constant and the min over the set.
  bool literal_evaluated = false;
  std::size_t literal_violations = 0;
  double literal_min_slack = std::numeric_limits<double>::infinity();
};

/// Checks the multi-source bound for every h and every labeled candidate S in
/// the coverage set:
///   eps_Q(h) <= lam_S + sum_i phi_i eps_{P_i}(h) + d(S,Q)/2 + max_ij d(P_i,P_j)/2
/// where lam_S chains the two single-source bounds through S:
///   O  : lam(Q,S) + sum_i phi_i lam(S,P_i)
///   O' : lam(Q,S) + lam(S, sum_i phi_i P_i)
/// The literal variant uses lam_phi = sum_i phi_i lam(Q,P_i) for O, lam(Q, mix)
/// for O', with min_S d(S,Q), and is reported without being required.
inline DgBoundReport check_dg_bound(const EmpiricalDist& q, const SourceSet& set, const std::vector<EmpiricalDist>& candidates,
                                    const HypothesisClass& h, Coverage cov) {
  const Profile pq = profile(q, h);
  if (pq.error.empty()) throw ConfigError("check_dg_bound: target must be labeled");
  for (const auto& p : set.profiles)
    if (p.error.empty()) throw ConfigError("check_dg_bound: sources must be labeled");
  const std::size_t nh = h.size();
  std::vector<double> src_err(nh, 0.0);
  for (std::size_t k = 0; k < nh; ++k)
    for (std::size_t i = 0; i < set.profiles.size(); ++i) src_err[k] += set.phi[i] * set.profiles[i].error[k];

  DgBoundReport r;
  double min_d = std::numeric_limits<double>::infinity();
  for (const auto& cand : candidates) {
    const Profile ps = profile(cand, h);
    if (!(cov == Coverage::O ? set.in_O(ps) : set.in_Oprime(ps))) continue;
    if (ps.error.empty()) throw ConfigError("check_dg_bound: candidates must be labeled");
    ++r.candidates_in_set;
    double lam = ideal_joint_error(pq, ps);
    if (cov == Coverage::O) {
      for (std::size_t i = 0; i < set.profiles.size(); ++i) lam += set.phi[i] * ideal_joint_error(ps, set.profiles[i]);
    } else {
      lam += ideal_joint_error(ps, set.mix_profile);
    }
    const double d_sq = h_delta_h_divergence(ps, pq);
    min_d = std::min(min_d, d_sq);
    for (std::size_t k = 0; k < nh; ++k) {
      const double slack = lam + src_err[k] + 0.5 * d_sq + 0.5 * set.max_pairwise - pq.error[k];
      ++r.checks;
      r.violations += slack < -kSlack;
      r.min_slack = std::min(r.min_slack, slack);
    }
  }
  if (r.candidates_in_set > 0) {
    r.literal_evaluated = true;
    double lam = 0.0;
    if (cov == Coverage::O) {
      for (std::size_t i = 0; i < set.profiles.size(); ++i) lam += set.phi[i] * ideal_joint_error(pq, set.profiles[i]);
    } else {
      lam = ideal_joint_error(pq, set.mix_profile);
    }
    for (std::size_t k = 0; k < nh; ++k) {
      const double slack = lam + src_err[k] + 0.5 * min_d + 0.5 * set.max_pairwise - pq.error[k];
      r.literal_violations += slack < -kSlack;
      r.literal_min_slack = std::min(r.literal_min_slack, slack);
    }
  }
  return r;
}

/// E[theta] for theta ~ Beta(a, a) truncated to [1/2, 1]; equals I_{1/2}(a, a + 1).
inline double truncated_beta_mean(double a) {
  if (!(a > 0.0)) throw ConfigError("truncated_beta_mean: alpha must be > 0");
  const double b = a + 1.0, x = 0.5;
  double term = 1.0, sum = 1.0;
  for (int n = 1; n < 2000; ++n) {
    term *= (a + b + n - 1) / (a + n) * x;
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return std::pow(x, a) * std::pow(1.0 - x, b) / (a * std::beta(a, b)) * sum;
}

struct ShrinkageReport {
  double alpha = 0.0;
  std::size_t trials = 0;
  std::size_t n = 0;
  double theta_mean = 0.0;           // Monte Carlo mean of theta
  double theta_mean_exact = 0.0;
  double theta_mean_z = 0.0;
  std::vector<double> input_mean;    // n x d, Monte Carlo E[x~_i]
  std::vector<double> input_residual;  // n x d, mean delta_i
  std::vector<double> label_residual;  // n x K, mean eps_i
  double max_input_z = 0.0;
  double max_label_z = 0.0;
  std::size_t label_rows_not_unit = 0;  // mixed label rows whose sum is not exactly 1
  bool passed() const { return max_input_z <= 3.0 && max_label_z <= 3.0 && label_rows_not_unit == 0; }
};

namespace detail {

struct Moments {
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  void add(double v) {
    ++n;
    const double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  double se() const { return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0; }
};

inline double z_score(double mean, double se) {
  if (se == 0.0) return mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::abs(mean) / se;
}

}  // namespace detail

/// Monte Carlo check that x~_i = theta x_i + (1 - theta) x_j, theta ~
/// Beta_[1/2,1](a, a), j ~ Unif([n]) averages to xbar + thetabar (x_i - xbar),
/// and likewise for label rows. One (theta, j) draw per trial is shared by
/// every i; thetabar is the Monte Carlo mean of those draws.
inline ShrinkageReport mixup_shrinkage_check(const Tensor& x, const Tensor& y, double alpha, std::size_t trials, Rng& rng,
                                             std::size_t min_trials = 10000) {
  if (trials < min_trials) throw ConfigError("mixup_shrinkage_check: needs at least " + std::to_string(min_trials) + " trials");
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0) || x.dim(0) == 0)
    throw DimensionError("mixup_shrinkage_check: expected x [n,d] and y [n,K] with n > 0");
  const std::size_t n = x.dim(0), d = x.dim(1), k = y.dim(1);
  const BetaParams beta{alpha, std::make_pair(0.5, 1.0)};
  beta.validate();

  std::vector<detail::Moments> mx(n * d), my(n * k);
  detail::Moments th;
  ShrinkageReport r;
  r.alpha = alpha;
  r.trials = trials;
  r.n = n;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t t = 0; t < trials; ++t) {
    const double theta = sample_beta(beta, rng);
    const std::size_t j = pick(rng);
    th.add(theta);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) mx[i * d + c].add(x.at(j, c) + theta * (x.at(i, c) - x.at(j, c)));
      double row = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double v = y.at(j, c) + theta * (y.at(i, c) - y.at(j, c));
        my[i * k + c].add(v);
        row += v;
      }
      r.label_rows_not_unit += row != 1.0;
    }
  }
  r.theta_mean = th.mean;
  r.theta_mean_exact = truncated_beta_mean(alpha);
  r.theta_mean_z = detail::z_score(th.mean - r.theta_mean_exact, th.se());

  auto col_mean = [n](const Tensor& t, std::size_t c) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += t.at(i, c);
    return s / static_cast<double>(n);
  };
  for (std::size_t c = 0; c < d; ++c) {
    const double bar = col_mean(x, c);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = mx[i * d + c];
      const double res = m.mean - (bar + r.theta_mean * (x.at(i, c) - bar));
      r.input_mean.push_back(m.mean);
      r.max_input_z = std::max(r.max_input_z, detail::z_score(res, m.se()));
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    const double bar = col_mean(y, c);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = my[i * k + c];
      const double res = m.mean - (bar + r.theta_mean * (y.at(i, c) - bar));
      r.label_residual.push_back(res);
      r.max_label_z = std::max(r.max_label_z, detail::z_score(res, m.se()));
    }
  }
  // Reorder input residuals to n x d for callers.
  r.input_residual.assign(n * d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    const double bar = col_mean(x, c);
    for (std::size_t i = 0; i < n; ++i)
      r.input_residual[i * d + c] = mx[i * d + c].mean - (bar + r.theta_mean * (x.at(i, c) - bar));
  }
  return r;
}

struct MixupErrorAgreement {
  double all_pairs = 0.0, all_pairs_se = 0.0;  // lambda ~ Beta(a,a), (i, j) uniform over all pairs
  double resampled = 0.0, resampled_se = 0.0;  // theta ~ Beta_[1/2,1](a,a), j ~ Unif([n])
  double z = 0.0;
  bool agree() const { return z <= 3.0; }
};

using Scorer = std::function<std::vector<double>(std::span<const double>)>;

/// Estimates the mixup risk of a fixed scorer under squared loss in both
/// pairing forms, with independent draws, and compares them.
inline MixupErrorAgreement mixup_error_agreement(const Tensor& x, const Tensor& y, const Scorer& h, double alpha,
                                                 std::size_t trials, Rng& rng) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0) || x.dim(0) == 0)
    throw DimensionError("mixup_error_agreement: expected x [n,d] and y [n,K]");
  const std::size_t n = x.dim(0), d = x.dim(1), k = y.dim(1);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  auto loss = [&](std::size_t i, std::size_t j, double l) {
    std::vector<double> xm(d);
    for (std::size_t c = 0; c < d; ++c) xm[c] = l * x.at(i, c) + (1.0 - l) * x.at(j, c);
    const auto out = h(xm);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double e = out.at(c) - (l * y.at(i, c) + (1.0 - l) * y.at(j, c));
      s += e * e;
    }
    return s;
  };
  detail::Moments a, b;
  const BetaParams full{alpha, std::nullopt}, trunc{alpha, std::make_pair(0.5, 1.0)};
  for (std::size_t t = 0; t < trials; ++t) {
    const double l = sample_beta(full, rng);
    const std::size_t i = pick(rng), j = pick(rng);
    a.add(loss(i, j, l));
  }
  for (std::size_t t = 0; t < trials; ++t) {
    const double th = sample_beta(trunc, rng);
    const std::size_t i = pick(rng), j = pick(rng);
    b.add(loss(i, j, th));
  }
  MixupErrorAgreement r{a.mean, a.se(), b.mean, b.se(), 0.0};
  r.z = detail::z_score(a.mean - b.mean, std::hypot(a.se(), b.se()));
  return r;
}

// ---------------------------------------------------------------------------
// Randomized suites

/// Points uniform in a random sub-box of [0,1]^dim, labels from x0 (+ x1) >= tau
/// with a fraction `flip` flipped.
inline EmpiricalDist random_dist(std::size_t dim, std::size_t n, Rng& rng, bool labeled = false, double tau = 0.5,
                                 double flip = 0.1) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> lo(dim), width(dim);
  for (std::size_t c = 0; c < dim; ++c) {
    width[c] = 0.3 + 0.7 * u(rng);
    lo[c] = (1.0 - width[c]) * u(rng);
  }
  std::vector<double> pts(n * dim);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      pts[i * dim + c] = lo[c] + width[c] * u(rng);
      s += pts[i * dim + c];
    }
    if (labeled) {
      int yv = s / static_cast<double>(dim) >= tau ? 1 : 0;
      if (u(rng) < flip) yv = 1 - yv;
      labels.push_back(yv);
    }
  }
  return EmpiricalDist::uniform(dim, std::move(pts), std::move(labels));
}

struct CheckRow {
  std::string suite;
  std::string check;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack() const { return rhs - lhs; }
};

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::size_t checks = 0;
  std::size_t failures = 0;
  std::vector<CheckRow> rows;
  std::vector<std::string> notes;

  void record(const std::string& check, double lhs, double rhs, double tol = kSlack) {
    ++checks;
    rows.push_back({name, check, lhs, rhs});
    if (!(lhs <= rhs + tol)) {
      ++failures;
      passed = false;
    }
  }
};

/// Symmetry, zero on equal inputs, range [0,2] and the triangle inequality for
/// both divergences on random triples.
inline SuiteResult divergence_suite(std::uint64_t seed, std::size_t triples = 100) {
  SuiteResult s;
  s.name = "divergence";
  Rng rng = make_rng(seed, 11);
  const HypothesisClass h1 = threshold_class(linspace(0.0, 1.0, 41));
  const HypothesisClass h2 = quadrant_class(linspace(0.0, 1.0, 11));
  for (std::size_t t = 0; t < triples; ++t) {
    const HypothesisClass& h = t % 2 ? h2 : h1;
    const std::size_t dim = h.dim;
    const auto p = profile(random_dist(dim, 20, rng), h), q = profile(random_dist(dim, 20, rng), h),
               r = profile(random_dist(dim, 20, rng), h);
    const std::string tag = "triple " + std::to_string(t);
    for (int which = 0; which < 2; ++which) {
      auto d = [which](const Profile& a, const Profile& b) { return which ? h_delta_h_divergence(a, b) : h_divergence(a, b); };
      const std::string name = which ? "dHdH " : "dH ";
      const double pq = d(p, q), qp = d(q, p), pr = d(p, r), qr = d(q, r);
      s.record(name + "symmetry " + tag, std::abs(pq - qp), 0.0, 0.0);
      s.record(name + "zero on equal " + tag, d(p, p), 0.0, 0.0);
      // Masses are float sums, so the range ends carry rounding slack.
      s.record(name + "upper range " + tag, pq, 2.0);
      s.record(name + "lower range " + tag, -pq, 0.0);
      s.record(name + "triangle " + tag, pr, pq + qr);
    }
  }
  return s;
}

inline SuiteResult theorem1_suite(std::uint64_t seed, std::size_t instances = 50) {
  SuiteResult s;
  s.name = "theorem1";
  Rng rng = make_rng(seed, 12);
  const HypothesisClass h = threshold_class(linspace(0.0, 1.0, 41));
  std::uniform_real_distribution<double> u(0.3, 0.7);
  for (std::size_t t = 0; t < instances; ++t) {
    const auto p = random_dist(1, 20, rng, true, u(rng)), q = random_dist(1, 20, rng, true, u(rng));
    const auto rep = check_da_bound(p, q, h);
    const auto worst = std::min_element(rep.slack.begin(), rep.slack.end()) - rep.slack.begin();
    ++s.checks;
    s.checks += h.size() - 1;
    s.rows.push_back({s.name, "instance " + std::to_string(t) + " tightest h", rep.lhs[worst], rep.rhs[worst]});
    if (rep.violations) {
      s.failures += rep.violations;
      s.passed = false;
    }
  }
  return s;
}

struct SourceConfig {
  std::vector<EmpiricalDist> sources;
  std::vector<double> phi;
};

inline SourceConfig random_sources(std::size_t m, std::size_t n, Rng& rng, bool labeled) {
  SourceConfig c;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> tau(0.35, 0.65);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    c.sources.push_back(random_dist(2, n, rng, labeled, tau(rng)));
    c.phi.push_back(0.05 + u(rng));
    total += c.phi.back();
  }
  for (double& p : c.phi) p /= total;
  // Renormalize so the weights sum to one within rounding.
  double s = std::accumulate(c.phi.begin(), c.phi.end(), 0.0);
  c.phi.back() += 1.0 - s;
  return c;
}

/// Candidates for S: random distributions plus the sources themselves and
/// their pooled sample, so the coverage sets are never trivially empty.
inline std::vector<EmpiricalDist> candidate_grid(const SourceConfig& cfg, std::size_t count, Rng& rng, bool labeled) {
  std::vector<EmpiricalDist> c;
  for (const auto& s : cfg.sources) c.push_back(s);
  std::vector<double> pooled;
  std::vector<int> pooled_labels;
  for (const auto& s : cfg.sources) {
    pooled.insert(pooled.end(), s.points.begin(), s.points.end());
    pooled_labels.insert(pooled_labels.end(), s.labels.begin(), s.labels.end());
  }
  c.push_back(EmpiricalDist::uniform(2, std::move(pooled), labeled ? std::move(pooled_labels) : std::vector<int>{}));
  std::uniform_real_distribution<double> tau(0.35, 0.65);
  while (c.size() < count) c.push_back(random_dist(2, 10, rng, labeled, tau(rng)));
  return c;
}

inline SuiteResult inclusion_suite(std::uint64_t seed, std::size_t configs = 20, std::size_t candidates = 200) {
  SuiteResult s;
  s.name = "inclusion";
  Rng rng = make_rng(seed, 13);
  const HypothesisClass h = quadrant_class(linspace(0.0, 1.0, 11));
  std::size_t total_o = 0, total_op = 0;
  for (std::size_t c = 0; c < configs; ++c) {
    const SourceConfig sc = random_sources(3, 10, rng, false);
    const auto cand = candidate_grid(sc, candidates, rng, false);
    const SourceSet set(sc.sources, sc.phi, h);
    const auto rep = verify_inclusion(cand, set, h);
    total_o += rep.in_O;
    total_op += rep.in_Oprime;
    const std::string tag = "config " + std::to_string(c);
    s.record(tag + " counterexamples", static_cast<double>(rep.counterexamples.size()), 0.0, 0.0);
    s.record(tag + " |O| <= |O'|", static_cast<double>(rep.in_O), static_cast<double>(rep.in_Oprime), 0.0);
    s.record(tag + " triangle slack", -rep.min_triangle_slack, 0.0);
  }
  s.notes.push_back("|O| total " + std::to_string(total_o) + ", |O'| total " + std::to_string(total_op) + " over " +
                    std::to_string(configs * candidates) + " candidates");
  return s;
}

inline SuiteResult dg_bound_suite(std::uint64_t seed, Coverage cov, std::size_t configs = 20, std::size_t candidates = 200) {
  SuiteResult s;
  s.name = cov == Coverage::O ? "prop2_bound" : "prop4_bound";
  Rng rng = make_rng(seed, cov == Coverage::O ? 14 : 15);
  const HypothesisClass h = quadrant_class(linspace(0.0, 1.0, 11));
  std::uniform_real_distribution<double> tau(0.35, 0.65);
  std::size_t literal_bad = 0, literal_checked = 0, in_set = 0;
  for (std::size_t c = 0; c < configs; ++c) {
    const SourceConfig sc = random_sources(3, 10, rng, true);
    const auto cand = candidate_grid(sc, candidates, rng, true);
    const auto q = random_dist(2, 20, rng, true, tau(rng));
    const SourceSet set(sc.sources, sc.phi, h);
    const auto rep = check_dg_bound(q, set, cand, h, cov);
    in_set += rep.candidates_in_set;
    s.checks += rep.checks;
    s.failures += rep.violations;
    if (rep.violations) s.passed = false;
    if (rep.candidates_in_set)
      s.rows.push_back({s.name, "config " + std::to_string(c) + " tightest (S,h)", -rep.min_slack, 0.0});
    if (rep.literal_evaluated) {
      ++literal_checked;
      literal_bad += rep.literal_violations > 0;
    }
  }
  s.notes.push_back(std::to_string(in_set) + " candidates inside the coverage set");
  s.notes.push_back("single-constant form violated on " + std::to_string(literal_bad) + " of " + std::to_string(literal_checked) +
                    " configurations (informational)");
  return s;
}

inline SuiteResult shrinkage_suite(std::uint64_t seed, const std::vector<double>& alphas = {0.2, 1.0, 2.0},
                                   std::size_t trials = 100000, std::size_t n = 50) {
  SuiteResult s;
  s.name = "shrinkage";
  Rng rng = make_rng(seed, 16);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor x(Shape{n, 2}), y(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    x.at(i, 0) = g(rng);
    x.at(i, 1) = 2.0 + 0.5 * g(rng);
    y.at(i, i % 3) = 1.0;
  }
  for (double a : alphas) {
    const auto rep = mixup_shrinkage_check(x, y, a, trials, rng);
    const std::string tag = "alpha " + std::to_string(a);
    s.record(tag + " input residual z", rep.max_input_z, 3.0, 0.0);
    s.record(tag + " label residual z", rep.max_label_z, 3.0, 0.0);
    s.record(tag + " label rows off unit", static_cast<double>(rep.label_rows_not_unit), 0.0, 0.0);
    s.notes.push_back(tag + ": thetabar " + std::to_string(rep.theta_mean) + " (exact " + std::to_string(rep.theta_mean_exact) + ")");
  }
  return s;
}

inline SuiteResult mixup_error_suite(std::uint64_t seed, const std::vector<double>& alphas = {0.2, 1.0, 2.0},
                                     std::size_t trials = 100000) {
  SuiteResult s;
  s.name = "mixup_error_forms";
  Rng rng = make_rng(seed, 17);
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t n = 30;
  Tensor x(Shape{n, 2}), y(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % 2;
    x.at(i, 0) = g(rng) + (c ? 1.5 : -1.5);
    x.at(i, 1) = g(rng);
    y.at(i, c) = 1.0;
  }
  const Scorer h = [](std::span<const double> v) {
    const double p = 1.0 / (1.0 + std::exp(-(1.3 * v[0] - 0.4 * v[1] + 0.2)));
    return std::vector<double>{1.0 - p, p};
  };
  for (double a : alphas) {
    const auto rep = mixup_error_agreement(x, y, h, a, trials, rng);
    s.record("alpha " + std::to_string(a) + " |z| all-pairs vs resampled", rep.z, 3.0, 0.0);
  }
  return s;
}

inline std::vector<SuiteResult> run_all_suites(std::uint64_t seed) {
  std::vector<SuiteResult> out;
  out.push_back(divergence_suite(seed));
  out.push_back(theorem1_suite(seed));
  out.push_back(dg_bound_suite(seed, Coverage::O));
  out.push_back(dg_bound_suite(seed, Coverage::Oprime));
  out.push_back(inclusion_suite(seed));
  out.push_back(shrinkage_suite(seed));
  out.push_back(mixup_error_suite(seed));
  return out;
}

}  // namespace fixed_dg::bounds
