#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <limits>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fixed_dg/autodiff.hpp"
#include "fixed_dg/datagen.hpp"
#include "fixed_dg/losses.hpp"
#include "fixed_dg/mixup.hpp"
#include "fixed_dg/models.hpp"
#include "fixed_dg/optim.hpp"
#include "fixed_dg/rng.hpp"

namespace fixed_dg {

enum class Algorithm {
  ERM,
  Mixup,
  ManifoldMixup,
  DANN,
  CORAL,
  FIX_DANN,
  FIX_CORAL,
  FIXED,
  ERM_Margin,
  DANN_Margin,
  Mixup_Margin,
};

inline constexpr Algorithm kAllAlgorithms[] = {
    Algorithm::ERM,       Algorithm::Mixup,     Algorithm::ManifoldMixup, Algorithm::DANN,
    Algorithm::CORAL,     Algorithm::FIX_DANN,  Algorithm::FIX_CORAL,     Algorithm::FIXED,
    Algorithm::ERM_Margin, Algorithm::DANN_Margin, Algorithm::Mixup_Margin,
};

inline std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::ERM: return "ERM";
    case Algorithm::Mixup: return "Mixup";
    case Algorithm::ManifoldMixup: return "ManifoldMixup";
    case Algorithm::DANN: return "DANN";
    case Algorithm::CORAL: return "CORAL";
    case Algorithm::FIX_DANN: return "FIX_DANN";
    case Algorithm::FIX_CORAL: return "FIX_CORAL";
    case Algorithm::FIXED: return "FIXED";
    case Algorithm::ERM_Margin: return "ERM_Margin";
    case Algorithm::DANN_Margin: return "DANN_Margin";
    case Algorithm::Mixup_Margin: return "Mixup_Margin";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  for (Algorithm a : kAllAlgorithms)
    if (algorithm_name(a) == s) return a;
  throw ConfigError("unknown algorithm '" + s + "'");
}

/// Which ingredients each algorithm combines.
struct AlgorithmTraits {
  bool mix = false;
  MixSite site = MixSite::Bottleneck;
  bool random_layer = false;  // Manifold Mixup
  bool adversarial = false;
  bool coral = false;
  bool margin = false;

  bool needs_multiple_sources() const { return adversarial || coral; }
};

inline AlgorithmTraits traits(Algorithm a) {
  AlgorithmTraits t;
  switch (a) {
    case Algorithm::ERM: break;
    case Algorithm::Mixup: t.mix = true; t.site = MixSite::Input; break;
    case Algorithm::ManifoldMixup: t.mix = true; t.random_layer = true; break;
    case Algorithm::DANN: t.adversarial = true; break;
    case Algorithm::CORAL: t.coral = true; break;
    case Algorithm::FIX_DANN: t.mix = true; t.adversarial = true; break;
    case Algorithm::FIX_CORAL: t.mix = true; t.coral = true; break;
    case Algorithm::FIXED: t.mix = true; t.adversarial = true; t.margin = true; break;
    case Algorithm::ERM_Margin: t.margin = true; break;
    case Algorithm::DANN_Margin: t.adversarial = true; t.margin = true; break;
    case Algorithm::Mixup_Margin: t.mix = true; t.site = MixSite::Input; t.margin = true; break;
  }
  return t;
}

struct ModelConfig {
  BodyKind body = BodyKind::Mlp;
  std::vector<std::size_t> hidden{16, 16};
  std::size_t kernel = 9;
  std::size_t pool = 2;
  std::size_t bottleneck_dim = 64;
  std::size_t disc_hidden = 0;
};

struct AlgorithmConfig {
  Algorithm algorithm = Algorithm::ERM;
  double mixup_alpha = 0.2;
  double adv_eta = 1.0;
  double adv_weight = 1.0;
  MarginConfig margin;
  bool margin_add_ce = false;  // add CE on the mixed branch next to the margin loss
  double coral_weight = 1.0;
  std::size_t epochs = 150;
  std::size_t batch_per_domain = 32;
  AdamConfig optimizer;
  std::uint64_t seed = 0;
  std::optional<double> fixed_lambda;  // overrides the Beta draw

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_per_domain < 1) throw ConfigError("batch_per_domain must be >= 1");
    if (!(mixup_alpha > 0.0)) throw ConfigError("mixup.alpha must be > 0");
    if (!(adv_eta >= 0.0)) throw ConfigError("adv.eta must be >= 0");
    if (fixed_lambda && !(*fixed_lambda >= 0.0 && *fixed_lambda <= 1.0)) throw ConfigError("fixed lambda outside [0,1]");
  }
};

/// A training batch: per-domain blocks stacked in source order.
struct Batch {
  Tensor x;
  std::vector<int> labels;
  std::vector<int> domains;              // source index in [0, M)
  std::vector<std::size_t> domain_offsets;  // M + 1 row offsets
  std::vector<int> domain_ids;           // dataset ids of the rows' domains
};

struct StepOutput {
  Var class_loss;
  std::optional<Var> invariance_loss;
  Var total;
  ForwardPass forward;
  std::optional<MixPlan> plan;
};

/// Records the algorithm's objective for one batch. With a discriminator the
/// objective is  class_loss(G_y(z_mix), y_mix) + w * CE(G_d(R_eta(z)), D).
inline StepOutput build_step(Graph& g, ModelBundle& model, const AlgorithmConfig& cfg, const Batch& batch, Rng& mix_rng) {
  const AlgorithmTraits tr = traits(cfg.algorithm);
  const std::size_t b = batch.labels.size();
  const std::size_t k = model.spec().num_classes;

  std::optional<MixPlan> plan;
  if (tr.mix) {
    MixPlan p;
    p.site = tr.site;
    if (tr.random_layer) {
      std::uniform_int_distribution<std::size_t> layer(0, model.num_blocks());
      const std::size_t l = layer(mix_rng);
      p.site = l == model.num_blocks() ? MixSite::Bottleneck : MixSite::Hidden;
      p.hidden_layer = l;
    }
    p.lambda = cfg.fixed_lambda ? *cfg.fixed_lambda : sample_beta(BetaParams{cfg.mixup_alpha, std::nullopt}, mix_rng);
    p.perm = pair_shuffle(b, mix_rng);
    plan = std::move(p);
  }

  StepOutput out;
  out.forward = model.forward(g, batch.x, Mode::Train, tr.adversarial ? std::optional<double>(cfg.adv_eta) : std::nullopt,
                              plan ? &*plan : nullptr);
  out.plan = plan;
  const ForwardPass& fp = out.forward;

  Tensor targets = one_hot(batch.labels, k);
  std::vector<int> partner_labels = batch.labels;
  if (plan) {
    for (std::size_t i = 0; i < b; ++i) partner_labels[i] = batch.labels[plan->perm[i]];
    targets = detail::mix_label_rows(targets, *plan);
  }

  if (tr.margin) {
    auto head = [&model](Graph& gg, const Var& v) { return model.classify(gg, v); };
    out.class_loss = plan ? mixed_margin_loss(head, fp.classifier_input, batch.labels, partner_labels, plan->lambda, cfg.margin)
                          : large_margin_loss(head, fp.classifier_input, batch.labels, cfg.margin);
    if (cfg.margin_add_ce) out.class_loss = add(out.class_loss, cross_entropy(fp.logits, targets));
  } else {
    out.class_loss = cross_entropy(fp.logits, targets);
  }

  if (tr.adversarial) {
    out.invariance_loss = scale(domain_adv_loss(*fp.domain_logits, batch.domains), cfg.adv_weight);
  } else if (tr.coral) {
    std::vector<Var> per_domain;
    for (std::size_t d = 0; d + 1 < batch.domain_offsets.size(); ++d)
      per_domain.push_back(slice_rows(fp.z, batch.domain_offsets[d], batch.domain_offsets[d + 1]));
    out.invariance_loss = scale(coral_loss(per_domain), cfg.coral_weight);
  }
  out.total = out.invariance_loss ? add(out.class_loss, *out.invariance_loss) : out.class_loss;
  return out;
}

struct EvalResult {
  std::vector<std::pair<int, double>> per_domain;  // (domain id, accuracy)
  double macro = 0.0;
};

inline std::vector<int> predict(const ModelBundle& model, const Tensor& x, std::size_t chunk = 512) {
  std::vector<int> out;
  const std::size_t n = x.dim(0), per = x.row_size();
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    Shape sh = x.shape();
    sh[0] = e - s;
    Tensor part(sh, std::vector<double>(x.data().begin() + s * per, x.data().begin() + e * per));
    Tensor logits = model.predict_logits(part);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < e - s; ++i) {
      const auto row = logits.data().subspan(i * k, k);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

/// Fraction of argmax-correct predictions per domain, plus their mean.
inline EvalResult evaluate(const ModelBundle& model, const DomainDataset& ds) {
  if (ds.domains.empty()) throw std::invalid_argument("evaluate: dataset has no domains");
  EvalResult r;
  for (const auto& d : ds.domains) {
    if (d.size() == 0) throw std::invalid_argument("evaluate: domain '" + d.name + "' is empty");
    const auto pred = predict(model, d.samples);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == d.labels[i];
    r.per_domain.emplace_back(d.id, static_cast<double>(correct) / static_cast<double>(d.size()));
  }
  double s = 0.0;
  for (auto& [id, acc] : r.per_domain) s += acc;
  r.macro = s / static_cast<double>(r.per_domain.size());
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double class_loss = 0.0;
  double invariance_loss = 0.0;
  double total_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RunResult {
  std::string algorithm;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;
  std::optional<int> target_domain;
  std::optional<double> target_accuracy;
  double wall_seconds = 0.0;
  std::vector<int> trained_domain_ids;  // every domain id that appeared in a batch
  std::vector<int> validated_domain_ids;
  std::string config_echo;
};

struct TrainOutput {
  ModelBundle model;  // parameters from the selected epoch
  RunResult result;
};

inline ArchSpec arch_for(const ModelConfig& mc, const DomainDataset& sources) {
  ArchSpec s;
  s.body = mc.body;
  s.input_shape = sources.feature_shape;
  s.hidden = mc.hidden;
  s.kernel = mc.kernel;
  s.pool = mc.pool;
  s.bottleneck_dim = mc.bottleneck_dim;
  s.num_classes = sources.num_classes;
  s.num_domains = std::max<std::size_t>(sources.num_domains(), 1);
  s.disc_hidden = mc.disc_hidden;
  return s;
}

/// Draws `b` rows per source domain from the given per-domain orderings.
inline Batch make_batch(const DomainDataset& sources, const std::vector<std::vector<std::size_t>>& order, std::size_t step,
                        std::size_t b) {
  Batch batch;
  const std::size_t per = shape_size(sources.feature_shape);
  std::vector<double> xs;
  xs.reserve(b * sources.num_domains() * per);
  batch.domain_offsets.push_back(0);
  for (std::size_t d = 0; d < sources.num_domains(); ++d) {
    const Domain& dom = sources.domains[d];
    for (std::size_t r = step * b; r < (step + 1) * b; ++r) {
      const std::size_t row = order[d][r];
      xs.insert(xs.end(), dom.samples.data().begin() + row * per, dom.samples.data().begin() + (row + 1) * per);
      batch.labels.push_back(dom.labels[row]);
      batch.domains.push_back(static_cast<int>(d));
      batch.domain_ids.push_back(dom.id);
    }
    batch.domain_offsets.push_back(batch.labels.size());
  }
  Shape s{batch.labels.size()};
  s.insert(s.end(), sources.feature_shape.begin(), sources.feature_shape.end());
  batch.x = Tensor(std::move(s), std::move(xs));
  return batch;
}

struct StepLosses {
  double class_loss = 0.0;
  double invariance_loss = 0.0;
  double total = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on `sources`, selecting the epoch with the best validation accuracy
/// (earliest on ties). Each step draws batch_per_domain rows from every source
/// domain without replacement; the short remainder of an epoch is dropped.
inline TrainOutput train(const AlgorithmConfig& cfg, const ModelConfig& mc, const DomainDataset& sources,
                         const DomainDataset& val, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const AlgorithmTraits tr = traits(cfg.algorithm);
  if (sources.num_domains() == 0) throw std::invalid_argument("train: no source domains");
  if (tr.needs_multiple_sources() && sources.num_domains() < 2)
    throw std::invalid_argument("train: " + algorithm_name(cfg.algorithm) + " needs at least 2 source domains");
  if (val.total_samples() == 0) throw std::invalid_argument("train: validation set is empty");
  if (tr.margin && sources.num_classes < 2) throw ConfigError("train: margin loss needs at least 2 classes");

  const auto t0 = std::chrono::steady_clock::now();
  ModelBundle model(arch_for(mc, sources), cfg.seed);
  AdamState adam{cfg.optimizer, {}, {}, 0};
  Rng data_rng = make_rng(cfg.seed, 1);
  Rng mix_rng = make_rng(cfg.seed, 2);

  std::size_t min_n = std::numeric_limits<std::size_t>::max();
  for (const auto& d : sources.domains) min_n = std::min(min_n, d.size());
  if (min_n < 2) throw std::invalid_argument("train: every source domain needs at least 2 training samples");
  const std::size_t b = std::min(cfg.batch_per_domain, min_n);
  const std::size_t steps = min_n / b;

  TrainOutput out{model, {}};
  RunResult& rr = out.result;
  rr.algorithm = algorithm_name(cfg.algorithm);
  rr.seed = cfg.seed;
  std::set<int> trained_ids, val_ids;
  double best = -1.0;

  auto params = model.trainable();
  std::vector<Tensor> grads(params.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> order(sources.num_domains());
    for (std::size_t d = 0; d < order.size(); ++d) {
      order[d].resize(sources.domains[d].size());
      std::iota(order[d].begin(), order[d].end(), std::size_t{0});
      std::shuffle(order[d].begin(), order[d].end(), data_rng);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t s = 0; s < steps; ++s) {
      Batch batch = make_batch(sources, order, s, b);
      trained_ids.insert(batch.domain_ids.begin(), batch.domain_ids.end());
      try {
        Graph g;
        StepOutput so = build_step(g, model, cfg, batch, mix_rng);
        if (!std::isfinite(so.total.value().item())) throw NumericError("non-finite loss");
        Gradients gr = g.backward(so.total);
        for (std::size_t i = 0; i < params.size(); ++i) grads[i] = gr.of(*params[i]);
        adam_step(params, grads, adam);
        rec.class_loss += so.class_loss.value().item();
        rec.invariance_loss += so.invariance_loss ? so.invariance_loss->value().item() : 0.0;
        rec.total_loss += so.total.value().item();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(s) + ": " +
                           e.what());
      }
    }
    const double inv_steps = 1.0 / static_cast<double>(steps);
    rec.class_loss *= inv_steps;
    rec.invariance_loss *= inv_steps;
    rec.total_loss *= inv_steps;
    const EvalResult ev = evaluate(model, val);
    for (auto& [id, acc] : ev.per_domain) val_ids.insert(id);
    rec.val_accuracy = ev.macro;
    if (rec.val_accuracy > best) {
      best = rec.val_accuracy;
      rr.selected_epoch = epoch;
      out.model = model;
    }
    rr.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  rr.trained_domain_ids.assign(trained_ids.begin(), trained_ids.end());
  rr.validated_domain_ids.assign(val_ids.begin(), val_ids.end());
  rr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct ExperimentConfig {
  AlgorithmConfig algorithm;
  ModelConfig model;
  double split_ratio = 0.8;
};

struct LodoResult {
  std::vector<RunResult> runs;  // one per held-out domain, in domain order
  double average_target_accuracy = 0.0;
};

/// Runs `jobs` independent tasks on at most `threads` worker threads.
inline void run_parallel(std::size_t jobs, std::size_t threads, const std::function<void(std::size_t)>& task) {
  threads = std::max<std::size_t>(1, std::min(threads, jobs));
  if (threads == 1) {
    for (std::size_t j = 0; j < jobs; ++j) task(j);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t j = next++; j < jobs; j = next++) {
        try {
          task(j);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Holds out each domain in turn: train on the others (8:2 split of each
/// source), report accuracy of the selected model on the held-out domain.
inline LodoResult leave_one_domain_out(const ExperimentConfig& cfg, const DomainDataset& ds, std::size_t threads = 1) {
  const auto splits = leave_one_domain_out_splits(ds);
  LodoResult res;
  res.runs.resize(splits.size());
  run_parallel(splits.size(), threads, [&](std::size_t i) {
    const auto& sp = splits[i];
    const SplitResult tv = split_train_val(ds.select(sp.sources), cfg.split_ratio, cfg.algorithm.seed);
    TrainOutput to = train(cfg.algorithm, cfg.model, tv.train, tv.val);
    to.result.target_domain = sp.target;
    to.result.target_accuracy = evaluate(to.model, ds.select({sp.target})).macro;
    res.runs[i] = std::move(to.result);
  });
  double s = 0.0;
  for (const auto& r : res.runs) s += *r.target_accuracy;
  res.average_target_accuracy = s / static_cast<double>(res.runs.size());
  return res;
}

}  // namespace fixed_dg
