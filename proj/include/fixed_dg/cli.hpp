#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fixed_dg/bounds.hpp"
#include "fixed_dg/config.hpp"
#include "fixed_dg/dataset_csv.hpp"
#include "fixed_dg/report.hpp"
#include "fixed_dg/trainer.hpp"

namespace fixed_dg {

namespace fs = std::filesystem;

/// Worker cap from FIXED_DG_THREADS (default 1).
inline std::size_t thread_cap() {
  if (const char* v = std::getenv("FIXED_DG_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

/// Trains with `target` held out and leaves config.txt, metrics.jsonl and
/// best.ckpt in `dir`.
inline RunResult run_heldout(const RunConfig& cfg, const DomainDataset& ds, int target, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string echo = serialize_config(cfg);
  std::ofstream(dir / "config.txt") << echo;

  std::vector<int> src;
  for (const auto& d : ds.domains)
    if (d.id != target) src.push_back(d.id);
  if (src.size() == ds.domains.size()) throw std::invalid_argument("no domain with id " + std::to_string(target));
  const SplitResult tv = split_train_val(ds.select(src), cfg.data.split_ratio, cfg.algorithm.seed);

  JsonlWriter log(dir / "metrics.jsonl");
  TrainOutput out = train(cfg.algorithm, cfg.model, tv.train, tv.val, [&log](const EpochRecord& e) { log.epoch(e); });
  out.result.config_echo = echo;
  out.result.target_domain = target;
  out.result.target_accuracy = evaluate(out.model, ds.select({target})).macro;
  out.model.save((dir / "best.ckpt").string());
  if (cfg.report.plots) {
    std::vector<double> feats;
    std::vector<int> labels, domains;
    std::size_t f = 0;
    for (const auto& d : ds.domains) {
      const Tensor z = out.model.embed(d.samples);
      f = z.dim(1);
      feats.insert(feats.end(), z.data().begin(), z.data().end());
      labels.insert(labels.end(), d.labels.begin(), d.labels.end());
      domains.insert(domains.end(), d.size(), d.id);
    }
    project_embeddings(Tensor(Shape{labels.size(), f}, std::move(feats)), labels, domains, dir / "embeddings");
  }
  log.final(out.result);
  return out.result;
}

inline std::vector<Algorithm> parse_algorithm_list(const std::string& s) {
  std::vector<Algorithm> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_algorithm(detail::trim(item)));
  if (out.empty()) throw ConfigError("--algorithms: empty list");
  return out;
}

/// Entry point shared by the executable and the tests. Exit codes: 0 success,
/// 1 usage error, 2 runtime failure.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Feature mixup with large margin for domain generalization"};
  app.require_subcommand(1);
  std::string config_path, out_path, algorithms, checkpoint;
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 3;
  std::optional<int> target;

  auto* gen = app.add_subcommand("gen", "write the configured dataset as CSV");
  gen->add_option("--config", config_path, "config file")->required();
  gen->add_option("--out", out_path, "CSV path")->required();
  gen->add_option("--seed", seed, "data seed override");

  auto* trn = app.add_subcommand("train", "train one config; leave-one-domain-out unless --target is given");
  trn->add_option("--config", config_path, "config file")->required();
  trn->add_option("--seed", seed, "training seed override");
  trn->add_option("--out", out_path, "output directory (default: report.out)");
  trn->add_option("--target", target, "held-out domain id");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset");
  ev->add_option("--config", config_path, "config file")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--target", target, "only this domain id");

  auto* bench = app.add_subcommand("bench", "leave-one-domain-out x seeds x algorithms");
  bench->add_option("--config", config_path, "config file")->required();
  bench->add_option("--algorithms", algorithms, "comma-separated list (default: the configured one)");
  bench->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);
  bench->add_option("--seed", seed, "first seed (default: the configured one)");
  bench->add_option("--out", out_path, "output directory (default: report.out)");

  auto* bnd = app.add_subcommand("bounds", "run the numerical bound checks");
  bnd->add_option("--seed", seed, "seed");
  bnd->add_option("--out", out_path, "CSV report path (default: stdout)");

  auto* rep = app.add_subcommand("report", "aggregate finished runs in a directory");
  rep->add_option("--out", out_path, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (*gen) {
      RunConfig cfg = parse_config(config_path);
      if (seed) cfg.data.seed = *seed;
      emit_csv(load_dataset(cfg.data), out_path, cfg.data.layout);
      out << "wrote " << out_path << "\n";
    } else if (*trn) {
      RunConfig cfg = parse_config(config_path);
      if (seed) cfg.algorithm.seed = *seed;
      const fs::path base = out_path.empty() ? fs::path(cfg.report.out) : fs::path(out_path);
      const DomainDataset ds = load_dataset(cfg.data);
      std::vector<int> targets;
      if (target)
        targets.push_back(*target);
      else
        for (const auto& d : ds.domains) targets.push_back(d.id);
      std::vector<RunResult> results(targets.size());
      run_parallel(targets.size(), thread_cap(), [&](std::size_t i) {
        results[i] = run_heldout(cfg, ds, targets[i], base / ("target" + std::to_string(targets[i])));
      });
      double s = 0.0;
      for (const auto& r : results) {
        out << cfg.algorithm.seed << " " << r.algorithm << " target " << *r.target_domain << ": " << *r.target_accuracy << "\n";
        s += *r.target_accuracy;
      }
      out << "average: " << s / static_cast<double>(results.size()) << "\n";
    } else if (*ev) {
      RunConfig cfg = parse_config(config_path);
      const DomainDataset ds = load_dataset(cfg.data);
      const ModelBundle model = ModelBundle::load(checkpoint);
      const EvalResult r = evaluate(model, target ? ds.select({*target}) : ds);
      for (const auto& [id, acc] : r.per_domain) out << "domain " << id << ": " << acc << "\n";
      out << "macro: " << r.macro << "\n";
    } else if (*bench) {
      RunConfig cfg = parse_config(config_path);
      const auto algs = algorithms.empty() ? std::vector<Algorithm>{cfg.algorithm.algorithm} : parse_algorithm_list(algorithms);
      const std::uint64_t first = seed ? *seed : cfg.algorithm.seed;
      const fs::path base = out_path.empty() ? fs::path(cfg.report.out) : fs::path(out_path);
      const DomainDataset ds = load_dataset(cfg.data);
      struct Job {
        Algorithm alg;
        std::uint64_t seed;
        int target;
      };
      std::vector<Job> jobs;
      for (Algorithm a : algs)
        for (std::uint64_t s = first; s < first + seeds; ++s)
          for (const auto& d : ds.domains) jobs.push_back({a, s, d.id});
      std::mutex mu;
      run_parallel(jobs.size(), thread_cap(), [&](std::size_t i) {
        RunConfig c = cfg;
        c.algorithm.algorithm = jobs[i].alg;
        c.algorithm.seed = jobs[i].seed;
        const fs::path dir = base / algorithm_name(jobs[i].alg) / ("seed" + std::to_string(jobs[i].seed)) /
                             ("target" + std::to_string(jobs[i].target));
        const RunResult r = run_heldout(c, ds, jobs[i].target, dir);
        std::lock_guard lock(mu);
        out << r.algorithm << " seed " << r.seed << " target " << *r.target_domain << ": " << *r.target_accuracy << "\n";
      });
      const ReportTable t = build_report(collect_runs(base));
      std::ofstream(base / "report.csv") << report_csv(t);
      out << report_text(t);
    } else if (*bnd) {
      const auto suites = bounds::run_all_suites(seed.value_or(0));
      std::ostringstream csv;
      csv << "suite,check,lhs,rhs,slack\n" << std::setprecision(17);
      bool ok = true;
      for (const auto& s : suites) {
        ok = ok && s.passed;
        for (const auto& r : s.rows) csv << r.suite << ',' << r.check << ',' << r.lhs << ',' << r.rhs << ',' << r.slack() << '\n';
      }
      if (out_path.empty()) {
        out << csv.str();
      } else {
        std::ofstream(out_path) << csv.str();
      }
      for (const auto& s : suites) {
        err << s.name << ": " << (s.passed ? "ok" : "FAILED") << " (" << s.checks << " checks, " << s.failures << " failures)\n";
        for (const auto& n : s.notes) err << "  " << n << "\n";
      }
      return ok ? 0 : 2;
    } else if (*rep) {
      const auto runs = collect_runs(out_path);
      if (runs.empty()) throw std::runtime_error("no finished runs under '" + out_path + "'");
      const ReportTable t = build_report(runs);
      std::ofstream(fs::path(out_path) / "report.csv") << report_csv(t);
      out << report_text(t);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace fixed_dg
