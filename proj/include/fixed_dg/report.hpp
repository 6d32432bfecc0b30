#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixed_dg/trainer.hpp"

namespace fixed_dg {

using nlohmann::json;

inline json epoch_json(const EpochRecord& e) {
  return json{{"type", "epoch"},
              {"epoch", e.epoch},
              {"class_loss", e.class_loss},
              {"invariance_loss", e.invariance_loss},
              {"total_loss", e.total_loss},
              {"val_accuracy", e.val_accuracy}};
}

/// The closing record; its presence marks a run as complete.
inline json final_json(const RunResult& r) {
  json j{{"type", "final"},
         {"algorithm", r.algorithm},
         {"seed", r.seed},
         {"selected_epoch", r.selected_epoch},
         {"epochs", r.epochs.size()},
         {"wall_seconds", r.wall_seconds},
         {"trained_domain_ids", r.trained_domain_ids},
         {"validated_domain_ids", r.validated_domain_ids},
         {"config", r.config_echo}};
  j["target_domain"] = r.target_domain ? json(*r.target_domain) : json(nullptr);
  j["target_accuracy"] = r.target_accuracy ? json(*r.target_accuracy) : json(nullptr);
  return j;
}

/// Appends epoch records as they arrive and the final record at the end.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  }
  void epoch(const EpochRecord& e) { write(epoch_json(e)); }
  void final(const RunResult& r) { write(final_json(r)); }

 private:
  void write(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
  }
  std::ofstream out_;
};

inline void write_run_jsonl(const std::filesystem::path& path, const RunResult& r) {
  JsonlWriter w(path);
  for (const auto& e : r.epochs) w.epoch(e);
  w.final(r);
}

struct RunRecord {
  std::string algorithm;
  std::uint64_t seed = 0;
  int target_domain = -1;
  double target_accuracy = 0.0;
  std::filesystem::path file;
};

/// Reads the final record of a metrics file; nullopt if the run never finished.
inline std::optional<RunRecord> read_run_record(const std::filesystem::path& file) {
  std::ifstream in(file);
  std::string line;
  std::optional<RunRecord> rec;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      break;  // truncated tail of an interrupted run
    }
    if (j.value("type", "") != "final") continue;
    if (j["target_domain"].is_null() || j["target_accuracy"].is_null()) continue;
    rec = RunRecord{j["algorithm"].get<std::string>(), j["seed"].get<std::uint64_t>(), j["target_domain"].get<int>(),
                    j["target_accuracy"].get<double>(), file};
  }
  return rec;
}

inline std::vector<RunRecord> collect_runs(const std::filesystem::path& dir) {
  std::vector<RunRecord> out;
  if (!std::filesystem::exists(dir)) throw std::runtime_error("no such directory '" + dir.string() + "'");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    if (auto r = read_run_record(f)) out.push_back(std::move(*r));
  return out;
}

/// Welford accumulator.
struct RunningStats {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double v) {
    ++n;
    const double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  std::optional<double> stddev() const {
    if (n < 2) return std::nullopt;
    return std::sqrt(m2 / static_cast<double>(n - 1));
  }
};

/// Two-pass mean and sample standard deviation.
inline std::pair<double, std::optional<double>> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_std: empty sample");
  double s = 0.0;
  for (double x : xs) s += x;
  const double m = s / static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, std::nullopt};
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

struct ReportRow {
  std::string algorithm;
  std::string target;  // domain id, or "avg"
  double mean = 0.0;
  std::optional<double> std;
  std::size_t seeds = 0;
};

struct ReportTable {
  std::vector<ReportRow> rows;

  const ReportRow* find(const std::string& algorithm, const std::string& target) const {
    for (const auto& r : rows)
      if (r.algorithm == algorithm && r.target == target) return &r;
    return nullptr;
  }
};

/// One row per (algorithm, held-out domain) over seeds, plus an "avg" row per
/// algorithm whose statistics are taken over the per-seed domain averages.
inline ReportTable build_report(const std::vector<RunRecord>& runs) {
  std::map<std::string, std::map<int, std::vector<double>>> by_target;
  std::map<std::string, std::map<std::uint64_t, std::vector<double>>> by_seed;
  std::vector<std::string> order;
  for (const auto& r : runs) {
    if (!by_target.count(r.algorithm)) order.push_back(r.algorithm);
    by_target[r.algorithm][r.target_domain].push_back(r.target_accuracy);
    by_seed[r.algorithm][r.seed].push_back(r.target_accuracy);
  }
  ReportTable t;
  for (const auto& alg : order) {
    for (const auto& [target, accs] : by_target[alg]) {
      auto [m, s] = mean_std(accs);
      t.rows.push_back({alg, std::to_string(target), m, s, accs.size()});
    }
    std::vector<double> avgs;
    for (const auto& [seed, accs] : by_seed[alg]) avgs.push_back(mean_std(accs).first);
    auto [m, s] = mean_std(avgs);
    t.rows.push_back({alg, "avg", m, s, avgs.size()});
  }
  return t;
}

inline std::string report_csv(const ReportTable& t) {
  std::ostringstream os;
  os << "algorithm,target,accuracy_mean,accuracy_std,seeds\n";
  os << std::setprecision(17);
  for (const auto& r : t.rows) {
    os << r.algorithm << ',' << r.target << ',' << r.mean << ',';
    if (r.std) os << *r.std;
    os << ',' << r.seeds << '\n';
  }
  return os.str();
}

/// Aligned table in percent, one line per algorithm, one column per target.
inline std::string report_text(const ReportTable& t) {
  std::vector<std::string> algs, targets;
  for (const auto& r : t.rows) {
    if (std::find(algs.begin(), algs.end(), r.algorithm) == algs.end()) algs.push_back(r.algorithm);
    if (std::find(targets.begin(), targets.end(), r.target) == targets.end()) targets.push_back(r.target);
  }
  std::stable_partition(targets.begin(), targets.end(), [](const std::string& s) { return s != "avg"; });
  auto cell = [&](const std::string& a, const std::string& tg) {
    const ReportRow* r = t.find(a, tg);
    if (!r) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * r->mean;
    if (r->std) os << " +- " << std::setprecision(2) << 100.0 * *r->std;
    return os.str();
  };
  std::size_t w0 = std::string("algorithm").size();
  for (const auto& a : algs) w0 = std::max(w0, a.size());
  std::vector<std::size_t> w(targets.size());
  for (std::size_t c = 0; c < targets.size(); ++c) {
    w[c] = targets[c].size();
    for (const auto& a : algs) w[c] = std::max(w[c], cell(a, targets[c]).size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w0)) << "algorithm";
  for (std::size_t c = 0; c < targets.size(); ++c) os << "  " << std::right << std::setw(static_cast<int>(w[c])) << targets[c];
  os << '\n';
  for (const auto& a : algs) {
    os << std::left << std::setw(static_cast<int>(w0)) << a;
    for (std::size_t c = 0; c < targets.size(); ++c) os << "  " << std::right << std::setw(static_cast<int>(w[c])) << cell(a, targets[c]);
    os << '\n';
  }
  return os.str();
}

struct Projection {
  std::vector<double> points;        // N x 2
  std::vector<double> explained;     // variance along PC1, PC2
  std::vector<double> components;    // 2 x F loadings
};

/// Top-2 principal components. Each component is signed so that its
/// largest-magnitude loading is positive.
inline Projection pca_2d(const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("pca_2d: expected [N, F], got " + shape_str(features.shape()));
  const std::size_t n = features.dim(0), f = features.dim(1);
  if (n < 3 || f < 2) throw std::invalid_argument("pca_2d: need N >= 3 and F >= 2");
  Eigen::MatrixXd x(n, f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) x(i, j) = features.at(i, j);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  if (cov.trace() <= 0.0) throw std::invalid_argument("pca_2d: all points are identical");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("pca_2d: eigen decomposition failed");
  Projection p;
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = es.eigenvectors().col(static_cast<Eigen::Index>(f) - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.explained.push_back(es.eigenvalues()(static_cast<Eigen::Index>(f) - 1 - c));
    for (std::size_t j = 0; j < f; ++j) p.components.push_back(v(static_cast<Eigen::Index>(j)));
  }
  p.points.resize(n * 2);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 2; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < f; ++j) s += x(i, j) * p.components[c * f + j];
      p.points[i * 2 + c] = s;
    }
  return p;
}

inline std::string scatter_svg(const Projection& p, const std::vector<int>& labels, const std::vector<int>& domains,
                               const std::string& title = "") {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const std::size_t n = p.points.size() / 2;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (std::size_t i = 0; i < n; ++i) {
    x0 = std::min(x0, p.points[2 * i]);
    x1 = std::max(x1, p.points[2 * i]);
    y0 = std::min(y0, p.points[2 * i + 1]);
    y1 = std::max(y1, p.points[2 * i + 1]);
  }
  const double size = 480, pad = 30;
  auto sx = [&](double v) { return pad + (x1 > x0 ? (v - x0) / (x1 - x0) : 0.5) * (size - 2 * pad); };
  auto sy = [&](double v) { return size - pad - (y1 > y0 ? (v - y0) / (y1 - y0) : 0.5) * (size - 2 * pad); };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << pad << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const char* col = colors[static_cast<std::size_t>(labels.at(i)) % 8];
    const double cx = sx(p.points[2 * i]), cy = sy(p.points[2 * i + 1]);
    switch (domains.at(i) % 4) {
      case 0: os << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"3\" fill=\"" << col << "\"/>\n"; break;
      case 1: os << "<rect x=\"" << cx - 3 << "\" y=\"" << cy - 3 << "\" width=\"6\" height=\"6\" fill=\"" << col << "\"/>\n"; break;
      case 2:
        os << "<polygon points=\"" << cx << ',' << cy - 3.5 << ' ' << cx - 3.5 << ',' << cy + 3 << ' ' << cx + 3.5 << ',' << cy + 3
           << "\" fill=\"" << col << "\"/>\n";
        break;
      default:
        os << "<path d=\"M" << cx - 3 << ' ' << cy - 3 << "L" << cx + 3 << ' ' << cy + 3 << "M" << cx - 3 << ' ' << cy + 3 << "L"
           << cx + 3 << ' ' << cy - 3 << "\" stroke=\"" << col << "\" stroke-width=\"1.5\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

/// PCA of the embeddings, written as `<stem>.svg` and `<stem>.csv`.
inline Projection project_embeddings(const Tensor& features, const std::vector<int>& labels, const std::vector<int>& domains,
                                     const std::filesystem::path& stem) {
  if (labels.size() != features.dim(0) || domains.size() != features.dim(0))
    throw DimensionError("project_embeddings: labels/domains must have one entry per row");
  Projection p = pca_2d(features);
  std::ofstream svg(stem.string() + ".svg");
  svg << scatter_svg(p, labels, domains, "PCA of embeddings");
  std::ofstream csv(stem.string() + ".csv");
  csv << "pc1,pc2,label,domain\n" << std::setprecision(17);
  for (std::size_t i = 0; i < labels.size(); ++i)
    csv << p.points[2 * i] << ',' << p.points[2 * i + 1] << ',' << labels[i] << ',' << domains[i] << '\n';
  if (!svg || !csv) throw std::runtime_error("project_embeddings: failed writing '" + stem.string() + "'");
  return p;
}

}  // namespace fixed_dg
