#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fixed_dg/dataset_csv.hpp"
#include "fixed_dg/datagen.hpp"
#include "fixed_dg/trainer.hpp"

namespace fixed_dg {

struct DataConfig {
  std::string source;  // moons | har | csv
  std::string path;
  CsvLayout layout = CsvLayout::Flat;
  std::size_t moons_n = 200;
  std::vector<double> moons_rotations_deg{0.0, 30.0, 60.0, 90.0};
  double moons_noise = 0.1;
  std::size_t har_length = 64;
  std::size_t har_channels = 3;
  std::size_t har_n_per_class = 25;
  bool window = false;
  WindowSpec window_spec;
  double split_ratio = 0.8;
  std::uint64_t seed = 0;

  bool operator==(const DataConfig&) const = default;
};

struct ReportConfig {
  std::string out = "runs";
  bool plots = false;
  bool operator==(const ReportConfig&) const = default;
};

struct RunConfig {
  DataConfig data;
  AlgorithmConfig algorithm;
  ModelConfig model;
  ReportConfig report;

  ExperimentConfig experiment() const { return ExperimentConfig{algorithm, model, data.split_ratio}; }
};

inline bool operator==(const AdamConfig& a, const AdamConfig& b) {
  return a.lr == b.lr && a.weight_decay == b.weight_decay && a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.eps == b.eps;
}

inline bool operator==(const MarginConfig& a, const MarginConfig& b) {
  return a.gamma == b.gamma && a.top_k == b.top_k && a.denom_eps == b.denom_eps;
}

inline bool operator==(const AlgorithmConfig& a, const AlgorithmConfig& b) {
  return a.algorithm == b.algorithm && a.mixup_alpha == b.mixup_alpha && a.adv_eta == b.adv_eta && a.adv_weight == b.adv_weight &&
         a.margin == b.margin && a.margin_add_ce == b.margin_add_ce && a.coral_weight == b.coral_weight && a.epochs == b.epochs &&
         a.batch_per_domain == b.batch_per_domain && a.optimizer == b.optimizer && a.seed == b.seed && a.fixed_lambda == b.fixed_lambda;
}

inline bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.body == b.body && a.hidden == b.hidden && a.kernel == b.kernel && a.pool == b.pool && a.bottleneck_dim == b.bottleneck_dim &&
         a.disc_hidden == b.disc_hidden;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.data == b.data && a.algorithm == b.algorithm && a.model == b.model && a.report == b.report;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

template <class T>
std::string join_list(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>)
      s += fmt_double(xs[i]);
    else
      s += std::to_string(xs[i]);
  }
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::optional<std::string>(const RunConfig&)> get;  // nullopt: omit on serialize
};

// Getters work on a copy so one accessor lambda serves both directions.
template <class T>
Field num(std::function<T&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<T>(k, v); },
          [ref](const RunConfig& c) -> std::optional<std::string> {
            RunConfig copy = c;
            const T v = ref(copy);
            if constexpr (std::is_floating_point_v<T>)
              return fmt_double(v);
            else
              return std::to_string(v);
          }};
}

inline Field flag(std::function<bool&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); },
          [ref](const RunConfig& c) -> std::optional<std::string> {
            RunConfig copy = c;
            return ref(copy) ? "true" : "false";
          }};
}

inline Field text(std::function<std::string&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string&, const std::string& v) { ref(c) = v; },
          [ref](const RunConfig& c) -> std::optional<std::string> {
            RunConfig copy = c;
            const std::string v = ref(copy);
            if (v.empty()) return std::nullopt;
            return v;
          }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["algorithm"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.algorithm.algorithm = parse_algorithm(v); },
                      [](const RunConfig& c) -> std::optional<std::string> { return algorithm_name(c.algorithm.algorithm); }};
    f["seed"] = num<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.algorithm.seed; });
    f["epochs"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.algorithm.epochs; });
    f["batch_per_domain"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.algorithm.batch_per_domain; });
    f["optimizer.lr"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.optimizer.lr; });
    f["optimizer.weight_decay"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.optimizer.weight_decay; });
    f["optimizer.beta1"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.optimizer.beta1; });
    f["optimizer.beta2"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.optimizer.beta2; });
    f["optimizer.eps"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.optimizer.eps; });
    f["mixup.alpha"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.mixup_alpha; });
    f["mixup.fixed_lambda"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.algorithm.fixed_lambda = parse_number<double>(k, v); },
        [](const RunConfig& c) -> std::optional<std::string> {
          if (!c.algorithm.fixed_lambda) return std::nullopt;
          return fmt_double(*c.algorithm.fixed_lambda);
        }};
    f["adv.eta"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.adv_eta; });
    f["adv.weight"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.adv_weight; });
    f["margin.gamma"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.margin.gamma; });
    f["margin.top_k"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.algorithm.margin.top_k; });
    f["margin.eps"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.margin.denom_eps; });
    f["margin.add_ce"] = flag([](RunConfig& c) -> bool& { return c.algorithm.margin_add_ce; });
    f["coral.weight"] = num<double>([](RunConfig& c) -> double& { return c.algorithm.coral_weight; });
    f["model.body"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                         if (v == "mlp")
                           c.model.body = BodyKind::Mlp;
                         else if (v == "cnn")
                           c.model.body = BodyKind::Cnn1d;
                         else
                           throw ConfigError("config key '" + k + "': expected mlp or cnn, got '" + v + "'");
                       },
                       [](const RunConfig& c) -> std::optional<std::string> {
                         return c.model.body == BodyKind::Mlp ? "mlp" : "cnn";
                       }};
    f["model.hidden"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.hidden = parse_list<std::size_t>(k, v); },
                         [](const RunConfig& c) -> std::optional<std::string> { return join_list(c.model.hidden); }};
    f["model.kernel"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.model.kernel; });
    f["model.pool"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.model.pool; });
    f["model.bottleneck"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.model.bottleneck_dim; });
    f["model.disc_hidden"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.model.disc_hidden; });
    f["data.source"] = text([](RunConfig& c) -> std::string& { return c.data.source; });
    f["data.path"] = text([](RunConfig& c) -> std::string& { return c.data.path; });
    f["data.layout"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                          if (v == "flat")
                            c.data.layout = CsvLayout::Flat;
                          else if (v == "long")
                            c.data.layout = CsvLayout::Long;
                          else
                            throw ConfigError("config key '" + k + "': expected flat or long, got '" + v + "'");
                        },
                        [](const RunConfig& c) -> std::optional<std::string> {
                          return c.data.layout == CsvLayout::Flat ? "flat" : "long";
                        }};
    f["data.moons.n"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.data.moons_n; });
    f["data.moons.rotations"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.data.moons_rotations_deg = parse_list<double>(k, v); },
        [](const RunConfig& c) -> std::optional<std::string> { return join_list(c.data.moons_rotations_deg); }};
    f["data.moons.noise"] = num<double>([](RunConfig& c) -> double& { return c.data.moons_noise; });
    f["data.har.length"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.data.har_length; });
    f["data.har.channels"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.data.har_channels; });
    f["data.har.n_per_class"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.data.har_n_per_class; });
    f["data.window.enabled"] = flag([](RunConfig& c) -> bool& { return c.data.window; });
    f["data.window.width"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.data.window_spec.width; });
    f["data.window.stride"] = num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.data.window_spec.stride; });
    f["data.split_ratio"] = num<double>([](RunConfig& c) -> double& { return c.data.split_ratio; });
    f["data.seed"] = num<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.data.seed; });
    f["report.out"] = text([](RunConfig& c) -> std::string& { return c.report.out; });
    f["report.plots"] = flag([](RunConfig& c) -> bool& { return c.report.plots; });
    return f;
  }();
  return table;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  if (c.data.source != "moons" && c.data.source != "har" && c.data.source != "csv")
    throw ConfigError("config key 'data.source': expected moons, har or csv, got '" + c.data.source + "'");
  if (c.data.source == "csv") {
    if (c.data.path.empty()) throw ConfigError("config key 'data.path': required when data.source = csv");
    if (!std::filesystem::exists(c.data.path)) throw ConfigError("config key 'data.path': no such file '" + c.data.path + "'");
  }
  if (!(c.data.split_ratio > 0.0 && c.data.split_ratio < 1.0)) throw ConfigError("config key 'data.split_ratio': must be in (0,1)");
  c.algorithm.validate();
  c.algorithm.margin.validate(2);
}

/// Parses `key = value` lines. `#` starts a comment; `[section]` prefixes the
/// keys that follow with `section.`. Relative data paths resolve against
/// `base_dir`.
inline RunConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  bool saw_algorithm = false;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    const auto& table = detail::fields();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config key '" + key + "' (line " + std::to_string(lineno) + "): unknown key");
    if (seen.count(key))
      throw ConfigError("config key '" + key + "' (line " + std::to_string(lineno) + "): duplicate, first set on line " +
                        std::to_string(seen[key]));
    seen[key] = lineno;
    it->second.set(c, key, value);
    saw_algorithm = saw_algorithm || key == "algorithm";
  }
  if (c.data.source.empty()) throw ConfigError("config key 'data.source': missing required key");
  if (!saw_algorithm) throw ConfigError("config key 'algorithm': missing required key");
  if (!c.data.path.empty() && std::filesystem::path(c.data.path).is_relative() && !base_dir.empty())
    c.data.path = (base_dir / c.data.path).lexically_normal().string();
  validate(c);
  return c;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.parent_path());
}

/// Writes every key with its value; parse_config_text of the result yields an
/// equal config.
inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::fields())
    if (auto v = field.get(c)) out += key + " = " + *v + "\n";
  return out;
}

/// Builds the dataset a config describes.
inline DomainDataset load_dataset(const DataConfig& d) {
  DomainDataset ds;
  if (d.source == "moons") {
    std::vector<double> rad;
    for (double deg : d.moons_rotations_deg) rad.push_back(deg * std::numbers::pi / 180.0);
    ds = gen_rotated_moons(d.moons_n, rad, d.moons_noise, d.seed);
  } else if (d.source == "har") {
    ds = gen_synthetic_har(default_har_spec(d.seed, d.har_length, d.har_channels, d.har_n_per_class));
  } else if (d.source == "csv") {
    ds = load_csv(d.path, CsvSchema{d.layout, "domain", "label", std::nullopt});
  } else {
    throw ConfigError("config key 'data.source': unknown source '" + d.source + "'");
  }
  if (d.window) ds = window_dataset(ds, d.window_spec);
  return ds;
}

}  // namespace fixed_dg
