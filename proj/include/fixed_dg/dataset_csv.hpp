#pragma once

// CSV ingestion and export.
//
// Flat layout: header `domain,label,f0,f1,...,f{n-1}`, one sample per row.
// Long layout: header `domain,label,c,t,value`, one cell of a [C, T] series
// per row. A new sample starts at every row with c == 0 and t == 0; each
// sample must cover the full C x T grid exactly once.
//
// Domains are numbered in order of first appearance. Labels are remapped to
// dense indices in sorted order (numeric when every label parses as a number)
// and the original spellings are kept as class names.

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixed_dg/datagen.hpp"

namespace fixed_dg {

class CsvError : public std::runtime_error {
 public:
  CsvError(std::size_t line, const std::string& msg)
      : std::runtime_error("csv line " + std::to_string(line) + ": " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class CsvLayout { Flat, Long };

struct CsvSchema {
  CsvLayout layout = CsvLayout::Flat;
  std::string domain_column = "domain";
  std::string label_column = "label";
  // Flat layout only: reshape each row's features, e.g. [C, L] for a
  // flattened window stored channel-major.
  std::optional<Shape> feature_shape;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_number(const std::string& s, std::size_t line, const std::string& col) {
  if (s.empty()) throw CsvError(line, "empty value in column '" + col + "'");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) throw CsvError(line, "non-numeric value '" + s + "' in column '" + col + "'");
  if (!std::isfinite(v)) throw CsvError(line, "non-finite value '" + s + "' in column '" + col + "'");
  return v;
}

inline std::size_t parse_index(const std::string& s, std::size_t line, const std::string& col) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw CsvError(line, "expected a nonnegative integer in column '" + col + "', got '" + s + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Sorted label order: numeric if all labels parse as numbers.
inline std::vector<std::string> order_labels(const std::set<std::string>& raw) {
  std::vector<std::string> names(raw.begin(), raw.end());
  bool numeric = true;
  for (const auto& n : names) {
    char* end = nullptr;
    std::strtod(n.c_str(), &end);
    if (n.empty() || end != n.c_str() + n.size()) numeric = false;
  }
  if (numeric)
    std::stable_sort(names.begin(), names.end(),
                     [](const std::string& a, const std::string& b) { return std::strtod(a.c_str(), nullptr) < std::strtod(b.c_str(), nullptr); });
  return names;
}

struct RawSample {
  std::string domain;
  std::string label;
  std::vector<double> values;
};

inline DomainDataset assemble(const std::vector<RawSample>& rows, const Shape& feature_shape) {
  std::vector<std::string> domain_order;
  std::set<std::string> labels;
  for (const auto& r : rows) {
    if (std::find(domain_order.begin(), domain_order.end(), r.domain) == domain_order.end()) domain_order.push_back(r.domain);
    labels.insert(r.label);
  }
  DomainDataset ds;
  ds.class_names = order_labels(labels);
  ds.num_classes = ds.class_names.size();
  ds.feature_shape = feature_shape;
  std::map<std::string, int> label_index;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) label_index[ds.class_names[i]] = static_cast<int>(i);
  for (std::size_t d = 0; d < domain_order.size(); ++d) {
    std::vector<double> xs;
    std::vector<int> ys;
    for (const auto& r : rows)
      if (r.domain == domain_order[d]) {
        xs.insert(xs.end(), r.values.begin(), r.values.end());
        ys.push_back(label_index.at(r.label));
      }
    ds.domains.push_back(make_domain(static_cast<int>(d), domain_order[d], feature_shape, std::move(xs), std::move(ys)));
  }
  return ds;
}

}  // namespace detail

inline DomainDataset parse_csv(std::istream& in, const CsvSchema& schema = {}) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw CsvError(1, "missing header row");
  const auto header = detail::split_csv_line(line);
  const std::size_t ncol = header.size();
  std::optional<std::size_t> dom_col, lab_col, c_col, t_col, v_col;
  std::vector<std::optional<std::size_t>> feat_cols;  // feature index -> column
  for (std::size_t c = 0; c < ncol; ++c) {
    const std::string& h = header[c];
    auto claim = [&](std::optional<std::size_t>& slot) {
      if (slot) throw CsvError(1, "duplicate column '" + h + "'");
      slot = c;
    };
    if (h == schema.domain_column) claim(dom_col);
    else if (h == schema.label_column) claim(lab_col);
    else if (schema.layout == CsvLayout::Long && h == "c") claim(c_col);
    else if (schema.layout == CsvLayout::Long && h == "t") claim(t_col);
    else if (schema.layout == CsvLayout::Long && h == "value") claim(v_col);
    else if (schema.layout == CsvLayout::Flat && h.size() > 1 && h[0] == 'f' &&
             std::all_of(h.begin() + 1, h.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
      const auto idx = static_cast<std::size_t>(std::stoull(h.substr(1)));
      if (idx >= feat_cols.size()) feat_cols.resize(idx + 1);
      if (feat_cols[idx]) throw CsvError(1, "duplicate column '" + h + "'");
      feat_cols[idx] = c;
    } else {
      throw CsvError(1, "unknown column '" + h + "'");
    }
  }
  if (!dom_col) throw CsvError(1, "missing column '" + schema.domain_column + "'");
  if (!lab_col) throw CsvError(1, "missing column '" + schema.label_column + "'");

  std::vector<detail::RawSample> samples;
  Shape feature_shape;

  if (schema.layout == CsvLayout::Flat) {
    if (feat_cols.empty()) throw CsvError(1, "no feature columns f0..fN");
    for (std::size_t i = 0; i < feat_cols.size(); ++i)
      if (!feat_cols[i]) throw CsvError(1, "feature columns are not contiguous: f" + std::to_string(i) + " missing");
    feature_shape = schema.feature_shape.value_or(Shape{feat_cols.size()});
    if (shape_size(feature_shape) != feat_cols.size())
      throw CsvError(1, "feature shape " + shape_str(feature_shape) + " does not match " + std::to_string(feat_cols.size()) +
                            " feature columns");
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      auto f = detail::split_csv_line(line);
      if (f.size() != ncol)
        throw CsvError(lineno, "row has " + std::to_string(f.size()) + " fields, header has " + std::to_string(ncol));
      detail::RawSample s{f[*dom_col], f[*lab_col], {}};
      if (s.domain.empty() || s.label.empty()) throw CsvError(lineno, "empty domain or label");
      for (std::size_t i = 0; i < feat_cols.size(); ++i) s.values.push_back(detail::parse_number(f[*feat_cols[i]], lineno, header[*feat_cols[i]]));
      samples.push_back(std::move(s));
    }
  } else {
    if (!c_col || !t_col || !v_col) throw CsvError(1, "long layout needs columns c, t and value");
    struct Cell {
      std::size_t c, t;
      double v;
    };
    struct Pending {
      std::string domain, label;
      std::vector<Cell> cells;
      std::size_t first_line;
    };
    std::vector<Pending> pending;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      auto f = detail::split_csv_line(line);
      if (f.size() != ncol)
        throw CsvError(lineno, "row has " + std::to_string(f.size()) + " fields, header has " + std::to_string(ncol));
      const std::size_t c = detail::parse_index(f[*c_col], lineno, "c");
      const std::size_t t = detail::parse_index(f[*t_col], lineno, "t");
      const double v = detail::parse_number(f[*v_col], lineno, "value");
      if (c == 0 && t == 0) pending.push_back(Pending{f[*dom_col], f[*lab_col], {}, lineno});
      if (pending.empty()) throw CsvError(lineno, "series must start at c=0,t=0");
      if (pending.back().domain != f[*dom_col] || pending.back().label != f[*lab_col])
        throw CsvError(lineno, "domain/label changed inside a series");
      pending.back().cells.push_back(Cell{c, t, v});
    }
    std::size_t nc = 0, nt = 0;
    for (const auto& p : pending)
      for (const auto& cell : p.cells) {
        nc = std::max(nc, cell.c + 1);
        nt = std::max(nt, cell.t + 1);
      }
    feature_shape = Shape{nc, nt};
    for (const auto& p : pending) {
      if (p.cells.size() != nc * nt)
        throw CsvError(p.first_line, "series has " + std::to_string(p.cells.size()) + " cells, expected " + std::to_string(nc * nt));
      detail::RawSample s{p.domain, p.label, std::vector<double>(nc * nt, 0.0)};
      std::vector<char> seen(nc * nt, 0);
      for (const auto& cell : p.cells) {
        const std::size_t k = cell.c * nt + cell.t;
        if (seen[k]) throw CsvError(p.first_line, "duplicate cell c=" + std::to_string(cell.c) + ",t=" + std::to_string(cell.t));
        seen[k] = 1;
        s.values[k] = cell.v;
      }
      samples.push_back(std::move(s));
    }
  }
  if (samples.empty()) throw CsvError(lineno, "no data rows");
  return detail::assemble(samples, feature_shape);
}

inline DomainDataset load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  return parse_csv(in, schema);
}

inline void write_csv(std::ostream& os, const DomainDataset& ds, CsvLayout layout = CsvLayout::Flat) {
  auto label_name = [&](int y) { return ds.class_names.empty() ? std::to_string(y) : ds.class_names.at(static_cast<std::size_t>(y)); };
  const std::size_t per = shape_size(ds.feature_shape);
  if (layout == CsvLayout::Flat) {
    os << "domain,label";
    for (std::size_t j = 0; j < per; ++j) os << ",f" << j;
    os << '\n';
    for (const auto& d : ds.domains)
      for (std::size_t i = 0; i < d.size(); ++i) {
        os << d.name << ',' << label_name(d.labels[i]);
        for (std::size_t j = 0; j < per; ++j) os << ',' << detail::format_double(d.samples[i * per + j]);
        os << '\n';
      }
    return;
  }
  if (ds.feature_shape.size() != 2) throw DimensionError("write_csv: long layout needs [C, T] samples");
  const std::size_t nc = ds.feature_shape[0], nt = ds.feature_shape[1];
  os << "domain,label,c,t,value\n";
  for (const auto& d : ds.domains)
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t t = 0; t < nt; ++t)
          os << d.name << ',' << label_name(d.labels[i]) << ',' << c << ',' << t << ','
             << detail::format_double(d.samples[i * per + c * nt + t]) << '\n';
}

inline void emit_csv(const DomainDataset& ds, const std::string& path, CsvLayout layout = CsvLayout::Flat) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("emit_csv: cannot open " + path);
  write_csv(os, ds, layout);
}

}  // namespace fixed_dg
