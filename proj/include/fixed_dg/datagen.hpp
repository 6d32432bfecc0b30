#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fixed_dg/rng.hpp"
#include "fixed_dg/tensor.hpp"

namespace fixed_dg {

struct Domain {
  int id = 0;
  std::string name;
  Tensor samples;  // [N, feature_shape...]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

/// Labeled samples partitioned into domains that share one feature shape and
/// one label space.
struct DomainDataset {
  std::vector<Domain> domains;
  std::size_t num_classes = 0;
  Shape feature_shape;
  std::vector<std::string> class_names;  // optional display names, index = label

  std::size_t num_domains() const { return domains.size(); }

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& d : domains) n += d.size();
    return n;
  }

  const Domain& domain_by_id(int id) const {
    for (const auto& d : domains)
      if (d.id == id) return d;
    throw std::out_of_range("dataset: no domain with id " + std::to_string(id));
  }

  void validate() const {
    for (const auto& d : domains) {
      Shape expect{d.size()};
      expect.insert(expect.end(), feature_shape.begin(), feature_shape.end());
      if (d.samples.shape() != expect)
        throw DimensionError("dataset: domain '" + d.name + "' samples " + shape_str(d.samples.shape()) + ", expected " +
                             shape_str(expect));
      for (int y : d.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
          throw std::invalid_argument("dataset: label " + std::to_string(y) + " outside [0," + std::to_string(num_classes) + ")");
      if (!d.samples.all_finite()) throw NumericError("dataset: non-finite sample in domain '" + d.name + "'");
    }
  }

  /// Copy restricted to the listed domain ids, in the given order.
  DomainDataset select(const std::vector<int>& ids) const {
    DomainDataset out{{}, num_classes, feature_shape, class_names};
    for (int id : ids) out.domains.push_back(domain_by_id(id));
    return out;
  }

  friend bool operator==(const DomainDataset& a, const DomainDataset& b) {
    if (a.num_classes != b.num_classes || a.feature_shape != b.feature_shape || a.domains.size() != b.domains.size())
      return false;
    for (std::size_t i = 0; i < a.domains.size(); ++i) {
      const auto& x = a.domains[i];
      const auto& y = b.domains[i];
      if (x.id != y.id || x.name != y.name || !(x.samples == y.samples) || x.labels != y.labels) return false;
    }
    return true;
  }
};

namespace detail {

inline Domain make_domain(int id, std::string name, const Shape& feature_shape, std::vector<double> values,
                          std::vector<int> labels) {
  Shape s{labels.size()};
  s.insert(s.end(), feature_shape.begin(), feature_shape.end());
  return Domain{id, std::move(name), Tensor(std::move(s), std::move(values)), std::move(labels)};
}

// Normal draw truncated to +-5 sigma so generators have a hard bound.
inline double bounded_normal(std::normal_distribution<double>& nd, Rng& rng) {
  for (;;) {
    const double v = nd(rng);
    if (std::abs(v) <= 5.0 * nd.stddev()) return v;
  }
}

}  // namespace detail

/// Two interleaved half-moons per domain, centered at the origin and rotated
/// by the domain's angle (radians). Each domain draws from its own stream.
inline DomainDataset gen_rotated_moons(std::size_t n_per_domain, const std::vector<double>& rotations, double noise,
                                       std::uint64_t seed) {
  if (rotations.size() < 2) throw std::invalid_argument("gen_rotated_moons: need at least 2 rotations");
  if (n_per_domain < 2) throw std::invalid_argument("gen_rotated_moons: n_per_domain must be >= 2");
  if (!(noise >= 0.0)) throw ConfigError("gen_rotated_moons: noise must be >= 0");
  DomainDataset ds{{}, 2, Shape{2}, {}};
  for (std::size_t d = 0; d < rotations.size(); ++d) {
    Rng rng = make_rng(seed, 1000 + d);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::normal_distribution<double> nd(0.0, noise > 0.0 ? noise : 1.0);
    const double c = std::cos(rotations[d]), s = std::sin(rotations[d]);
    std::vector<double> xs;
    std::vector<int> ys;
    for (std::size_t i = 0; i < n_per_domain; ++i) {
      const int label = i < n_per_domain / 2 ? 0 : 1;
      const double t = angle(rng);
      double x, y;
      if (label == 0) {
        x = std::cos(t) - 0.5;
        y = std::sin(t) - 0.25;
      } else {
        x = 0.5 - std::cos(t);
        y = 0.25 - std::sin(t);
      }
      if (noise > 0.0) {
        x += detail::bounded_normal(nd, rng);
        y += detail::bounded_normal(nd, rng);
      }
      xs.push_back(c * x - s * y);
      xs.push_back(s * x + c * y);
      ys.push_back(label);
    }
    const double deg = rotations[d] * 180.0 / std::numbers::pi;
    ds.domains.push_back(detail::make_domain(static_cast<int>(d), "rot" + std::to_string(static_cast<long>(std::lround(deg))),
                                             ds.feature_shape, std::move(xs), std::move(ys)));
  }
  return ds;
}

/// Isotropic Gaussian clusters; means[d][k] is the mean of class k in
/// domain d. Every domain gets n samples per class.
inline DomainDataset gen_gaussian_domains(const std::vector<std::vector<std::vector<double>>>& means, double sigma,
                                          std::size_t n, std::uint64_t seed) {
  if (means.empty() || means[0].empty() || means[0][0].empty())
    throw std::invalid_argument("gen_gaussian_domains: empty mean specification");
  const std::size_t k = means[0].size(), dim = means[0][0].size();
  for (const auto& dm : means) {
    if (dm.size() != k) throw std::invalid_argument("gen_gaussian_domains: inconsistent class count across domains");
    for (const auto& m : dm)
      if (m.size() != dim) throw std::invalid_argument("gen_gaussian_domains: inconsistent mean dimension");
  }
  if (!(sigma >= 0.0)) throw ConfigError("gen_gaussian_domains: sigma must be >= 0");
  DomainDataset ds{{}, k, Shape{dim}, {}};
  for (std::size_t d = 0; d < means.size(); ++d) {
    Rng rng = make_rng(seed, 2000 + d);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> xs;
    std::vector<int> ys;
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dim; ++j) xs.push_back(means[d][c][j] + sigma * nd(rng));
        ys.push_back(static_cast<int>(c));
      }
    ds.domains.push_back(detail::make_domain(static_cast<int>(d), "gauss" + std::to_string(d), ds.feature_shape,
                                             std::move(xs), std::move(ys)));
  }
  return ds;
}

enum class Waveform { Sine, Square, Sawtooth, Triangle };

inline double waveform_value(Waveform w, double phase) {
  const double two_pi = 2.0 * std::numbers::pi;
  double p = std::fmod(phase, two_pi);
  if (p < 0) p += two_pi;
  const double u = p / two_pi;  // [0, 1)
  switch (w) {
    case Waveform::Sine: return std::sin(phase);
    case Waveform::Square: return u < 0.5 ? 1.0 : -1.0;
    case Waveform::Sawtooth: return 2.0 * u - 1.0;
    case Waveform::Triangle: return u < 0.5 ? 4.0 * u - 1.0 : 3.0 - 4.0 * u;
  }
  return 0.0;
}

struct ClassPrototype {
  double freq = 1.0;  // cycles per sample window
  double amplitude = 1.0;
  Waveform wave = Waveform::Sine;
};

/// Nuisance transform that distinguishes one domain from another.
struct DomainTransform {
  std::vector<double> channel_gain;  // empty: unit gain on every channel
  double phase_offset = 0.0;
  double noise = 0.0;
  double freq_scale = 1.0;
};

struct HarSpec {
  std::vector<ClassPrototype> classes;
  std::vector<DomainTransform> domains;
  std::size_t length = 128;
  std::size_t channels = 3;
  std::size_t n_per_class = 25;
  std::uint64_t seed = 0;
};

/// Multichannel periodic series [N, channels, length]. The class fixes the
/// waveform; each sample gets a uniformly random phase; channel c is shifted
/// by c * pi / channels; the domain applies gain, phase, tempo and noise.
inline DomainDataset gen_synthetic_har(const HarSpec& spec) {
  if (spec.classes.size() < 2) throw std::invalid_argument("gen_synthetic_har: need at least 2 classes");
  if (spec.domains.size() < 2) throw std::invalid_argument("gen_synthetic_har: need at least 2 domains");
  if (spec.length == 0 || spec.channels == 0 || spec.n_per_class == 0)
    throw std::invalid_argument("gen_synthetic_har: length, channels and n_per_class must be positive");
  DomainDataset ds{{}, spec.classes.size(), Shape{spec.channels, spec.length}, {}};
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    const DomainTransform& tr = spec.domains[d];
    if (!tr.channel_gain.empty() && tr.channel_gain.size() != spec.channels)
      throw std::invalid_argument("gen_synthetic_har: channel_gain size must equal channels");
    Rng rng = make_rng(spec.seed, 3000 + d);
    std::uniform_real_distribution<double> phase(0.0, two_pi);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> xs;
    std::vector<int> ys;
    for (std::size_t k = 0; k < spec.classes.size(); ++k) {
      const ClassPrototype& cp = spec.classes[k];
      for (std::size_t i = 0; i < spec.n_per_class; ++i) {
        const double phi = phase(rng);
        for (std::size_t c = 0; c < spec.channels; ++c) {
          const double gain = tr.channel_gain.empty() ? 1.0 : tr.channel_gain[c];
          const double ch_shift = static_cast<double>(c) * std::numbers::pi / static_cast<double>(spec.channels);
          for (std::size_t t = 0; t < spec.length; ++t) {
            const double arg = two_pi * cp.freq * tr.freq_scale * static_cast<double>(t) / static_cast<double>(spec.length) +
                               phi + tr.phase_offset + ch_shift;
            double v = gain * cp.amplitude * waveform_value(cp.wave, arg);
            if (tr.noise > 0.0) v += tr.noise * nd(rng);
            xs.push_back(v);
          }
        }
        ys.push_back(static_cast<int>(k));
      }
    }
    ds.domains.push_back(detail::make_domain(static_cast<int>(d), "har" + std::to_string(d), ds.feature_shape,
                                             std::move(xs), std::move(ys)));
  }
  return ds;
}

struct WindowSpec {
  std::size_t width = 128;
  std::size_t stride = 64;

  bool operator==(const WindowSpec&) const = default;
};

/// Contiguous windows of a [channels, T] series: [num_windows, channels, width]
/// with num_windows = floor((T - width) / stride) + 1.
inline Tensor sliding_window(const Tensor& series, const WindowSpec& spec) {
  if (series.rank() != 2) throw DimensionError("sliding_window: series must be [channels, T], got " + shape_str(series.shape()));
  if (spec.width == 0 || spec.stride == 0) throw ConfigError("sliding_window: width and stride must be >= 1");
  const std::size_t ch = series.dim(0), len = series.dim(1);
  if (len < spec.width)
    throw std::invalid_argument("sliding_window: series length " + std::to_string(len) + " shorter than window " +
                                std::to_string(spec.width) + " (no windows)");
  const std::size_t nw = (len - spec.width) / spec.stride + 1;
  Tensor out(Shape{nw, ch, spec.width});
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t t = 0; t < spec.width; ++t) out[(w * ch + c) * spec.width + t] = series[c * len + w * spec.stride + t];
  return out;
}

/// Windows every [channels, T] sample of a dataset; each window inherits its
/// sample's label.
inline DomainDataset window_dataset(const DomainDataset& ds, const WindowSpec& spec) {
  if (ds.feature_shape.size() != 2) throw DimensionError("window_dataset: samples must be [channels, T]");
  DomainDataset out{{}, ds.num_classes, Shape{ds.feature_shape[0], spec.width}, ds.class_names};
  const std::size_t per = shape_size(ds.feature_shape);
  for (const auto& d : ds.domains) {
    std::vector<double> xs;
    std::vector<int> ys;
    for (std::size_t i = 0; i < d.size(); ++i) {
      Tensor s(ds.feature_shape, std::vector<double>(d.samples.data().begin() + i * per, d.samples.data().begin() + (i + 1) * per));
      Tensor w = sliding_window(s, spec);
      xs.insert(xs.end(), w.data().begin(), w.data().end());
      ys.insert(ys.end(), w.dim(0), d.labels[i]);
    }
    out.domains.push_back(detail::make_domain(d.id, d.name, out.feature_shape, std::move(xs), std::move(ys)));
  }
  return out;
}

struct SplitResult {
  DomainDataset train;
  DomainDataset val;
  std::vector<std::string> warnings;
};

/// Rows of a domain selected by index, preserving the given order.
inline Domain take_rows(const Domain& d, const std::vector<std::size_t>& rows, const Shape& feature_shape) {
  const std::size_t per = shape_size(feature_shape);
  std::vector<double> xs;
  std::vector<int> ys;
  xs.reserve(rows.size() * per);
  for (std::size_t r : rows) {
    xs.insert(xs.end(), d.samples.data().begin() + r * per, d.samples.data().begin() + (r + 1) * per);
    ys.push_back(d.labels[r]);
  }
  return detail::make_domain(d.id, d.name, feature_shape, std::move(xs), std::move(ys));
}

/// Per-domain, class-stratified random split; each class contributes
/// floor(ratio * count) samples to train.
inline SplitResult split_train_val(const DomainDataset& ds, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split_train_val: ratio must lie in (0,1)");
  SplitResult out{{{}, ds.num_classes, ds.feature_shape, ds.class_names}, {{}, ds.num_classes, ds.feature_shape, ds.class_names}, {}};
  for (const auto& d : ds.domains) {
    if (d.size() < 5)
      throw std::invalid_argument("split_train_val: domain '" + d.name + "' has " + std::to_string(d.size()) +
                                  " samples (need >= 5)");
    Rng rng = make_rng(seed, 4000 + static_cast<std::uint64_t>(d.id));
    std::vector<std::size_t> train_rows, val_rows;
    for (std::size_t k = 0; k < ds.num_classes; ++k) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (static_cast<std::size_t>(d.labels[i]) == k) rows.push_back(i);
      if (rows.empty()) continue;
      std::shuffle(rows.begin(), rows.end(), rng);
      const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(rows.size())));
      if (n_train == 0 || n_train == rows.size())
        out.warnings.push_back("domain '" + d.name + "': class " + std::to_string(k) + " has " +
                               std::to_string(rows.size()) + " samples; one side of the split is empty");
      train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
      val_rows.insert(val_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(val_rows.begin(), val_rows.end());
    out.train.domains.push_back(take_rows(d, train_rows, ds.feature_shape));
    out.val.domains.push_back(take_rows(d, val_rows, ds.feature_shape));
  }
  return out;
}

struct LodoSplit {
  std::vector<int> sources;
  int target;
};

/// One configuration per domain: that domain held out, all others sources.
inline std::vector<LodoSplit> leave_one_domain_out_splits(const DomainDataset& ds) {
  if (ds.num_domains() < 2) throw std::invalid_argument("leave-one-domain-out needs at least 2 domains");
  std::vector<LodoSplit> out;
  for (const auto& t : ds.domains) {
    LodoSplit s{{}, t.id};
    for (const auto& d : ds.domains)
      if (d.id != t.id) s.sources.push_back(d.id);
    out.push_back(std::move(s));
  }
  return out;
}

/// Default four-domain, four-class synthetic activity benchmark.
inline HarSpec default_har_spec(std::uint64_t seed, std::size_t length = 64, std::size_t channels = 3,
                                std::size_t n_per_class = 25) {
  HarSpec s;
  s.classes = {{2.0, 1.0, Waveform::Sine}, {2.0, 1.0, Waveform::Square}, {4.0, 1.0, Waveform::Sawtooth},
               {4.0, 1.0, Waveform::Triangle}};
  s.domains = {
      {{1.0, 0.8, 1.2}, 0.0, 0.3, 1.0},
      {{0.7, 1.1, 0.9}, 0.5, 0.4, 1.15},
      {{1.3, 0.9, 0.6}, 1.0, 0.5, 0.85},
      {{0.9, 1.4, 1.0}, 1.5, 0.6, 1.3},
  };
  // The gain pattern repeats across channels beyond the third.
  for (auto& d : s.domains) {
    std::vector<double> g(channels);
    for (std::size_t c = 0; c < channels; ++c) g[c] = d.channel_gain[c % d.channel_gain.size()];
    d.channel_gain = std::move(g);
  }
  s.length = length;
  s.channels = channels;
  s.n_per_class = n_per_class;
  s.seed = seed;
  return s;
}

}  // namespace fixed_dg
