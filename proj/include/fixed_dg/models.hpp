#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fixed_dg/autodiff.hpp"
#include "fixed_dg/mixup.hpp"
#include "fixed_dg/rng.hpp"

namespace fixed_dg {

enum class Mode { Train, Eval };

enum class BodyKind { Mlp, Cnn1d };

struct ArchSpec {
  BodyKind body = BodyKind::Mlp;
  Shape input_shape{2};             // [F] for MLP, [C, L] for Cnn1d
  std::vector<std::size_t> hidden{16, 16};  // MLP widths or CNN channels per block
  std::size_t kernel = 9;
  std::size_t pool = 2;
  std::size_t bottleneck_dim = 64;
  std::size_t num_classes = 2;
  std::size_t num_domains = 2;
  std::size_t disc_hidden = 0;      // 0: single linear discriminator

  static ArchSpec cnn_default(std::size_t channels, std::size_t length, std::size_t classes, std::size_t domains) {
    ArchSpec s;
    s.body = BodyKind::Cnn1d;
    s.input_shape = {channels, length};
    s.hidden = {16, 32};
    s.num_classes = classes;
    s.num_domains = domains;
    return s;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string("arch: ") + what + " must be positive");
    };
    positive(bottleneck_dim, "bottleneck_dim");
    positive(num_classes, "num_classes");
    positive(num_domains, "num_domains");
    for (auto h : hidden) positive(h, "hidden width");
    for (auto d : input_shape) positive(d, "input extent");
    if (body == BodyKind::Mlp && input_shape.size() != 1) throw ConfigError("arch: MLP input shape must be [F]");
    if (body == BodyKind::Cnn1d) {
      if (input_shape.size() != 2) throw ConfigError("arch: Cnn1d input shape must be [C, L]");
      positive(kernel, "kernel");
      positive(pool, "pool");
    }
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

namespace detail {

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(static_cast<std::size_t>(std::stoull(item)));
  return out;
}

}  // namespace detail

inline std::string serialize_arch(const ArchSpec& s) {
  std::ostringstream os;
  os << "body=" << (s.body == BodyKind::Mlp ? "mlp" : "cnn1d") << '\n'
     << "input=" << detail::join(s.input_shape) << '\n'
     << "hidden=" << detail::join(s.hidden) << '\n'
     << "kernel=" << s.kernel << '\n'
     << "pool=" << s.pool << '\n'
     << "bottleneck=" << s.bottleneck_dim << '\n'
     << "classes=" << s.num_classes << '\n'
     << "domains=" << s.num_domains << '\n'
     << "disc_hidden=" << s.disc_hidden << '\n';
  return os.str();
}

inline ArchSpec parse_arch(const std::string& text) {
  ArchSpec s;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("arch header: malformed line '" + line + "'");
    std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "body") {
      if (v == "mlp") s.body = BodyKind::Mlp;
      else if (v == "cnn1d") s.body = BodyKind::Cnn1d;
      else throw std::runtime_error("arch header: unknown body '" + v + "'");
    } else if (k == "input") s.input_shape = detail::parse_sizes(v);
    else if (k == "hidden") s.hidden = detail::parse_sizes(v);
    else if (k == "kernel") s.kernel = std::stoull(v);
    else if (k == "pool") s.pool = std::stoull(v);
    else if (k == "bottleneck") s.bottleneck_dim = std::stoull(v);
    else if (k == "classes") s.num_classes = std::stoull(v);
    else if (k == "domains") s.num_domains = std::stoull(v);
    else if (k == "disc_hidden") s.disc_hidden = std::stoull(v);
    else throw std::runtime_error("arch header: unknown key '" + k + "'");
  }
  return s;
}

/// Mixes rows i and perm[i] of an activation batch.
inline Var mix_rows(const Var& x, const MixPlan& plan) {
  if (plan.perm.size() != x.shape().at(0))
    throw DimensionError("mix_rows: permutation of length " + std::to_string(plan.perm.size()) + " for batch " +
                         shape_str(x.shape()));
  return mix_tensors(x, gather_rows(x, plan.perm), plan.lambda);
}

/// Output of one forward pass. `z` is the unmixed bottleneck feature unless
/// mixing happened upstream of it; `classifier_input` is what G_y consumed.
struct ForwardPass {
  Var input;
  std::vector<Var> hidden;  // output of each body block
  Var z;
  Var classifier_input;
  Var logits;
  std::optional<Var> domain_logits;
  std::optional<Var> mixed;  // node produced by the mix, if any
};

/// Feature net + bottleneck + classifier + discriminator with a flat,
/// uniquely named parameter store.
class ModelBundle {
 public:
  ModelBundle() = default;

  explicit ModelBundle(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng = make_rng(seed, 0xA11C);
    std::size_t flat = 0;
    if (spec_.body == BodyKind::Mlp) {
      std::size_t in = spec_.input_shape[0];
      for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        Block b;
        b.lin = linear("body." + std::to_string(i), in, spec_.hidden[i], rng);
        blocks_.push_back(b);
        in = spec_.hidden[i];
      }
      flat = in;
    } else {
      std::size_t ch = spec_.input_shape[0], len = spec_.input_shape[1];
      for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        const std::string pre = "body." + std::to_string(i);
        Block b;
        b.lin = conv(pre, ch, spec_.hidden[i], spec_.kernel, rng);
        b.bn_gamma = add_param(pre + ".bn.gamma", Tensor(Shape{spec_.hidden[i]}, 1.0), true);
        b.bn_beta = add_param(pre + ".bn.beta", Tensor(Shape{spec_.hidden[i]}), true);
        b.bn_mean = add_param(pre + ".bn.running_mean", Tensor(Shape{spec_.hidden[i]}), false);
        b.bn_var = add_param(pre + ".bn.running_var", Tensor(Shape{spec_.hidden[i]}, 1.0), false);
        blocks_.push_back(b);
        ch = spec_.hidden[i];
        len = conv1d_out_len(len, spec_.kernel, {});
        len = len / spec_.pool;
        if (len == 0) throw ConfigError("arch: input length too short for " + std::to_string(i + 1) + " conv blocks");
      }
      flat = ch * len;
    }
    flat_dim_ = flat;
    bottleneck_ = linear("bottleneck", flat, spec_.bottleneck_dim, rng);
    classifier_ = linear("classifier", spec_.bottleneck_dim, spec_.num_classes, rng);
    if (spec_.disc_hidden > 0) {
      disc_.push_back(linear("discriminator.0", spec_.bottleneck_dim, spec_.disc_hidden, rng));
      disc_.push_back(linear("discriminator.1", spec_.disc_hidden, spec_.num_domains, rng));
    } else {
      disc_.push_back(linear("discriminator", spec_.bottleneck_dim, spec_.num_domains, rng));
    }
  }

  const ArchSpec& spec() const { return spec_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  std::size_t flat_dim() const { return flat_dim_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::vector<Parameter*> trainable() {
    std::vector<Parameter*> out;
    for (auto& p : params_)
      if (p.trainable) out.push_back(&p);
    return out;
  }

  const Parameter& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw std::out_of_range("no parameter named '" + name + "'");
  }
  Parameter& param(const std::string& name) { return const_cast<Parameter&>(std::as_const(*this).param(name)); }

  /// Parameters whose name starts with `prefix`.
  std::vector<const Parameter*> head_params(const std::string& prefix) const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    return out;
  }

  /// G_y on features [B, bottleneck_dim].
  Var classify(Graph& g, const Var& z) const { return apply_linear(g, classifier_, z); }

  /// G_d(R_eta(z)).
  Var discriminate(Graph& g, const Var& z, double eta) const {
    Var h = grad_reverse(z, eta);
    for (std::size_t i = 0; i < disc_.size(); ++i) {
      h = apply_linear(g, disc_[i], h);
      if (i + 1 < disc_.size()) h = relu(h);
    }
    return h;
  }

  /// Full forward. With a plan, activations are mixed at the plan's site;
  /// at the bottleneck site z stays unmixed and only G_y sees the mix.
  /// Train mode uses batch statistics and updates the running averages.
  ForwardPass forward(Graph& g, const Tensor& x, Mode mode, std::optional<double> eta = std::nullopt,
                      const MixPlan* plan = nullptr) {
    return forward_impl(g, x, mode, eta, plan, mode == Mode::Train ? &params_ : nullptr);
  }

  ForwardPass forward_eval(Graph& g, const Tensor& x, std::optional<double> eta = std::nullopt) const {
    return forward_impl(g, x, Mode::Eval, eta, nullptr, nullptr);
  }

  /// Eval-mode class logits.
  Tensor predict_logits(const Tensor& x) const {
    Graph g;
    return forward_eval(g, x).logits.value();
  }

  /// Eval-mode bottleneck features.
  Tensor embed(const Tensor& x) const {
    Graph g;
    return forward_eval(g, x).z.value();
  }

  void save(const std::string& path) const;
  static ModelBundle load(const std::string& path);

  friend bool operator==(const ModelBundle& a, const ModelBundle& b) {
    if (!(a.spec_ == b.spec_) || a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i)
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    return true;
  }

 private:
  struct LinearIdx {
    std::size_t weight = 0, bias = 0;
  };
  struct Block {
    LinearIdx lin;  // linear for MLP, conv for Cnn1d
    std::size_t bn_gamma = 0, bn_beta = 0, bn_mean = 0, bn_var = 0;
  };

  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  std::size_t add_param(std::string name, Tensor value, bool trainable) {
    for (const auto& p : params_)
      if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
    params_.push_back(Parameter{std::move(name), std::move(value), trainable});
    return params_.size() - 1;
  }

  static Tensor uniform(Shape s, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = u(rng);
    return t;
  }

  LinearIdx linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    LinearIdx l;
    l.weight = add_param(name + ".weight", uniform(Shape{in, out}, bound, rng), true);
    l.bias = add_param(name + ".bias", uniform(Shape{out}, bound, rng), true);
    return l;
  }

  LinearIdx conv(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k));
    LinearIdx l;
    l.weight = add_param(name + ".conv.weight", uniform(Shape{out_ch, in_ch, k}, bound, rng), true);
    l.bias = add_param(name + ".conv.bias", uniform(Shape{out_ch}, bound, rng), true);
    return l;
  }

  Var apply_linear(Graph& g, const LinearIdx& l, const Var& x) const {
    return add(matmul(x, g.param(params_[l.weight])), g.param(params_[l.bias]));
  }

  // `stats_sink`, when set, receives running-statistic updates (train mode).
  Var apply_block(Graph& g, const Block& b, const Var& x, Mode mode, std::vector<Parameter>* stats_sink) const {
    if (spec_.body == BodyKind::Mlp) return relu(apply_linear(g, b.lin, x));
    Var h = conv1d(x, g.param(params_[b.lin.weight]), g.param(params_[b.lin.bias]));
    Var gamma = g.param(params_[b.bn_gamma]);
    Var beta = g.param(params_[b.bn_beta]);
    if (mode == Mode::Train) {
      BatchStats st;
      h = batch_norm_train(h, gamma, beta, kBnEps, &st);
      if (stats_sink) {
        const double n = static_cast<double>(h.shape()[0] * h.shape()[2]);
        auto rm = (*stats_sink)[b.bn_mean].value.data();
        auto rv = (*stats_sink)[b.bn_var].value.data();
        for (std::size_t c = 0; c < rm.size(); ++c) {
          rm[c] = (1.0 - kBnMomentum) * rm[c] + kBnMomentum * st.mean[c];
          rv[c] = (1.0 - kBnMomentum) * rv[c] + kBnMomentum * st.var[c] * n / (n - 1.0);
        }
      }
    } else {
      h = batch_norm_eval(h, gamma, beta, params_[b.bn_mean].value.data(), params_[b.bn_var].value.data(), kBnEps);
    }
    return max_pool1d(relu(h), spec_.pool);
  }

  ForwardPass forward_impl(Graph& g, const Tensor& x, Mode mode, std::optional<double> eta, const MixPlan* plan,
                           std::vector<Parameter>* stats_sink) const {
    check_input(x);
    if (plan && plan->site == MixSite::Hidden && plan->hidden_layer >= blocks_.size())
      throw std::out_of_range("forward: hidden mix layer " + std::to_string(plan->hidden_layer) + " >= " +
                              std::to_string(blocks_.size()) + " blocks");
    ForwardPass fp;
    Var h = g.constant(x);
    if (plan && plan->site == MixSite::Input) {
      h = mix_rows(h, *plan);
      fp.mixed = h;
    }
    fp.input = h;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      h = apply_block(g, blocks_[i], h, mode, stats_sink);
      if (plan && plan->site == MixSite::Hidden && plan->hidden_layer == i) {
        h = mix_rows(h, *plan);
        fp.mixed = h;
      }
      fp.hidden.push_back(h);
    }
    if (spec_.body == BodyKind::Cnn1d) h = reshape(h, Shape{x.dim(0), flat_dim_});
    fp.z = apply_linear(g, bottleneck_, h);
    fp.classifier_input = fp.z;
    if (plan && plan->site == MixSite::Bottleneck) {
      fp.classifier_input = mix_rows(fp.z, *plan);
      fp.mixed = fp.classifier_input;
    }
    fp.logits = classify(g, fp.classifier_input);
    if (eta) fp.domain_logits = discriminate(g, fp.z, *eta);
    return fp;
  }

  void check_input(const Tensor& x) const {
    Shape expect{x.rank() ? x.dim(0) : 0};
    expect.insert(expect.end(), spec_.input_shape.begin(), spec_.input_shape.end());
    if (x.shape() != expect)
      throw DimensionError("model forward: input " + shape_str(x.shape()) + ", expected [B]" + shape_str(spec_.input_shape));
    if (x.dim(0) == 0) throw DimensionError("model forward: empty batch");
  }

  ArchSpec spec_;
  std::vector<Parameter> params_;
  std::vector<Block> blocks_;
  LinearIdx bottleneck_, classifier_;
  std::vector<LinearIdx> disc_;
  std::size_t flat_dim_ = 0;
};

// Checkpoint layout (all integers little-endian):
//   8 bytes   magic "FXDGCKP1"
//   u32       header length H, then H bytes of arch header text (key=value lines)
//   u32       tensor count N, then per tensor:
//     u32 name length, name bytes, u8 trainable flag, u32 rank, u64 dims[rank],
//     f64 values[prod(dims)] row-major
namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline constexpr char kCheckpointMagic[8] = {'F', 'X', 'D', 'G', 'C', 'K', 'P', '1'};

}  // namespace detail

inline void ModelBundle::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCheckpointMagic, 8);
  const std::string header = serialize_arch(spec_);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put<std::uint8_t>(os, p.trainable ? 1 : 0);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.value.data().data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline ModelBundle ModelBundle::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto hlen = detail::get<std::uint32_t>(is);
  std::string header(hlen, '\0');
  is.read(header.data(), hlen);
  ModelBundle m(parse_arch(header), 0);
  const auto count = detail::get<std::uint32_t>(is);
  if (count != m.params_.size())
    throw std::runtime_error("checkpoint: " + std::to_string(count) + " tensors, architecture expects " +
                             std::to_string(m.params_.size()));
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto nlen = detail::get<std::uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    detail::get<std::uint8_t>(is);
    const auto rank = detail::get<std::uint32_t>(is);
    Shape s;
    for (std::uint32_t r = 0; r < rank; ++r) s.push_back(static_cast<std::size_t>(detail::get<std::uint64_t>(is)));
    Parameter& p = m.param(name);
    if (p.value.shape() != s)
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_str(s) + ", expected " +
                               shape_str(p.value.shape()));
    is.read(reinterpret_cast<char*>(p.value.data().data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor '" + name + "'");
  }
  return m;
}

}  // namespace fixed_dg
