#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sure/autodiff.hpp"
#include "sure/error.hpp"
#include "sure/tensor.hpp"

namespace sure {

/// Widths of a relu MLP: input dim, hidden dims..., feature dim.
struct MLPSpec {
  std::vector<std::size_t> layer_widths;
  // Off leaves the feature layer affine, so a feature vector is never
  // exactly zero from dead units (the cosine head cannot normalize it).
  bool relu_features = true;

  void validate() const {
    if (layer_widths.size() < 2) throw ValidationError("mlp needs at least an input and a feature width");
    for (std::size_t w : layer_widths)
      if (w == 0) throw ValidationError("mlp widths must be >= 1");
  }
  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t feature_dim() const { return layer_widths.back(); }
  std::size_t num_layers() const { return layer_widths.size() - 1; }
};

enum class HeadKind { linear, cosine };

inline const char* to_string(HeadKind h) { return h == HeadKind::cosine ? "cosine" : "linear"; }

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "cosine" || s == "csc") return HeadKind::cosine;
  if (s == "linear") return HeadKind::linear;
  throw ValidationError("head: expected 'cosine' or 'linear', got '" + s + "'");
}

struct ModelSpec {
  MLPSpec backbone;
  HeadKind head = HeadKind::cosine;
  std::size_t num_classes = 10;
  double temperature = 8.0;

  void validate() const {
    backbone.validate();
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ValidationError("tau must be > 0");
  }
};

/// Prototype matrix [K, D] (rows are class prototypes) and temperature.
struct CosineClassifier {
  Tensor prototypes;
  double temperature = 8.0;
};

struct LinearClassifier {
  Tensor weight;  // [K, D]
  Tensor bias;    // [K]
};

/// Ordered, name-unique parameter collection.
class ParameterSet {
public:
  Parameter& add(std::string name, Tensor value, bool trainable = true) {
    for (const auto& p : params_)
      if (p.name == name) throw ValidationError("duplicate parameter name '" + name + "'");
    params_.push_back(Parameter{std::move(name), std::move(value), trainable});
    return params_.back();
  }

  Parameter& get(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw ValidationError("unknown parameter '" + name + "'");
  }
  const Parameter& get(const std::string& name) const { return const_cast<ParameterSet*>(this)->get(name); }

  bool contains(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return true;
    return false;
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      const auto& x = a.params_[i];
      const auto& y = b.params_[i];
      if (x.name != y.name || x.trainable != y.trainable || !(x.value == y.value)) return false;
    }
    return true;
  }

private:
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------
// Differentiable building blocks

struct DenseVars {
  Var weight;  // [out, in]
  Var bias;    // [out]
};

namespace detail {

inline Var to_batch(Var x) {
  if (x.value().rank() == 1) return reshape(x, Shape{1, x.value().size()});
  if (x.value().rank() == 2) return x;
  return reshape(x, Shape{x.value().dim(0), x.value().size() / x.value().dim(0)});
}

inline Var like_input(Var y, bool single) {
  return single ? reshape(y, Shape{y.value().size()}) : y;
}

}  // namespace detail

/// relu(W x + b) for each layer in turn. Accepts one sample [D_in] or a batch [B, D_in].
inline Var forward_features(const std::vector<DenseVars>& layers, Var x, bool relu_features = true) {
  const bool single = x.value().rank() == 1;
  Var h = detail::to_batch(x);
  for (const auto& layer : layers) {
    if (h.value().dim(1) != layer.weight.value().dim(1))
      throw ShapeError("forward_features: input width " + std::to_string(h.value().dim(1)) + " does not match layer width " +
                       std::to_string(layer.weight.value().dim(1)));
    h = add_bias(matmul_nt(h, layer.weight), layer.bias);
    if (&layer != &layers.back() || relu_features) h = relu(h);
  }
  return detail::like_input(h, single);
}

/// tau * cos(f, w_k) for every prototype row w_k.
inline Var cosine_logits(Var prototypes, Var features, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("cosine_logits: temperature must be > 0");
  const bool single = features.value().rank() == 1;
  Var f = detail::to_batch(features);
  if (prototypes.value().rank() != 2 || prototypes.value().dim(1) != f.value().dim(1))
    throw ShapeError("cosine_logits: prototypes " + shape_string(prototypes.shape()) + " vs features " +
                     shape_string(f.shape()));
  Var out = scale(matmul_nt(l2_normalize(f), l2_normalize(prototypes)), temperature);
  return detail::like_input(out, single);
}

inline Var linear_logits(Var weight, Var bias, Var features) {
  const bool single = features.value().rank() == 1;
  Var f = detail::to_batch(features);
  if (weight.value().rank() != 2 || weight.value().dim(1) != f.value().dim(1) || bias.value().rank() != 1 ||
      bias.value().size() != weight.value().dim(0))
    throw ShapeError("linear_logits: weight " + shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()) +
                     ", features " + shape_string(f.shape()));
  return detail::like_input(add_bias(matmul_nt(f, weight), bias), single);
}

inline Tensor cosine_logits(const CosineClassifier& clf, const Tensor& f) {
  Tape t;
  return cosine_logits(t.constant(clf.prototypes), t.constant(f), clf.temperature).value();
}

inline Tensor linear_logits(const LinearClassifier& clf, const Tensor& f) {
  Tape t;
  return linear_logits(t.constant(clf.weight), t.constant(clf.bias), t.constant(f)).value();
}

// ---------------------------------------------------------------------------
// Model

class Model {
public:
  /// Parameters recorded on one tape.
  struct Bound {
    std::vector<DenseVars> layers;
    Var head_weight;
    Var head_bias;  // linear head only
  };

  struct Outputs {
    Var features;
    Var logits;
  };

  Model() = default;

  /// He-normal backbone weights, zero biases. The cosine head gets unit-norm
  /// prototype rows drawn from a standard normal.
  static Model initialize(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto& w = spec.backbone.layer_widths;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      const double sd = std::sqrt(2.0 / static_cast<double>(w[l]));
      Tensor weight(Shape{w[l + 1], w[l]});
      for (double& v : weight.values()) v = sd * normal(rng);
      m.params_.add(layer_name(l, "weight"), std::move(weight));
      m.params_.add(layer_name(l, "bias"), Tensor(Shape{w[l + 1]}, 0.0));
    }
    const std::size_t K = spec.num_classes, D = spec.backbone.feature_dim();
    Tensor head(Shape{K, D});
    if (spec.head == HeadKind::cosine) {
      for (std::size_t k = 0; k < K; ++k) {
        double norm = 0.0;
        while (!(norm > 1e-6)) {
          norm = 0.0;
          for (double& v : head.row(k)) {
            v = normal(rng);
            norm += v * v;
          }
          norm = std::sqrt(norm);
        }
        for (double& v : head.row(k)) v /= norm;
      }
      m.params_.add("head.weight", std::move(head));
    } else {
      const double sd = std::sqrt(1.0 / static_cast<double>(D));
      for (double& v : head.values()) v = sd * normal(rng);
      m.params_.add("head.weight", std::move(head));
      m.params_.add("head.bias", Tensor(Shape{K}, 0.0));
    }
    return m;
  }

  static Model from_parameters(const ModelSpec& spec, ParameterSet params) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    m.params_ = std::move(params);
    m.check_layout();
    return m;
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  /// Records the parameters on `tape`; as constants when no gradient is needed.
  Bound bind(Tape& tape, bool with_grad = true) const {
    auto leaf = [&](const std::string& name) {
      const Parameter& p = params_.get(name);
      return with_grad ? tape.parameter(p) : tape.constant(p.value);
    };
    Bound b;
    for (std::size_t l = 0; l < spec_.backbone.num_layers(); ++l)
      b.layers.push_back(DenseVars{leaf(layer_name(l, "weight")), leaf(layer_name(l, "bias"))});
    b.head_weight = leaf("head.weight");
    if (spec_.head == HeadKind::linear) b.head_bias = leaf("head.bias");
    return b;
  }

  Outputs forward(const Bound& bound, Var x) const {
    Var f = forward_features(bound.layers, x, spec_.backbone.relu_features);
    Var z = spec_.head == HeadKind::cosine ? cosine_logits(bound.head_weight, f, spec_.temperature)
                                           : linear_logits(bound.head_weight, bound.head_bias, f);
    return {f, z};
  }

  /// Logits for a single sample [D_in] or a batch [B, D_in], without gradients.
  Tensor logits(const Tensor& x) const {
    Tape t;
    Bound b = bind(t, false);
    return forward(b, t.constant(x)).logits.value();
  }

  Tensor features(const Tensor& x) const {
    Tape t;
    Bound b = bind(t, false);
    return forward_features(b.layers, t.constant(x), spec_.backbone.relu_features).value();
  }

  static std::string layer_name(std::size_t l, const char* what) {
    return "backbone." + std::to_string(l) + "." + what;
  }

private:
  void check_layout() const {
    const auto& w = spec_.backbone.layer_widths;
    auto expect = [&](const std::string& name, const Shape& shape) {
      if (!params_.contains(name)) throw ValidationError("missing parameter '" + name + "'");
      if (params_.get(name).value.shape() != shape)
        throw ShapeError("parameter '" + name + "' has shape " + shape_string(params_.get(name).value.shape()) +
                         ", expected " + shape_string(shape));
    };
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      expect(layer_name(l, "weight"), Shape{w[l + 1], w[l]});
      expect(layer_name(l, "bias"), Shape{w[l + 1]});
    }
    expect("head.weight", Shape{spec_.num_classes, spec_.backbone.feature_dim()});
    if (spec_.head == HeadKind::linear) expect("head.bias", Shape{spec_.num_classes});
  }

  ModelSpec spec_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   sure-checkpoint 1
//   spec <head> <num_classes> <temperature-hex> <relu_features 0|1> <n_widths> <w0> <w1> ...
//   params <count>
//   param <name> <trainable 0|1> <rank> <d0> ... <d_rank-1>
//   <values as C99 hex floats, whitespace separated>
//   ...
//
// Hex floats make the round trip bitwise.

namespace detail {

inline std::string hex_double(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

inline double parse_hex_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw IoError("checkpoint: bad float token '" + s + "'");
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Model& model) {
  const auto& spec = model.spec();
  os << "sure-checkpoint 1\n";
  os << "spec " << to_string(spec.head) << ' ' << spec.num_classes << ' ' << detail::hex_double(spec.temperature) << ' '
     << (spec.backbone.relu_features ? 1 : 0) << ' ' << spec.backbone.layer_widths.size();
  for (std::size_t w : spec.backbone.layer_widths) os << ' ' << w;
  os << "\nparams " << model.params().size() << '\n';
  for (const auto& p : model.params()) {
    os << "param " << p.name << ' ' << (p.trainable ? 1 : 0) << ' ' << p.value.rank();
    for (std::size_t d : p.value.shape()) os << ' ' << d;
    os << '\n';
    for (std::size_t i = 0; i < p.value.size(); ++i) os << (i ? " " : "") << detail::hex_double(p.value[i]);
    os << '\n';
  }
}

inline Model read_checkpoint(std::istream& is) {
  auto expect_word = [&](const char* word) {
    std::string tok;
    if (!(is >> tok) || tok != word) throw IoError(std::string("checkpoint: expected '") + word + "'");
  };
  expect_word("sure-checkpoint");
  int version = 0;
  if (!(is >> version) || version != 1) throw IoError("checkpoint: unsupported version");
  expect_word("spec");
  ModelSpec spec;
  std::string head, tau;
  std::size_t nw = 0;
  int relu_features = 1;
  if (!(is >> head >> spec.num_classes >> tau >> relu_features >> nw)) throw IoError("checkpoint: malformed spec line");
  spec.backbone.relu_features = relu_features != 0;
  spec.head = parse_head_kind(head);
  spec.temperature = detail::parse_hex_double(tau);
  spec.backbone.layer_widths.resize(nw);
  for (auto& w : spec.backbone.layer_widths)
    if (!(is >> w)) throw IoError("checkpoint: malformed widths");
  expect_word("params");
  std::size_t count = 0;
  if (!(is >> count)) throw IoError("checkpoint: malformed params count");
  ParameterSet params;
  for (std::size_t i = 0; i < count; ++i) {
    expect_word("param");
    std::string name;
    int trainable = 1;
    std::size_t rank = 0;
    if (!(is >> name >> trainable >> rank)) throw IoError("checkpoint: malformed param header");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(is >> d)) throw IoError("checkpoint: malformed shape of '" + name + "'");
    Tensor value(shape);
    for (double& v : value.values()) {
      std::string tok;
      if (!(is >> tok)) throw IoError("checkpoint: truncated values of '" + name + "'");
      v = detail::parse_hex_double(tok);
    }
    params.add(name, std::move(value), trainable != 0);
  }
  return Model::from_parameters(spec, std::move(params));
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_checkpoint(os, model);
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace sure
