#pragma once

// Experiment configuration: a flat `key = value` text file. Every key can be
// overridden on the command line with `--key value`. Lines starting with '#'
// are comments.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sure/data.hpp"
#include "sure/error.hpp"
#include "sure/model.hpp"
#include "sure/reweight.hpp"

namespace sure {

struct ExperimentConfig {
  // dataset
  std::string dataset = "blobs";  // blobs | moons | cifar10
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double sigma_gap = 4.0;
  double moons_noise = 0.3;
  std::string cifar_train;
  std::string cifar_test;
  std::size_t cifar_limit = 0;  // 0 = use every record
  std::vector<std::size_t> input_shape;  // grid view for blur, e.g. 4,4
  double long_tail_if = 1.0;
  double noise_rate = 0.0;
  std::vector<CorruptionSpec> corruptions;
  double val_fraction = 0.1;
  bool split_before_long_tail = false;

  // model
  std::vector<std::size_t> hidden = {64, 32};
  bool relu_features = false;
  HeadKind head = HeadKind::cosine;
  double tau = 8.0;

  // loss
  double lambda_mix = 1.0;
  double lambda_crl = 1.0;
  double beta = 10.0;
  bool crl_on_mixup = false;

  // optimization
  double lr = 0.1;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool decay_prototypes = true;
  double rho = 0.05;
  int epochs = 100;
  int swa_start = 60;
  double swa_lr = 0.05;
  std::size_t batch_size = 128;

  // second stage
  bool reweight = false;
  ReweightKind reweight_map = ReweightKind::exp;
  double reweight_param = 1.0;
  int reweight_epochs = 25;
  double reweight_lr = 5e-3;

  // run
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string selection = "val_aurc";  // val_aurc | final
  std::string run_id = "run";

  bool swa_enabled() const { return swa_start < epochs; }
  bool sam_enabled() const { return rho > 0.0; }

  /// Throws ValidationError naming the first offending field.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ValidationError(field + ": " + why); };
    auto finite = [](double v) { return std::isfinite(v); };
    if (dataset != "blobs" && dataset != "moons" && dataset != "cifar10") fail("dataset", "expected blobs, moons or cifar10");
    if (num_classes < 2) fail("num_classes", "must be >= 2");
    if (dataset == "moons" && num_classes != 2) fail("num_classes", "moons has exactly 2 classes");
    if (dataset == "cifar10" && num_classes != 10) fail("num_classes", "cifar10 has exactly 10 classes");
    if (dataset == "cifar10" && cifar_train.empty()) fail("cifar_train", "required for dataset = cifar10");
    if (dim < 1) fail("dim", "must be >= 1");
    if (train_per_class < 1) fail("train_per_class", "must be >= 1");
    if (test_per_class < 1) fail("test_per_class", "must be >= 1");
    if (!(sigma_gap >= 0.0) || !finite(sigma_gap)) fail("sigma_gap", "must be finite and >= 0");
    if (!(moons_noise >= 0.0) || !finite(moons_noise)) fail("moons_noise", "must be finite and >= 0");
    if (!input_shape.empty()) {
      std::size_t n = 1;
      for (std::size_t d : input_shape) n *= d;
      if (n == 0) fail("input_shape", "dimensions must be >= 1");
      if (dataset == "blobs" && n != dim) fail("input_shape", "product must equal dim");
    }
    if (!(long_tail_if >= 1.0) || !finite(long_tail_if)) fail("long_tail_if", "must be >= 1");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) fail("noise_rate", "must lie in [0, 1]");
    for (const auto& c : corruptions)
      if (c.severity < 1 || c.severity > 5) fail("corruptions", "severity must lie in 1..5");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction", "must lie in (0, 1)");
    for (std::size_t h : hidden)
      if (h < 1) fail("hidden", "widths must be >= 1");
    if (!(tau > 0.0) || !finite(tau)) fail("tau", "must be > 0");
    if (!(lambda_mix >= 0.0) || !finite(lambda_mix)) fail("lambda_mix", "must be finite and >= 0");
    if (!(lambda_crl >= 0.0) || !finite(lambda_crl)) fail("lambda_crl", "must be finite and >= 0");
    if (!(beta > 0.0) || !finite(beta)) fail("beta", "must be > 0");
    if (!(lr > 0.0) || !finite(lr)) fail("lr", "must be > 0");
    if (!(lr_min >= 0.0) || !(lr_min <= lr)) fail("lr_min", "must lie in [0, lr]");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !finite(weight_decay)) fail("weight_decay", "must be finite and >= 0");
    if (!(rho >= 0.0) || !finite(rho)) fail("rho", "must be finite and >= 0");
    if (epochs < 1) fail("epochs", "must be >= 1");
    if (swa_start < 0) fail("swa_start", "must be >= 0");
    if (!(swa_lr > 0.0) || !finite(swa_lr)) fail("swa_lr", "must be > 0");
    if (batch_size < 2) fail("batch_size", "must be >= 2");
    try {
      ReweightMap{reweight_map, reweight_param}.validate();
    } catch (const ValidationError& e) {
      fail("reweight_param", e.what());
    }
    if (reweight_epochs < 0) fail("reweight_epochs", "must be >= 0");
    if (!(reweight_lr > 0.0) || !finite(reweight_lr)) fail("reweight_lr", "must be > 0");
    if (selection != "val_aurc" && selection != "final") fail("selection", "expected val_aurc or final");
    if (run_id.empty() || run_id.find_first_of(" \t\n,/") != std::string::npos)
      fail("run_id", "must be non-empty without spaces, commas or slashes");
  }

  /// Every key with its current value, in a stable order.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  /// Sets one key from its text form; unknown keys and bad values throw.
  void set(const std::string& key, const std::string& value);
  static const std::vector<std::string>& keys();
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, sep)) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  const long long d = parse_int(key, v);
  if (d < 0) throw ValidationError(key + ": must be >= 0");
  return static_cast<std::size_t>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ValidationError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& t : split(v, ',')) out.push_back(parse_size(key, t));
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// "all", "none" or a comma list of kind:severity / kind (all severities).
inline std::vector<CorruptionSpec> parse_corruptions(const std::string& v) {
  std::vector<CorruptionSpec> out;
  if (v.empty() || v == "none") return out;
  auto all_sev = [&](CorruptionKind k) {
    for (int s = 1; s <= 5; ++s) out.push_back({k, s});
  };
  if (v == "all") {
    for (CorruptionKind k : kAllCorruptions) all_sev(k);
    return out;
  }
  for (const auto& item : split(v, ',')) {
    const auto colon = item.find(':');
    const CorruptionKind k = parse_corruption_kind(item.substr(0, colon));
    if (colon == std::string::npos) {
      all_sev(k);
    } else {
      const long long s = parse_int("corruptions", item.substr(colon + 1));
      if (s < 1 || s > 5) throw ValidationError("corruptions: severity must lie in 1..5");
      out.push_back({k, static_cast<int>(s)});
    }
  }
  return out;
}

inline std::string format_corruptions(const std::vector<CorruptionSpec>& cs) {
  if (cs.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < cs.size(); ++i) s += (i ? "," : "") + std::string(to_string(cs[i].kind)) + ":" + std::to_string(cs[i].severity);
  return s;
}

struct ConfigField {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, ConfigField>> fields = [] {
    std::vector<std::pair<std::string, ConfigField>> f;
    auto dbl = [&](const char* key, double C::*m) {
      f.push_back({key, {[m](const C& c) { return fmt_double(c.*m); },
                         [m](C& c, const std::string& k, const std::string& v) { c.*m = parse_double(k, v); }}});
    };
    auto sz = [&](const char* key, std::size_t C::*m) {
      f.push_back({key, {[m](const C& c) { return std::to_string(c.*m); },
                         [m](C& c, const std::string& k, const std::string& v) { c.*m = parse_size(k, v); }}});
    };
    auto integer = [&](const char* key, int C::*m) {
      f.push_back({key, {[m](const C& c) { return std::to_string(c.*m); },
                         [m](C& c, const std::string& k, const std::string& v) {
                           const long long x = parse_int(k, v);
                           if (x < -1000000000LL || x > 1000000000LL) throw ValidationError(k + ": out of range");
                           c.*m = static_cast<int>(x);
                         }}});
    };
    auto boolean = [&](const char* key, bool C::*m) {
      f.push_back({key, {[m](const C& c) { return std::string(c.*m ? "true" : "false"); },
                         [m](C& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); }}});
    };
    auto str = [&](const char* key, std::string C::*m) {
      f.push_back({key, {[m](const C& c) { return c.*m; },
                         [m](C& c, const std::string&, const std::string& v) { c.*m = v; }}});
    };
    str("dataset", &C::dataset);
    sz("num_classes", &C::num_classes);
    sz("dim", &C::dim);
    sz("train_per_class", &C::train_per_class);
    sz("test_per_class", &C::test_per_class);
    dbl("sigma_gap", &C::sigma_gap);
    dbl("moons_noise", &C::moons_noise);
    str("cifar_train", &C::cifar_train);
    str("cifar_test", &C::cifar_test);
    sz("cifar_limit", &C::cifar_limit);
    f.push_back({"input_shape", {[](const C& c) { return join_sizes(c.input_shape); },
                                 [](C& c, const std::string& k, const std::string& v) { c.input_shape = parse_sizes(k, v); }}});
    dbl("long_tail_if", &C::long_tail_if);
    dbl("noise_rate", &C::noise_rate);
    f.push_back({"corruptions", {[](const C& c) { return format_corruptions(c.corruptions); },
                                 [](C& c, const std::string&, const std::string& v) { c.corruptions = parse_corruptions(v); }}});
    dbl("val_fraction", &C::val_fraction);
    boolean("split_before_long_tail", &C::split_before_long_tail);
    f.push_back({"hidden", {[](const C& c) { return join_sizes(c.hidden); },
                            [](C& c, const std::string& k, const std::string& v) { c.hidden = parse_sizes(k, v); }}});
    f.push_back({"head", {[](const C& c) { return std::string(to_string(c.head)); },
                          [](C& c, const std::string&, const std::string& v) { c.head = parse_head_kind(v); }}});
    boolean("relu_features", &C::relu_features);
    dbl("tau", &C::tau);
    dbl("lambda_mix", &C::lambda_mix);
    dbl("lambda_crl", &C::lambda_crl);
    dbl("beta", &C::beta);
    boolean("crl_on_mixup", &C::crl_on_mixup);
    dbl("lr", &C::lr);
    dbl("lr_min", &C::lr_min);
    dbl("momentum", &C::momentum);
    dbl("weight_decay", &C::weight_decay);
    boolean("decay_prototypes", &C::decay_prototypes);
    dbl("rho", &C::rho);
    integer("epochs", &C::epochs);
    integer("swa_start", &C::swa_start);
    dbl("swa_lr", &C::swa_lr);
    sz("batch_size", &C::batch_size);
    boolean("reweight", &C::reweight);
    f.push_back({"reweight_map", {[](const C& c) { return std::string(to_string(c.reweight_map)); },
                                  [](C& c, const std::string&, const std::string& v) { c.reweight_map = parse_reweight_kind(v); }}});
    dbl("reweight_param", &C::reweight_param);
    integer("reweight_epochs", &C::reweight_epochs);
    dbl("reweight_lr", &C::reweight_lr);
    f.push_back({"seed", {[](const C& c) { return std::to_string(c.seed); },
                          [](C& c, const std::string& k, const std::string& v) {
                            c.seed = parse_size(k, v);
                            c.seed_given = true;
                          }}});
    str("selection", &C::selection);
    str("run_id", &C::run_id);
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> ExperimentConfig::to_pairs() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : detail::config_fields()) out.emplace_back(k, f.get(*this));
  return out;
}

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& [k, f] : detail::config_fields())
    if (k == key) {
      try {
        return f.set(*this, key, detail::trim(value));
      } catch (const ValidationError& e) {
        if (std::string(e.what()).rfind(key + ":", 0) == 0) throw;
        throw ValidationError(key + ": " + e.what());
      }
    }
  throw ValidationError("unknown config key '" + key + "'");
}

inline const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> ks = [] {
    std::vector<std::string> out;
    for (const auto& [k, f] : detail::config_fields()) out.push_back(k);
    return out;
  }();
  return ks;
}

inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig cfg = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig cfg = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  return parse_config(is, std::move(cfg));
}

inline void write_config(std::ostream& os, const ExperimentConfig& cfg) {
  for (const auto& [k, v] : cfg.to_pairs()) os << k << " = " << v << '\n';
}

/// Desk benchmark: 10 Gaussian classes in 16 dims viewed as a 4x4 grid.
inline ExperimentConfig desk_benchmark_preset() {
  ExperimentConfig c;
  c.input_shape = {4, 4};
  c.test_per_class = 1000;
  return c;
}

/// Schedule used at full scale: 200 epochs, SWA from epoch 120 at rate 0.05.
inline ExperimentConfig full_schedule_preset() {
  ExperimentConfig c;
  c.epochs = 200;
  c.swa_start = 120;
  c.swa_lr = 0.05;
  c.reweight_epochs = 50;
  return c;
}

}  // namespace sure
