#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sure/error.hpp"
#include "sure/loss.hpp"
#include "sure/tensor.hpp"

namespace sure {

struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> sample_ids;
  std::size_t num_classes = 0;
  /// Inputs are pixel intensities in [0, 1]; corruptions clip to that range.
  bool bounded = false;

  std::size_t size() const noexcept { return inputs.size(); }
  bool empty() const noexcept { return inputs.empty(); }

  std::size_t input_dim() const { return inputs.empty() ? 0 : inputs.front().size(); }
  Shape sample_shape() const { return inputs.empty() ? Shape{} : inputs.front().shape(); }

  void validate() const {
    if (labels.size() != inputs.size() || sample_ids.size() != inputs.size())
      throw ValidationError("dataset: inputs, labels and ids must have equal length");
    for (std::size_t l : labels)
      if (l >= num_classes) throw ValidationError("dataset: label " + std::to_string(l) + " out of range");
    for (const auto& x : inputs)
      if (x.shape() != inputs.front().shape()) throw ShapeError("dataset: inconsistent sample shapes");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (std::size_t l : labels) ++c.at(l);
    return c;
  }

  /// Samples at `rows`, in that order.
  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset d;
    d.num_classes = num_classes;
    d.bounded = bounded;
    d.inputs.reserve(rows.size());
    for (std::size_t r : rows) {
      d.inputs.push_back(inputs.at(r));
      d.labels.push_back(labels.at(r));
      d.sample_ids.push_back(sample_ids.at(r));
    }
    return d;
  }

  /// All inputs flattened into one [N, D] matrix.
  Tensor input_matrix() const {
    const std::size_t D = input_dim();
    Tensor m(Shape{size(), D});
    for (std::size_t i = 0; i < size(); ++i) std::copy(inputs[i].values().begin(), inputs[i].values().end(), m.row(i).begin());
    return m;
  }

  /// Reinterprets every sample under `shape` (same element count).
  Dataset reshaped(const Shape& shape) const {
    Dataset d = *this;
    for (auto& x : d.inputs) x = x.reshaped(shape);
    return d;
  }
};

/// Flattened inputs and one-hot targets for the rows `rows` of `ds`.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows) {
  const std::size_t B = rows.size(), D = ds.input_dim(), K = ds.num_classes;
  Batch b;
  b.inputs = Tensor(Shape{B, D});
  b.targets = Tensor(Shape{B, K}, 0.0);
  b.ids.assign(rows.begin(), rows.end());
  b.labels.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    const Tensor& x = ds.inputs.at(rows[i]);
    std::copy(x.values().begin(), x.values().end(), b.inputs.row(i).begin());
    b.labels[i] = ds.labels[rows[i]];
    b.targets[i * K + b.labels[i]] = 1.0;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// K isotropic unit-variance Gaussian classes in R^D. Class means are
/// sigma_gap / sqrt(2) times seeded random unit directions, so nearly
/// orthogonal means sit about sigma_gap apart. `layout_seed` fixes the means;
/// `seed` the samples, so train and test sets can share one layout.
inline Dataset gen_gaussian_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim, double sigma_gap,
                                  std::uint64_t seed, std::uint64_t layout_seed = 0) {
  if (num_classes < 2) throw ValidationError("blobs: need at least 2 classes");
  if (per_class < 1) throw ValidationError("blobs: need at least 1 sample per class");
  if (dim < 1) throw ValidationError("blobs: dim must be >= 1");
  if (!(sigma_gap >= 0.0) || !std::isfinite(sigma_gap)) throw ValidationError("blobs: sigma_gap must be >= 0");
  std::normal_distribution<double> normal(0.0, 1.0);

  std::mt19937_64 layout(layout_seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::vector<double>> means(num_classes, std::vector<double>(dim));
  for (auto& mu : means) {
    double norm = 0.0;
    while (!(norm > 1e-6)) {
      norm = 0.0;
      for (double& v : mu) {
        v = normal(layout);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (double& v : mu) v *= sigma_gap / (norm * std::numbers::sqrt2);
  }

  std::mt19937_64 rng(seed);
  Dataset ds;
  ds.num_classes = num_classes;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t k = 0; k < num_classes; ++k) {
      Tensor x(Shape{dim});
      for (std::size_t d = 0; d < dim; ++d) x[d] = means[k][d] + normal(rng);
      ds.sample_ids.push_back(ds.inputs.size());
      ds.inputs.push_back(std::move(x));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

/// Two interleaved half circles of radius 1 centred at (0, 0) and (1, 0.5),
/// with Gaussian jitter `noise`.
inline Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw ValidationError("two_moons: n must be even and positive");
  if (!(noise >= 0.0)) throw ValidationError("two_moons: noise must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t half = n / 2;
  Dataset ds;
  ds.num_classes = 2;
  for (std::size_t cls = 0; cls < 2; ++cls) {
    for (std::size_t i = 0; i < half; ++i) {
      const double t = half > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
      double x = cls == 0 ? std::cos(t) : 1.0 - std::cos(t);
      double y = cls == 0 ? std::sin(t) : 0.5 - std::sin(t);
      if (noise > 0.0) {
        x += noise * normal(rng);
        y += noise * normal(rng);
      }
      ds.sample_ids.push_back(ds.inputs.size());
      ds.inputs.push_back(Tensor::vector({x, y}));
      ds.labels.push_back(cls);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Long tail

struct LongTailProfile {
  double imbalance_factor = 1.0;
  std::vector<std::size_t> counts;
};

/// Per-class counts round(N mu^i), mu = IF^(-1/(K-1)); class 0 is the head.
inline LongTailProfile long_tail_profile(std::size_t per_class, std::size_t num_classes, double imbalance_factor) {
  if (!(imbalance_factor >= 1.0) || !std::isfinite(imbalance_factor)) throw ValidationError("long tail: IF must be >= 1");
  if (num_classes < 2) throw ValidationError("long tail: need at least 2 classes");
  LongTailProfile prof;
  prof.imbalance_factor = imbalance_factor;
  const double mu = std::pow(imbalance_factor, -1.0 / static_cast<double>(num_classes - 1));
  for (std::size_t i = 0; i < num_classes; ++i) {
    const double raw = static_cast<double>(per_class) * std::pow(mu, static_cast<double>(i));
    const auto count = static_cast<std::size_t>(std::floor(raw + 0.5));
    if (count < 1)
      throw ValidationError("long tail: class " + std::to_string(i) + " would keep no samples (IF too large for " +
                            std::to_string(per_class) + " per class)");
    prof.counts.push_back(std::min(count, per_class));
  }
  return prof;
}

inline std::pair<Dataset, LongTailProfile> apply_long_tail(const Dataset& ds, double imbalance_factor, std::uint64_t seed) {
  ds.validate();
  const auto counts = ds.class_counts();
  if (counts.empty() || std::adjacent_find(counts.begin(), counts.end(), std::not_equal_to<>()) != counts.end())
    throw ValidationError("long tail: base dataset must be class balanced");
  LongTailProfile prof = long_tail_profile(counts.front(), ds.num_classes, imbalance_factor);

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < ds.num_classes; ++k) {
    auto& rows = by_class[k];
    std::shuffle(rows.begin(), rows.end(), rng);
    keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(prof.counts[k]));
  }
  std::sort(keep.begin(), keep.end());
  return {ds.subset(keep), std::move(prof)};
}

// ---------------------------------------------------------------------------
// Label noise

struct NoiseSpec {
  double rate = 0.0;

  void validate() const {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("noise rate must lie in [0, 1]");
  }
};

struct NoisyDataset {
  Dataset data;
  std::vector<std::size_t> original_labels;
};

/// Symmetric noise: each label moves with probability `rate` to a uniformly
/// chosen different class.
inline NoisyDataset inject_label_noise(const Dataset& ds, const NoiseSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (ds.num_classes < 2) throw ValidationError("label noise needs at least 2 classes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> other(0, ds.num_classes - 2);
  NoisyDataset out{ds, ds.labels};
  for (auto& l : out.data.labels) {
    if (coin(rng) < spec.rate) {
      const std::size_t r = other(rng);
      l = r >= l ? r + 1 : r;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind { gaussian_noise, impulse_noise, box_blur, brightness, contrast };

inline constexpr std::array<CorruptionKind, 5> kAllCorruptions = {
    CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise, CorruptionKind::box_blur, CorruptionKind::brightness,
    CorruptionKind::contrast};

inline const char* to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::impulse_noise: return "impulse_noise";
    case CorruptionKind::box_blur: return "box_blur";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::contrast: return "contrast";
  }
  return "?";
}

inline CorruptionKind parse_corruption_kind(const std::string& s) {
  for (CorruptionKind k : kAllCorruptions)
    if (s == to_string(k)) return k;
  throw ValidationError("unknown corruption kind '" + s + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;

  void validate() const {
    if (severity < 1 || severity > 5) throw ValidationError("corruption severity must lie in 1..5");
  }
};

namespace detail {

// Severity ladders, index 0 = severity 1.
inline constexpr std::array<double, 5> kGaussianSigma = {0.08, 0.12, 0.18, 0.26, 0.38};
inline constexpr std::array<double, 5> kImpulseFraction = {0.01, 0.03, 0.06, 0.10, 0.17};
inline constexpr std::array<int, 5> kBlurRadius = {1, 1, 1, 2, 3};
inline constexpr std::array<double, 5> kBlurBlend = {0.4, 0.7, 1.0, 1.0, 1.0};
inline constexpr std::array<double, 5> kBrightnessShift = {0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 5> kContrastGain = {0.6, 0.45, 0.3, 0.2, 0.1};

struct FeatureStats {
  double scale = 1.0;
  double lo = 0.0;
  double hi = 1.0;
};

inline FeatureStats feature_stats(const Dataset& ds) {
  if (ds.bounded) return {1.0, 0.0, 1.0};
  double s = 0.0, ss = 0.0, n = 0.0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& x : ds.inputs)
    for (double v : x.values()) {
      s += v;
      ss += v * v;
      n += 1.0;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (n == 0.0) return {};
  const double mean = s / n;
  const double var = std::max(0.0, ss / n - mean * mean);
  return {var > 0.0 ? std::sqrt(var) : 1.0, lo, hi};
}

inline void clip_if_bounded(const Dataset& ds, Tensor& x) {
  if (!ds.bounded) return;
  for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
}

/// Mean over the in-bounds (2r+1)^2 neighbourhood of every pixel, per channel.
inline Tensor box_blur(const Tensor& x, int radius) {
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t C = x.size() / (H * W);
  Tensor out(x.shape());
  const auto r = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0.0, n = 0.0;
        for (std::ptrdiff_t di = -r; di <= r; ++di)
          for (std::ptrdiff_t dj = -r; dj <= r; ++dj) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + di, jj = static_cast<std::ptrdiff_t>(j) + dj;
            if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(H) || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            s += x[c * H * W + static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj)];
            n += 1.0;
          }
        out[c * H * W + i * W + j] = s / n;
      }
  return out;
}

}  // namespace detail

/// Adds `delta` to every feature; clips to [0, 1] when the dataset is bounded.
inline Dataset shift_brightness(const Dataset& ds, double delta) {
  Dataset out = ds;
  for (auto& x : out.inputs) {
    for (double& v : x.values()) v += delta;
    detail::clip_if_bounded(ds, x);
  }
  return out;
}

/// Applies one corruption at one severity. Amplitudes are relative to the
/// dataset's global feature standard deviation (1 for bounded pixel data).
inline Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, std::uint64_t seed) {
  spec.validate();
  ds.validate();
  const auto s = static_cast<std::size_t>(spec.severity - 1);
  const detail::FeatureStats stats = detail::feature_stats(ds);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  switch (spec.kind) {
    case CorruptionKind::brightness:
      return shift_brightness(ds, detail::kBrightnessShift[s] * stats.scale);
    case CorruptionKind::box_blur:
      if (ds.sample_shape().size() < 2)
        throw ShapeError("box_blur needs grid-shaped inputs, got sample shape " + shape_string(ds.sample_shape()));
      break;
    default:
      break;
  }

  Dataset out = ds;
  for (auto& x : out.inputs) {
    switch (spec.kind) {
      case CorruptionKind::gaussian_noise: {
        const double sigma = detail::kGaussianSigma[s] * stats.scale;
        for (double& v : x.values()) v += sigma * normal(rng);
        break;
      }
      case CorruptionKind::impulse_noise: {
        const double frac = detail::kImpulseFraction[s];
        for (double& v : x.values()) {
          if (coin(rng) < frac) v = coin(rng) < 0.5 ? stats.lo : stats.hi;
        }
        break;
      }
      case CorruptionKind::box_blur: {
        const Tensor blurred = detail::box_blur(x, detail::kBlurRadius[s]);
        const double a = detail::kBlurBlend[s];
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1.0 - a) * x[i] + a * blurred[i];
        break;
      }
      case CorruptionKind::contrast: {
        double m = 0.0;
        for (double v : x.values()) m += v;
        m /= static_cast<double>(x.size());
        const double g = detail::kContrastGain[s];
        for (double& v : x.values()) v = m + g * (v - m);
        break;
      }
      case CorruptionKind::brightness:
        break;
    }
    detail::clip_if_bounded(ds, x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (3 x 32 x 32, channel major). Pixels are scaled to [0, 1].

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarPixels;

inline Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw IoError("cifar10: truncated file (" + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                  std::to_string(kCifarRecordBytes) + ")");
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.num_classes = 10;
  ds.bounded = true;
  ds.inputs.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto rec = bytes.subspan(r * kCifarRecordBytes, kCifarRecordBytes);
    if (rec[0] > 9) throw IoError("cifar10: record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    Tensor x(Shape{3, 32, 32});
    for (std::size_t p = 0; p < kCifarPixels; ++p) x[p] = static_cast<double>(rec[1 + p]) / 255.0;
    ds.inputs.push_back(std::move(x));
    ds.labels.push_back(rec[0]);
    ds.sample_ids.push_back(r);
  }
  return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline Dataset read_cifar10_binary(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_cifar10_binary(bytes);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

/// Inverse of parse_cifar10_binary (pixels rounded back to bytes).
inline std::vector<std::uint8_t> encode_cifar10_binary(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.inputs[i].size() != kCifarPixels) throw ShapeError("cifar10: sample is not 3x32x32");
    if (ds.labels[i] > 9) throw ValidationError("cifar10: label out of range");
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    for (double v : ds.inputs[i].values())
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

inline void write_cifar10_binary(const std::string& path, const Dataset& ds) {
  const auto bytes = encode_cifar10_binary(ds);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Train / validation split

struct Split {
  Dataset train;
  Dataset val;
  bool stratified = true;
};

/// Seeded split keeping round(fraction * n_k) samples of every class for
/// validation. Falls back to an unstratified split (stratified == false) when
/// some class cannot give at least one sample to each side.
inline Split train_val_split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ValidationError("val_fraction must lie in (0, 1)");
  ds.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  bool stratifiable = true;
  for (const auto& rows : by_class) {
    if (rows.empty()) continue;
    const auto nv = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(rows.size()) + 0.5));
    if (nv < 1 || nv >= rows.size()) stratifiable = false;
  }

  std::vector<std::size_t> train_rows, val_rows;
  if (stratifiable) {
    for (auto& rows : by_class) {
      if (rows.empty()) continue;
      std::shuffle(rows.begin(), rows.end(), rng);
      const auto nv = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(rows.size()) + 0.5));
      val_rows.insert(val_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nv));
      train_rows.insert(train_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(nv), rows.end());
    }
  } else {
    std::vector<std::size_t> all = random_permutation(ds.size(), rng);
    auto nv = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(ds.size()) + 0.5));
    nv = std::clamp<std::size_t>(nv, 1, ds.size() > 1 ? ds.size() - 1 : 1);
    val_rows.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nv));
    train_rows.assign(all.begin() + static_cast<std::ptrdiff_t>(nv), all.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(val_rows.begin(), val_rows.end());
  return {ds.subset(train_rows), ds.subset(val_rows), stratifiable};
}

// ---------------------------------------------------------------------------
// CSV export: header `sample_id,label,f0,f1,...`, one sample per row.

inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
  const std::size_t D = ds.input_dim();
  os << "sample_id,label";
  for (std::size_t d = 0; d < D; ++d) os << ",f" << d;
  os << '\n';
  os << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.sample_ids[i] << ',' << ds.labels[i];
    for (double v : ds.inputs[i].values()) os << ',' << v;
    os << '\n';
  }
}

/// Reads the CSV back with flat [D] samples; num_classes is max(label) + 1
/// unless given.
inline Dataset read_dataset_csv(std::istream& is, std::size_t num_classes = 0) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("sample_id,label", 0) != 0) throw IoError("dataset csv: missing header");
  Dataset ds;
  std::size_t max_label = 0;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    std::vector<double> feats;
    std::size_t id = 0, label = 0;
    try {
      std::getline(ls, tok, ',');
      id = std::stoull(tok);
      std::getline(ls, tok, ',');
      label = std::stoull(tok);
      while (std::getline(ls, tok, ',')) feats.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw IoError("dataset csv line " + std::to_string(lineno) + ": malformed");
    }
    max_label = std::max(max_label, label);
    ds.sample_ids.push_back(id);
    ds.labels.push_back(label);
    ds.inputs.push_back(Tensor::vector(std::move(feats)));
  }
  ds.num_classes = num_classes ? num_classes : max_label + 1;
  ds.validate();
  return ds;
}

}  // namespace sure
