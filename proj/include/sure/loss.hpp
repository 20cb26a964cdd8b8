#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sure/autodiff.hpp"
#include "sure/error.hpp"
#include "sure/model.hpp"
#include "sure/tensor.hpp"

namespace sure {

using Rng = std::mt19937_64;

struct MixupConfig {
  double beta = 10.0;
  bool enabled = true;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("beta must be > 0");
  }
};

struct LossWeights {
  double lambda_mix = 1.0;
  double lambda_crl = 1.0;

  void validate() const {
    if (!(lambda_mix >= 0.0) || !std::isfinite(lambda_mix)) throw ValidationError("lambda_mix must be finite and >= 0");
    if (!(lambda_crl >= 0.0) || !std::isfinite(lambda_crl)) throw ValidationError("lambda_crl must be finite and >= 0");
  }
};

/// Probability vector used as a classification target.
class SoftLabel {
public:
  explicit SoftLabel(Tensor probabilities) : p_(std::move(probabilities)) {
    if (p_.rank() != 1 || p_.size() == 0) throw ShapeError("soft label must be a non-empty vector");
    double s = 0.0;
    for (double v : p_.values()) {
      if (!(v >= 0.0)) throw ValidationError("soft label entries must be >= 0");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("soft label must sum to 1, got " + std::to_string(s));
  }

  static SoftLabel one_hot(std::size_t label, std::size_t num_classes) {
    if (label >= num_classes) throw ValidationError("label out of range");
    Tensor t(Shape{num_classes}, 0.0);
    t[label] = 1.0;
    return SoftLabel(std::move(t));
  }

  const Tensor& probabilities() const noexcept { return p_; }
  std::size_t num_classes() const noexcept { return p_.size(); }

private:
  Tensor p_;
};

/// Per-sample running count of correct predictions.
class CorrectnessHistory {
public:
  CorrectnessHistory() = default;
  explicit CorrectnessHistory(std::size_t num_samples) : correct_(num_samples, 0), seen_(num_samples, 0) {}

  std::size_t size() const noexcept { return seen_.size(); }

  void record(std::size_t id, bool correct) {
    check_id(id);
    ++seen_[id];
    if (correct) ++correct_[id];
  }

  bool seen(std::size_t id) const {
    check_id(id);
    return seen_[id] > 0;
  }

  std::uint64_t correct_count(std::size_t id) const {
    check_id(id);
    return correct_[id];
  }
  std::uint64_t seen_count(std::size_t id) const {
    check_id(id);
    return seen_[id];
  }

  /// Fraction of recorded events that were correct.
  double correctness(std::size_t id) const {
    check_id(id);
    if (seen_[id] == 0) throw ValidationError("sample " + std::to_string(id) + " has no correctness history yet");
    return static_cast<double>(correct_[id]) / static_cast<double>(seen_[id]);
  }

private:
  void check_id(std::size_t id) const {
    if (id >= seen_.size()) throw ValidationError("unknown sample id " + std::to_string(id));
  }

  std::vector<std::uint64_t> correct_;
  std::vector<std::uint64_t> seen_;
};

// ---------------------------------------------------------------------------
// Mixup

/// Draws m ~ Beta(beta, beta) as X / (X + Y) with X, Y ~ Gamma(beta, 1).
inline double sample_mix_coefficient(const MixupConfig& cfg, Rng& rng) {
  cfg.validate();
  std::gamma_distribution<double> gamma(cfg.beta, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  if (x + y <= 0.0) return 0.5;
  return x / (x + y);
}

struct MixedSample {
  Tensor x;
  SoftLabel y;
};

inline MixedSample mixup_pair(const Tensor& x_i, const SoftLabel& y_i, const Tensor& x_j, const SoftLabel& y_j, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ValidationError("mix coefficient must lie in [0, 1]");
  require_same_shape(x_i, x_j, "mixup_pair");
  require_same_shape(y_i.probabilities(), y_j.probabilities(), "mixup_pair");
  Tensor x = x_i;
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = m * x_i[k] + (1.0 - m) * x_j[k];
  Tensor y = y_i.probabilities();
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = m * y_i.probabilities()[k] + (1.0 - m) * y_j.probabilities()[k];
  return {std::move(x), SoftLabel(std::move(y))};
}

/// A batch of flattened inputs [B, D] with soft targets [B, K].
struct Batch {
  Tensor inputs;
  Tensor targets;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
};

/// Partner index and mix coefficient for every row of a batch.
struct MixupPlan {
  std::vector<std::size_t> partner;
  std::vector<double> m;
};

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

inline MixupPlan draw_mixup_plan(std::size_t batch_size, const MixupConfig& cfg, Rng& rng) {
  if (batch_size < 2) throw ValidationError("mixup needs a batch of at least 2 samples");
  MixupPlan plan;
  plan.partner = random_permutation(batch_size, rng);
  plan.m.resize(batch_size);
  for (double& m : plan.m) m = sample_mix_coefficient(cfg, rng);
  return plan;
}

/// Interpolated inputs and targets of a batch under `plan`.
inline std::pair<Tensor, Tensor> mix_batch(const Batch& batch, const MixupPlan& plan) {
  const std::size_t B = batch.size();
  if (plan.partner.size() != B || plan.m.size() != B) throw ShapeError("mixup plan does not match batch size");
  Tensor x = batch.inputs;
  Tensor y = batch.targets;
  const std::size_t D = x.dim(1), K = y.dim(1);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t j = plan.partner[i];
    const double m = plan.m[i];
    for (std::size_t d = 0; d < D; ++d) x[i * D + d] = m * batch.inputs[i * D + d] + (1.0 - m) * batch.inputs[j * D + d];
    for (std::size_t k = 0; k < K; ++k) y[i * K + k] = m * batch.targets[i * K + k] + (1.0 - m) * batch.targets[j * K + k];
  }
  return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// sum_i w_i * (-sum_k target_ik log softmax(logits_i)_k).
inline Var weighted_cross_entropy(Var logits, const Tensor& targets, const std::vector<double>& weights) {
  const bool single = logits.value().rank() == 1;
  Var z = single ? reshape(logits, Shape{1, logits.value().size()}) : logits;
  const Tensor t = single ? targets.reshaped(Shape{1, targets.size()}) : targets;
  require_same_shape(z.value(), t, "cross_entropy");
  if (weights.size() != z.value().dim(0)) throw ShapeError("cross_entropy: one weight per row required");
  Tensor neg_t = t;
  for (double& v : neg_t.values()) v = -v;
  Var per_row = row_sum(mul_const(log_softmax(z), neg_t));
  return sum(mul_const(per_row, Tensor::vector(weights)));
}

/// Mean cross-entropy over the rows of `logits` ([K] or [B, K]).
inline Var cross_entropy(Var logits, const Tensor& targets) {
  const std::size_t rows = logits.value().rank() == 1 ? 1 : logits.value().dim(0);
  if (rows == 0) throw ShapeError("cross_entropy of an empty batch");
  return weighted_cross_entropy(logits, targets, std::vector<double>(rows, 1.0 / static_cast<double>(rows)));
}

inline double cross_entropy(const Tensor& logits, const SoftLabel& target) {
  Tape t;
  return cross_entropy(t.constant(logits), target.probabilities()).value().item();
}

/// Mean cross-entropy of the model on the interpolated batch.
inline Var regmixup_loss(const Model& model, const Model::Bound& bound, const Batch& batch, const MixupPlan& plan) {
  if (batch.size() < 2) throw ValidationError("regmixup_loss needs a batch of at least 2 samples");
  auto [x, y] = mix_batch(batch, plan);
  Tape& tape = bound.head_weight.tape();
  Var logits = model.forward(bound, tape.constant(std::move(x))).logits;
  return cross_entropy(logits, y);
}

inline Var regmixup_loss(const Model& model, const Model::Bound& bound, const Batch& batch, const MixupConfig& cfg,
                         Rng& rng) {
  if (batch.size() < 2) throw ValidationError("regmixup_loss needs a batch of at least 2 samples");
  return regmixup_loss(model, bound, batch, draw_mixup_plan(batch.size(), cfg, rng));
}

// ---------------------------------------------------------------------------
// Correctness ranking

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// max(0, |c_i - c_j| - sign(c_i - c_j) (s_i - s_j))
inline double crl_pair_loss(double c_i, double c_j, double s_i, double s_j) {
  for (double v : {c_i, c_j, s_i, s_j})
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("crl_pair_loss: inputs must lie in [0, 1]");
  const double dc = c_i - c_j;
  return std::max(0.0, std::abs(dc) - sign(dc) * (s_i - s_j));
}

/// Mean ranking hinge over pairs (i, partner[i]). `correctness` holds c_i per
/// batch row and is treated as constant; gradients flow into `confidences`.
inline Var crl_batch_loss(Var confidences, const std::vector<double>& correctness,
                          const std::vector<std::size_t>& partner) {
  const std::size_t B = correctness.size();
  if (B == 0) throw ValidationError("crl_batch_loss of an empty batch");
  if (confidences.value().rank() != 1 || confidences.value().size() != B || partner.size() != B)
    throw ShapeError("crl_batch_loss: confidences, correctness and pairing must have one entry per sample");
  Tensor neg_sign(Shape{B}), margin(Shape{B});
  for (std::size_t i = 0; i < B; ++i) {
    const double dc = correctness[i] - correctness[partner[i]];
    neg_sign[i] = -sign(dc);
    margin[i] = std::abs(dc);
  }
  Var ds = sub(confidences, gather(confidences, partner));
  return mean(relu(add_const(mul_const(ds, neg_sign), margin)));
}

/// Ring pairing i <-> perm(i) from a seeded permutation.
inline std::vector<std::size_t> draw_crl_pairing(std::size_t batch_size, Rng& rng) {
  return random_permutation(batch_size, rng);
}

inline Var crl_batch_loss(const CorrectnessHistory& history, const std::vector<std::size_t>& ids, Var confidences,
                          const std::vector<std::size_t>& partner) {
  std::vector<double> c(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) c[i] = history.correctness(ids[i]);
  return crl_batch_loss(confidences, c, partner);
}

inline bool history_covers(const CorrectnessHistory& history, const std::vector<std::size_t>& ids) {
  return std::all_of(ids.begin(), ids.end(), [&](std::size_t id) { return history.seen(id); });
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Records one event per row: correct when argmax(predictions row) == label.
inline void update_correctness_history(CorrectnessHistory& history, const std::vector<std::size_t>& ids,
                                       const Tensor& predictions, const std::vector<std::size_t>& labels) {
  const auto [rows, cols] = as_rows(predictions, "update_correctness_history");
  if (ids.size() != rows || labels.size() != rows) throw ShapeError("update_correctness_history: size mismatch");
  for (std::size_t id : ids)
    if (id >= history.size()) throw ValidationError("unknown sample id " + std::to_string(id));
  for (std::size_t r = 0; r < rows; ++r) history.record(ids[r], argmax(predictions.row(r)) == labels[r]);
}

// ---------------------------------------------------------------------------
// Total objective

inline double total_loss(double ce, double mix, double crl, const LossWeights& w) {
  w.validate();
  const double v = ce + w.lambda_mix * mix + w.lambda_crl * crl;
  if (!std::isfinite(v)) throw DivergenceError("total loss is not finite");
  return v;
}

/// L_ce + lambda_mix L_mix + lambda_crl L_crl; absent terms contribute nothing.
inline Var total_loss(Var ce, std::optional<Var> mix, std::optional<Var> crl, const LossWeights& w) {
  w.validate();
  Var total = ce;
  if (mix && w.lambda_mix != 0.0) total = add(total, scale(*mix, w.lambda_mix));
  if (crl && w.lambda_crl != 0.0) total = add(total, scale(*crl, w.lambda_crl));
  if (!std::isfinite(total.value().item())) throw DivergenceError("total loss is not finite");
  return total;
}

}  // namespace sure
