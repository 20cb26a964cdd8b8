#pragma once

// Second-stage uncertainty-aware re-weighting: capture the finalized model's
// maximum softmax score per training sample once, map it to a raw weight that
// decreases with confidence, normalize within each batch and fine-tune with
// the weighted cross-entropy.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sure/data.hpp"
#include "sure/error.hpp"
#include "sure/loss.hpp"
#include "sure/metrics.hpp"
#include "sure/model.hpp"
#include "sure/optim.hpp"

namespace sure {

enum class ReweightKind { exp, threshold, power, linear };

inline const char* to_string(ReweightKind k) {
  switch (k) {
    case ReweightKind::exp: return "exp";
    case ReweightKind::threshold: return "threshold";
    case ReweightKind::power: return "power";
    case ReweightKind::linear: return "linear";
  }
  return "?";
}

inline ReweightKind parse_reweight_kind(const std::string& s) {
  for (ReweightKind k : {ReweightKind::exp, ReweightKind::threshold, ReweightKind::power, ReweightKind::linear})
    if (s == to_string(k)) return k;
  throw ValidationError("reweight_map: expected exp, threshold, power or linear, got '" + s + "'");
}

/// `param` is t for exp, alpha for threshold, p for power and unused for linear.
struct ReweightMap {
  ReweightKind kind = ReweightKind::exp;
  double param = 1.0;

  void validate() const {
    switch (kind) {
      case ReweightKind::exp:
        if (!(param > 0.0) || !std::isfinite(param)) throw ValidationError("exp map needs t > 0");
        break;
      case ReweightKind::threshold:
        if (!(param > 0.0 && param < 1.0)) throw ValidationError("threshold map needs alpha in (0, 1)");
        break;
      case ReweightKind::power:
        if (!(param >= 1.0) || !std::isfinite(param)) throw ValidationError("power map needs p >= 1");
        break;
      case ReweightKind::linear:
        break;
    }
  }
};

inline double raw_weight(const ReweightMap& map, double s) {
  map.validate();
  if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("raw_weight: score must lie in [0, 1]");
  switch (map.kind) {
    case ReweightKind::exp: return std::exp(-map.param * s);
    case ReweightKind::threshold: return s < map.param ? 1.0 - s : 0.0;
    case ReweightKind::power: return std::pow(1.0 - s, map.param);
    case ReweightKind::linear: return 1.0 - s;
  }
  return 0.0;
}

struct BatchWeights {
  std::vector<double> weights;
  bool uniform_fallback = false;  // every raw weight was zero
};

/// Scales raw weights to sum to one. Equal raw weights give exactly 1/B.
inline BatchWeights normalize_batch_weights(std::span<const double> raw) {
  if (raw.empty()) throw ValidationError("normalize_batch_weights of an empty batch");
  const double B = static_cast<double>(raw.size());
  BatchWeights out;
  double total = 0.0;
  bool all_equal = true;
  for (double r : raw) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ValidationError("raw weights must be finite and >= 0");
    total += r;
    all_equal = all_equal && r == raw[0];
  }
  if (total <= 0.0 || all_equal) {
    out.weights.assign(raw.size(), 1.0 / B);
    out.uniform_fallback = total <= 0.0;
    return out;
  }
  out.weights.reserve(raw.size());
  for (double r : raw) out.weights.push_back(r / total);
  return out;
}

struct UncertaintyScores {
  std::vector<double> scores;  // one per training row
};

/// Maximum softmax score of every sample under a frozen model.
inline UncertaintyScores capture_uncertainty_scores(const Model& model, const Dataset& train) {
  if (train.input_dim() != model.spec().backbone.input_dim())
    throw ShapeError("capture_uncertainty_scores: dataset dim " + std::to_string(train.input_dim()) +
                     " does not match model input " + std::to_string(model.spec().backbone.input_dim()));
  if (train.num_classes != model.spec().num_classes)
    throw ShapeError("capture_uncertainty_scores: class count mismatch");
  UncertaintyScores out;
  out.scores.reserve(train.size());
  const Tensor p = softmax(model.logits(train.input_matrix()));
  for (std::size_t r = 0; r < train.size(); ++r) {
    auto row = p.row(r);
    out.scores.push_back(std::clamp(*std::max_element(row.begin(), row.end()), 0.0, 1.0));
  }
  return out;
}

struct FineTuneConfig {
  int epochs = 25;
  double lr = 5e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ValidationError("reweight_epochs must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    SGDConfig{lr, momentum, weight_decay, {}}.validate();
  }
};

struct FineTuneResult {
  Model model;
  std::size_t fallback_batches = 0;
};

/// Plain-SGD fine-tuning on (optionally weighted) cross-entropy. Without
/// weights every batch row gets 1/B.
inline FineTuneResult fine_tune(Model model, const Dataset& train, const FineTuneConfig& cfg,
                                const std::vector<double>* raw_weights = nullptr) {
  cfg.validate();
  if (raw_weights && raw_weights->size() != train.size()) throw ShapeError("fine_tune: one weight per training sample");
  FineTuneResult res;
  Rng rng(cfg.seed);
  Velocity velocity;
  const SGDConfig sgd{cfg.lr, cfg.momentum, cfg.weight_decay, {}};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = random_permutation(train.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Batch batch = make_batch(train, rows);
      std::vector<double> raw(rows.size(), 1.0);
      if (raw_weights)
        for (std::size_t i = 0; i < rows.size(); ++i) raw[i] = (*raw_weights)[rows[i]];
      const BatchWeights w = normalize_batch_weights(raw);
      if (w.uniform_fallback) ++res.fallback_batches;

      Tape tape;
      const auto bound = model.bind(tape);
      Var logits = model.forward(bound, tape.constant(batch.inputs)).logits;
      Var loss = weighted_cross_entropy(logits, batch.targets, w.weights);
      if (!std::isfinite(loss.value().item())) throw DivergenceError("re-weighting loss is not finite");
      sgd_step(model.params(), backward(tape, loss), sgd, velocity);
    }
  }
  res.model = std::move(model);
  return res;
}

struct ReweightResult {
  Model model;
  UncertaintyScores scores;
  std::size_t fallback_batches = 0;
};

/// Captures scores from the frozen stage-1 model, then fine-tunes with
/// per-batch normalized map(score) weights.
inline ReweightResult reweight_stage(const Model& stage1, const Dataset& train, const ReweightMap& map,
                                     const FineTuneConfig& cfg) {
  map.validate();
  ReweightResult out;
  out.scores = capture_uncertainty_scores(stage1, train);
  std::vector<double> raw;
  raw.reserve(train.size());
  for (double s : out.scores.scores) raw.push_back(raw_weight(map, s));
  FineTuneResult ft = fine_tune(stage1, train, cfg, &raw);
  out.model = std::move(ft.model);
  out.fallback_batches = ft.fallback_batches;
  return out;
}

inline void write_scores_csv(std::ostream& os, const Dataset& train, const UncertaintyScores& scores) {
  os << "sample_id,score\n";
  os.precision(17);
  for (std::size_t i = 0; i < scores.scores.size(); ++i) os << train.sample_ids.at(i) << ',' << scores.scores[i] << '\n';
}

/// Mean per-class recall over the classes present in `records`' labels.
inline double balanced_accuracy(const std::vector<EvalRecord>& records, std::size_t num_classes) {
  std::vector<double> hit(num_classes, 0.0), tot(num_classes, 0.0);
  for (const auto& r : records) {
    if (r.true_label >= num_classes) throw ValidationError("balanced_accuracy: label out of range");
    tot[r.true_label] += 1.0;
    if (r.correct) hit[r.true_label] += 1.0;
  }
  double s = 0.0, n = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k)
    if (tot[k] > 0.0) {
      s += hit[k] / tot[k];
      n += 1.0;
    }
  if (n == 0.0) throw ValidationError("balanced_accuracy of no records");
  return s / n;
}

}  // namespace sure
