#pragma once

// Experiment orchestration: dataset construction from a config, the full
// training loop (clean CE + RegMixup + correctness ranking, SAM steps, SWA,
// validation-based model selection), evaluation under corruptions and the
// optional re-weighting stage.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sure/config.hpp"
#include "sure/data.hpp"
#include "sure/loss.hpp"
#include "sure/metrics.hpp"
#include "sure/model.hpp"
#include "sure/optim.hpp"
#include "sure/reweight.hpp"

namespace sure {

inline constexpr const char* kVersion = "1.0.0";

/// splitmix64 of (seed, stream): independent seeds for each consumer.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace seed_stream {
inline constexpr std::uint64_t layout = 1, train_data = 2, test_data = 3, long_tail = 4, noise = 5, split = 6, init = 7,
                               shuffle = 8, mixup = 9, crl = 10, corruption = 11, reweight = 12;
}

struct ExperimentData {
  Dataset train;
  Dataset val;
  Dataset test;
  std::optional<LongTailProfile> long_tail;
  std::vector<std::size_t> clean_train_labels;  // before noise injection
  bool stratified = true;
  std::vector<std::string> warnings;
};

inline ExperimentData build_data(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::uint64_t s = cfg.seed;
  Dataset full, test;
  if (cfg.dataset == "blobs") {
    const std::uint64_t layout = derive_seed(s, seed_stream::layout);
    full = gen_gaussian_blobs(cfg.num_classes, cfg.train_per_class, cfg.dim, cfg.sigma_gap,
                              derive_seed(s, seed_stream::train_data), layout);
    test = gen_gaussian_blobs(cfg.num_classes, cfg.test_per_class, cfg.dim, cfg.sigma_gap,
                              derive_seed(s, seed_stream::test_data), layout);
  } else if (cfg.dataset == "moons") {
    full = gen_two_moons(2 * cfg.train_per_class, cfg.moons_noise, derive_seed(s, seed_stream::train_data));
    test = gen_two_moons(2 * cfg.test_per_class, cfg.moons_noise, derive_seed(s, seed_stream::test_data));
  } else {
    full = read_cifar10_binary(cfg.cifar_train);
    test = cfg.cifar_test.empty() ? Dataset{} : read_cifar10_binary(cfg.cifar_test);
    if (cfg.cifar_limit > 0) {
      auto take = [&](Dataset& d) {
        if (d.size() <= cfg.cifar_limit) return;
        std::vector<std::size_t> rows(cfg.cifar_limit);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        d = d.subset(rows);
      };
      take(full);
      take(test);
    }
    if (test.empty()) {
      Split sp = train_val_split(full, 0.2, derive_seed(s, seed_stream::test_data));
      full = std::move(sp.train);
      test = std::move(sp.val);
    }
  }
  if (!cfg.input_shape.empty()) {
    const Shape shape(cfg.input_shape.begin(), cfg.input_shape.end());
    if (shape_size(shape) != full.input_dim()) throw ValidationError("input_shape: product must equal the input size");
    full = full.reshaped(shape);
    test = test.reshaped(shape);
  }

  ExperimentData out;
  auto apply_tail = [&](Dataset d) {
    if (cfg.long_tail_if <= 1.0) return d;
    auto [lt, prof] = apply_long_tail(d, cfg.long_tail_if, derive_seed(s, seed_stream::long_tail));
    out.long_tail = prof;
    return lt;
  };
  Split sp;
  if (cfg.split_before_long_tail) {
    sp = train_val_split(full, cfg.val_fraction, derive_seed(s, seed_stream::split));
    sp.train = apply_tail(std::move(sp.train));
  } else {
    sp = train_val_split(apply_tail(std::move(full)), cfg.val_fraction, derive_seed(s, seed_stream::split));
  }
  out.stratified = sp.stratified;
  if (!sp.stratified) out.warnings.push_back("train/val split fell back to unstratified sampling");
  out.clean_train_labels = sp.train.labels;
  if (cfg.noise_rate > 0.0) {
    NoisyDataset noisy = inject_label_noise(sp.train, NoiseSpec{cfg.noise_rate}, derive_seed(s, seed_stream::noise));
    sp.train = std::move(noisy.data);
  }
  out.train = std::move(sp.train);
  out.val = std::move(sp.val);
  out.test = std::move(test);
  return out;
}

inline ModelSpec model_spec_for(const ExperimentConfig& cfg, std::size_t input_dim) {
  ModelSpec spec;
  spec.backbone.layer_widths.push_back(input_dim);
  spec.backbone.layer_widths.insert(spec.backbone.layer_widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  spec.backbone.relu_features = cfg.relu_features;
  spec.head = cfg.head;
  spec.num_classes = cfg.num_classes;
  spec.temperature = cfg.tau;
  return spec;
}

/// Number of times each optional code path ran during training.
struct TrainingCounters {
  std::size_t steps = 0;
  std::size_t mixup_passes = 0;
  std::size_t crl_terms = 0;
  std::size_t sam_second_passes = 0;
  std::size_t swa_updates = 0;
  std::size_t cosine_head = 0;  // 1 when the model uses the cosine head
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double val_aurc = 0.0;
  double val_accuracy = 0.0;
};

struct TrainOutcome {
  Model model;        // selected model
  Model final_model;  // after the last epoch (SWA weights when active)
  int selected_epoch = -1;
  double selected_val_aurc = 0.0;
  TrainingCounters counters;
  std::vector<EpochLog> log;
};

inline std::vector<EvalRecord> predict_records(const Model& model, const Dataset& ds) {
  if (ds.empty()) throw ValidationError("cannot evaluate on an empty dataset");
  if (ds.input_dim() != model.spec().backbone.input_dim())
    throw ShapeError("dataset input size " + std::to_string(ds.input_dim()) + " does not match model input " +
                     std::to_string(model.spec().backbone.input_dim()));
  return records_from_logits(model.logits(ds.input_matrix()), ds.labels);
}

/// Called after every epoch with the raw (not averaged) parameters.
using EpochHook = std::function<void(int epoch, const ParameterSet& params)>;

/// The full recipe on (train, val). Deterministic in cfg.seed.
inline TrainOutcome train_sure(const ExperimentConfig& cfg, const Dataset& train, const Dataset& val,
                               const EpochHook& on_epoch_end = {}) {
  cfg.validate();
  if (train.size() < 2) throw ValidationError("training set needs at least 2 samples");
  const ModelSpec spec = model_spec_for(cfg, train.input_dim());
  Model model = Model::initialize(spec, derive_seed(cfg.seed, seed_stream::init));

  TrainOutcome out;
  out.counters.cosine_head = cfg.head == HeadKind::cosine ? 1 : 0;
  Rng shuffle_rng(derive_seed(cfg.seed, seed_stream::shuffle));
  Rng mix_rng(derive_seed(cfg.seed, seed_stream::mixup));
  Rng crl_rng(derive_seed(cfg.seed, seed_stream::crl));

  const MixupConfig mix_cfg{cfg.beta, cfg.lambda_mix > 0.0};
  const LossWeights weights{cfg.lambda_mix, cfg.lambda_crl};
  const SAMConfig sam{cfg.rho};
  SGDConfig sgd{cfg.lr, cfg.momentum, cfg.weight_decay, {}};
  if (!cfg.decay_prototypes && cfg.head == HeadKind::cosine) sgd.no_decay.push_back("head.weight");
  const LRSchedule sched{cfg.lr, cfg.lr_min, cfg.epochs};
  SWAState swa;
  swa.start_epoch = cfg.swa_start;
  swa.swa_lr = cfg.swa_lr;
  const bool use_swa = cfg.swa_enabled();

  CorrectnessHistory history(train.size());
  Velocity velocity;
  const std::size_t B = cfg.batch_size;

  bool have_best = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    sgd.lr = epoch_learning_rate(sched, use_swa ? &swa : nullptr, epoch);
    const auto order = random_permutation(train.size(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      std::size_t end = std::min(order.size(), start + B);
      if (end - start < 2) break;  // a trailing singleton cannot be mixed or paired
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Batch batch = make_batch(train, rows);

      // Random draws are shared by both SAM passes.
      std::optional<MixupPlan> plan;
      if (cfg.lambda_mix > 0.0) plan = draw_mixup_plan(batch.size(), mix_cfg, mix_rng);
      const bool crl_ready = cfg.lambda_crl > 0.0 && history_covers(history, batch.ids);
      std::vector<std::size_t> pairing;
      if (crl_ready) pairing = draw_crl_pairing(batch.size(), crl_rng);

      Tensor clean_logits;
      bool first_pass = true;
      auto closure = [&]() -> LossAndGrad {
        Tape tape;
        const auto bound = model.bind(tape);
        const auto clean = model.forward(bound, tape.constant(batch.inputs));
        Var ce = cross_entropy(clean.logits, batch.targets);
        std::optional<Var> mix, crl;
        std::optional<Var> mixed_logits;
        if (plan) {
          auto [mx, my] = mix_batch(batch, *plan);
          mixed_logits = model.forward(bound, tape.constant(std::move(mx))).logits;
          mix = cross_entropy(*mixed_logits, my);
          ++out.counters.mixup_passes;
        }
        if (crl_ready) {
          std::vector<double> c(batch.size());
          for (std::size_t i = 0; i < c.size(); ++i) c[i] = history.correctness(batch.ids[i]);
          Var conf = row_max(softmax(clean.logits));
          Var term = crl_batch_loss(conf, c, pairing);
          if (cfg.crl_on_mixup && plan) {
            std::vector<double> cm(batch.size());
            for (std::size_t i = 0; i < cm.size(); ++i)
              cm[i] = plan->m[i] * c[i] + (1.0 - plan->m[i]) * c[plan->partner[i]];
            term = scale(add(term, crl_batch_loss(row_max(softmax(*mixed_logits)), cm, pairing)), 0.5);
          }
          crl = term;
          ++out.counters.crl_terms;
        }
        Var total = total_loss(ce, mix, crl, weights);
        if (first_pass) {
          clean_logits = clean.logits.value();
          first_pass = false;
        }
        return {total.value().item(), backward(tape, total)};
      };

      double step_loss = 0.0;
      if (cfg.sam_enabled()) {
        step_loss = sam_step(model.params(), closure, sgd, sam, velocity).loss;
        ++out.counters.sam_second_passes;
      } else {
        LossAndGrad lg = closure();
        if (!std::isfinite(lg.loss)) throw DivergenceError("loss is not finite");
        sgd_step(model.params(), lg.grads, sgd, velocity);
        step_loss = lg.loss;
      }
      ++out.counters.steps;
      loss_sum += step_loss;
      ++loss_n;
      update_correctness_history(history, batch.ids, clean_logits, batch.labels);
    }

    if (use_swa && epoch >= swa.start_epoch) {
      swa_update(swa, model.params(), epoch);
      ++out.counters.swa_updates;
    }
    if (on_epoch_end) on_epoch_end(epoch, model.params());

    Model current = model;
    if (use_swa && swa.count > 0) swa_finalize(swa, current.params());
    for (const auto& p : current.params()) check_finite(p.value, "parameter '" + p.name + "'");

    EpochLog log;
    log.epoch = epoch;
    log.lr = sgd.lr;
    log.mean_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    if (!val.empty()) {
      const auto recs = predict_records(current, val);
      log.val_aurc = aurc(recs);
      log.val_accuracy = accuracy(recs);
    }
    out.log.push_back(log);

    const bool select_here = cfg.selection == "final" || val.empty() ? epoch == cfg.epochs - 1
                                                                      : (!have_best || log.val_aurc < out.selected_val_aurc);
    if (select_here) {
      out.model = current;
      out.selected_epoch = epoch;
      out.selected_val_aurc = log.val_aurc;
      have_best = true;
    }
    if (epoch == cfg.epochs - 1) out.final_model = std::move(current);
  }
  return out;
}

struct CorruptionReport {
  CorruptionSpec spec;
  MetricReport report;
};

struct EvalSummary {
  MetricReport clean;
  std::vector<EvalRecord> clean_records;
  std::vector<CorruptionReport> corrupted;
  std::optional<MetricReport> corrupted_mean;  // mean of each metric over all corruptions
};

inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m{0.0, 0.0, 0.0, 0.0};
  if (reports.empty()) return m;
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    m.accuracy += r.accuracy / n;
    m.aurc += r.aurc / n;
    m.auroc += r.auroc / n;
    m.fpr95 += r.fpr95 / n;
  }
  return m;
}

inline EvalSummary run_eval(const Model& model, const Dataset& test, const std::vector<CorruptionSpec>& corruptions,
                            std::uint64_t seed) {
  EvalSummary s;
  s.clean_records = predict_records(model, test);
  s.clean = evaluate_records(s.clean_records);
  std::vector<MetricReport> reports;
  std::uint64_t k = 0;
  for (const auto& c : corruptions) {
    const Dataset shifted = corrupt(test, c, derive_seed(derive_seed(seed, seed_stream::corruption), k++));
    MetricReport r = evaluate_records(predict_records(model, shifted));
    s.corrupted.push_back({c, r});
    reports.push_back(r);
  }
  if (!reports.empty()) s.corrupted_mean = mean_report(reports);
  return s;
}

struct RunResult {
  ExperimentConfig config;
  TrainOutcome training;
  EvalSummary test;           // selected model
  MetricReport final_test;    // final-epoch model, clean test set
  std::optional<MetricReport> val;
  std::optional<EvalSummary> reweighted;  // stage-2 model
  double test_balanced_accuracy = 0.0;
  double final_balanced_accuracy = 0.0;  // the model stage 2 starts from
  std::optional<double> reweighted_balanced_accuracy;
  std::optional<UncertaintyScores> scores;
  std::vector<std::string> warnings;
  std::optional<LongTailProfile> long_tail;
  double seconds_data = 0.0;
  double seconds_train = 0.0;
  double seconds_eval = 0.0;
  Dataset train;  // kept for score export
};

/// Builds the data, trains, optionally re-weights, evaluates. Throws
/// DivergenceError on NaN losses.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
  RunResult r;
  r.config = cfg;
  auto t0 = clock::now();
  ExperimentData data = build_data(cfg);
  r.warnings = data.warnings;
  r.long_tail = data.long_tail;
  auto t1 = clock::now();
  r.training = train_sure(cfg, data.train, data.val);
  auto t2 = clock::now();
  r.test = run_eval(r.training.model, data.test, cfg.corruptions, cfg.seed);
  r.test_balanced_accuracy = balanced_accuracy(r.test.clean_records, cfg.num_classes);
  {
    const auto final_records = predict_records(r.training.final_model, data.test);
    r.final_test = evaluate_records(final_records);
    r.final_balanced_accuracy = balanced_accuracy(final_records, cfg.num_classes);
  }
  if (!data.val.empty()) r.val = evaluate_records(predict_records(r.training.model, data.val));
  if (cfg.reweight) {
    FineTuneConfig ft{cfg.reweight_epochs, cfg.reweight_lr, cfg.momentum, cfg.weight_decay, cfg.batch_size,
                      derive_seed(cfg.seed, seed_stream::reweight)};
    ReweightResult rw = reweight_stage(r.training.final_model, data.train, ReweightMap{cfg.reweight_map, cfg.reweight_param}, ft);
    if (rw.fallback_batches > 0)
      r.warnings.push_back(std::to_string(rw.fallback_batches) + " re-weighting batches had all-zero weights; used uniform");
    r.reweighted = run_eval(rw.model, data.test, cfg.corruptions, cfg.seed);
    r.reweighted_balanced_accuracy = balanced_accuracy(r.reweighted->clean_records, cfg.num_classes);
    r.scores = std::move(rw.scores);
  }
  r.train = std::move(data.train);
  auto t3 = clock::now();
  r.seconds_data = secs(t0, t1);
  r.seconds_train = secs(t1, t2);
  r.seconds_eval = secs(t2, t3);
  return r;
}

}  // namespace sure
