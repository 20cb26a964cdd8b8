#pragma once

// Component ablation grid: every requested on/off combination of the five
// recipe components, each cell averaged over several seeds.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "sure/config.hpp"
#include "sure/experiment.hpp"
#include "sure/metrics.hpp"

namespace sure {

enum Component : unsigned { kCrl = 1u << 0, kMix = 1u << 1, kSam = 1u << 2, kSwa = 1u << 3, kCsc = 1u << 4 };
inline constexpr unsigned kAllComponents = kCrl | kMix | kSam | kSwa | kCsc;

inline std::string components_label(unsigned mask) {
  if (mask == 0) return "baseline";
  static const std::pair<unsigned, const char*> names[] = {
      {kCrl, "crl"}, {kMix, "mix"}, {kSam, "sam"}, {kSwa, "swa"}, {kCsc, "csc"}};
  std::string s;
  for (const auto& [bit, name] : names)
    if (mask & bit) s += (s.empty() ? "" : "+") + std::string(name);
  return s;
}

inline unsigned parse_component(const std::string& s) {
  if (s == "crl") return kCrl;
  if (s == "mix") return kMix;
  if (s == "sam") return kSam;
  if (s == "swa") return kSwa;
  if (s == "csc") return kCsc;
  throw ValidationError("unknown component '" + s + "' (expected crl, mix, sam, swa or csc)");
}

/// Applies a component mask to `base`. Components that are on keep the base
/// value, falling back to the recipe default when the base has them off.
inline ExperimentConfig apply_components(ExperimentConfig cfg, unsigned mask) {
  const ExperimentConfig defaults;
  auto on_value = [](double base, double fallback) { return base > 0.0 ? base : fallback; };
  cfg.lambda_crl = (mask & kCrl) ? on_value(cfg.lambda_crl, 1.0) : 0.0;
  cfg.lambda_mix = (mask & kMix) ? on_value(cfg.lambda_mix, 1.0) : 0.0;
  cfg.rho = (mask & kSam) ? on_value(cfg.rho, defaults.rho) : 0.0;
  if (mask & kSwa) {
    if (!cfg.swa_enabled()) cfg.swa_start = std::max(0, cfg.epochs * 3 / 5);
  } else {
    cfg.swa_start = cfg.epochs;
  }
  cfg.head = (mask & kCsc) ? HeadKind::cosine : HeadKind::linear;
  return cfg;
}

/// The baseline (empty mask), every single component, and the full recipe.
inline std::vector<unsigned> single_component_masks() {
  return {0u, kSam, kSwa, kCrl, kMix, kCsc, kAllComponents};
}

inline std::vector<unsigned> all_component_masks() {
  std::vector<unsigned> m;
  for (unsigned i = 0; i <= kAllComponents; ++i) m.push_back(i);
  return m;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return {std::nan(""), std::nan("")};
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct CellRun {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricReport test;
  std::optional<MetricReport> corrupted_mean;
  TrainingCounters counters;
};

struct AblationRow {
  unsigned mask = 0;
  std::string label;
  std::vector<CellRun> runs;
  MeanStd accuracy, aurc, auroc, fpr95;
  std::size_t failures = 0;

  std::vector<double> values(double MetricReport::*field) const {
    std::vector<double> v;
    for (const auto& r : runs)
      if (r.ok) v.push_back(r.test.*field);
    return v;
  }
};

struct AblationOptions {
  std::vector<unsigned> masks = all_component_masks();
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  unsigned jobs = 1;  // concurrent cells
};

/// Runs every (mask, seed) cell. A failing cell is recorded and the grid
/// continues. Rows are sorted by mean test AURC, failed rows last.
inline std::vector<AblationRow> run_ablation_grid(const ExperimentConfig& base, const AblationOptions& opt) {
  base.validate();
  if (opt.seeds.empty()) throw ValidationError("ablation needs at least one seed");
  if (opt.masks.empty()) throw ValidationError("ablation needs at least one component combination");
  for (unsigned m : opt.masks)
    if (m > kAllComponents) throw ValidationError("component mask out of range");

  std::vector<AblationRow> rows(opt.masks.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].mask = opt.masks[i];
    rows[i].label = components_label(opt.masks[i]);
    rows[i].runs.resize(opt.seeds.size());
  }
  const std::size_t cells = rows.size() * opt.seeds.size();
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c; (c = next.fetch_add(1)) < cells;) {
      const std::size_t ri = c / opt.seeds.size(), si = c % opt.seeds.size();
      CellRun& run = rows[ri].runs[si];  // each cell writes only its own slot
      run.seed = opt.seeds[si];
      try {
        ExperimentConfig cfg = apply_components(base, rows[ri].mask);
        cfg.seed = run.seed;
        cfg.seed_given = true;
        cfg.reweight = false;
        cfg.run_id = base.run_id + "-" + rows[ri].label + "-s" + std::to_string(run.seed);
        const RunResult r = run_experiment(cfg);
        run.test = r.test.clean;
        run.corrupted_mean = r.test.corrupted_mean;
        run.counters = r.training.counters;
        run.ok = true;
      } catch (const std::exception& e) {
        run.error = e.what();
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(cells)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (auto& row : rows) {
    for (const auto& r : row.runs) row.failures += r.ok ? 0 : 1;
    row.accuracy = mean_std(row.values(&MetricReport::accuracy));
    row.aurc = mean_std(row.values(&MetricReport::aurc));
    row.auroc = mean_std(row.values(&MetricReport::auroc));
    row.fpr95 = mean_std(row.values(&MetricReport::fpr95));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    const bool fa = std::isnan(a.aurc.mean), fb = std::isnan(b.aurc.mean);
    if (fa != fb) return fb;
    return !fa && a.aurc.mean < b.aurc.mean;
  });
  return rows;
}

/// CSV comparison table: one row per combination.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "components,crl,mix,sam,swa,csc,runs,failures,accuracy_mean,accuracy_std,aurc_x1000_mean,aurc_x1000_std,"
        "auroc_mean,auroc_std,fpr95_mean,fpr95_std\n";
  auto f = [](double v) {
    std::ostringstream s;
    s << std::setprecision(10) << v;
    return std::isfinite(v) ? s.str() : std::string("nan");
  };
  for (const auto& r : rows) {
    os << r.label;
    for (unsigned bit : {kCrl, kMix, kSam, kSwa, kCsc}) os << ',' << ((r.mask & bit) ? 1 : 0);
    os << ',' << r.runs.size() << ',' << r.failures << ',' << f(r.accuracy.mean) << ',' << f(r.accuracy.std) << ','
       << f(1000.0 * r.aurc.mean) << ',' << f(1000.0 * r.aurc.std) << ',' << f(r.auroc.mean) << ',' << f(r.auroc.std)
       << ',' << f(r.fpr95.mean) << ',' << f(r.fpr95.std) << '\n';
  }
}

}  // namespace sure
