#pragma once

// Run manifest (JSON) and report files.
//
// Files written by emit_report into an output directory:
//   manifest.json   resolved config, version, seed, timings, warnings,
//                   metric reports per split, counters, artifact paths
//   metrics.csv     run_id,accuracy,aurc_x1000,auroc,fpr95
//   curve.csv       coverage,risk (one row per test sample)
//   histogram.csv   bin_lo,bin_hi,correct,incorrect (20 bins over [0, 1])
//   curve.svg       risk-coverage plot
//   model.ckpt      selected model checkpoint
//   scores.csv      sample_id,score (only with re-weighting)

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sure/experiment.hpp"
#include "sure/metrics.hpp"

namespace sure {

using json = nlohmann::json;

namespace detail {

inline json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double num_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline json to_json(const MetricReport& r) {
  return json{{"accuracy", detail::num_or_null(r.accuracy)},
              {"aurc", detail::num_or_null(r.aurc)},
              {"aurc_x1000", detail::num_or_null(r.aurc_x1000())},
              {"auroc", detail::num_or_null(r.auroc)},
              {"fpr95", detail::num_or_null(r.fpr95)}};
}

inline MetricReport metric_report_from_json(const json& j) {
  MetricReport r;
  r.accuracy = detail::num_from(j.at("accuracy"));
  r.aurc = detail::num_from(j.at("aurc"));
  r.auroc = detail::num_from(j.at("auroc"));
  r.fpr95 = detail::num_from(j.at("fpr95"));
  return r;
}

inline json to_json(const EvalSummary& s) {
  json j;
  j["clean"] = to_json(s.clean);
  json cs = json::array();
  for (const auto& c : s.corrupted)
    cs.push_back({{"kind", to_string(c.spec.kind)}, {"severity", c.spec.severity}, {"metrics", to_json(c.report)}});
  j["corrupted"] = cs;
  if (s.corrupted_mean) j["corrupted_mean"] = to_json(*s.corrupted_mean);
  return j;
}

inline json config_json(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.to_pairs()) j[k] = v;
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : j.items()) cfg.set(k, v.get<std::string>());
  return cfg;
}

/// Manifest of a completed run.
inline json build_manifest(const RunResult& r, const json& artifacts = json::object()) {
  json m;
  m["version"] = kVersion;
  m["run_id"] = r.config.run_id;
  m["seed"] = r.config.seed;
  m["config"] = config_json(r.config);
  m["status"] = "ok";
  m["timings_seconds"] = {{"data", r.seconds_data}, {"train", r.seconds_train}, {"eval", r.seconds_eval}};
  m["warnings"] = r.warnings;
  m["selection"] = {{"rule", r.config.selection},
                    {"epoch", r.training.selected_epoch},
                    {"val_aurc", detail::num_or_null(r.training.selected_val_aurc)}};
  const auto& c = r.training.counters;
  m["counters"] = {{"steps", c.steps},           {"mixup_passes", c.mixup_passes},
                   {"crl_terms", c.crl_terms},   {"sam_second_passes", c.sam_second_passes},
                   {"swa_updates", c.swa_updates}, {"cosine_head", c.cosine_head}};
  json metrics;
  metrics["test"] = to_json(r.test);
  metrics["test"]["balanced_accuracy"] = r.test_balanced_accuracy;
  metrics["final_epoch_test"] = to_json(r.final_test);
  metrics["final_epoch_test"]["balanced_accuracy"] = r.final_balanced_accuracy;
  if (r.val) metrics["val"] = to_json(*r.val);
  if (r.reweighted) {
    metrics["reweighted_test"] = to_json(*r.reweighted);
    metrics["reweighted_test"]["balanced_accuracy"] = *r.reweighted_balanced_accuracy;
  }
  m["metrics"] = metrics;
  if (r.long_tail) m["long_tail"] = {{"imbalance_factor", r.long_tail->imbalance_factor}, {"counts", r.long_tail->counts}};
  json log = json::array();
  for (const auto& e : r.training.log)
    log.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.mean_loss}, {"val_aurc", e.val_aurc},
                   {"val_accuracy", e.val_accuracy}});
  m["epochs"] = log;
  m["artifacts"] = artifacts;
  return m;
}

/// Manifest of a run that stopped on an error.
inline json failure_manifest(const ExperimentConfig& cfg, const std::string& kind, const std::string& message) {
  json m;
  m["version"] = kVersion;
  m["run_id"] = cfg.run_id;
  m["seed"] = cfg.seed;
  m["config"] = config_json(cfg);
  m["status"] = kind;
  m["error"] = message;
  return m;
}

inline const char* kMetricsHeader = "run_id,accuracy,aurc_x1000,auroc,fpr95";

inline std::string format_metric(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_metrics_csv(std::ostream& os, const std::string& run_id, const MetricReport& r) {
  os << kMetricsHeader << '\n'
     << run_id << ',' << format_metric(r.accuracy) << ',' << format_metric(r.aurc_x1000()) << ','
     << format_metric(r.auroc) << ',' << format_metric(r.fpr95) << '\n';
}

inline double parse_metric(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw IoError("metrics csv: bad number '" + s + "'");
  }
}

/// Reads rows written by write_metrics_csv.
inline std::vector<std::pair<std::string, MetricReport>> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw IoError("metrics csv: unexpected header");
  std::vector<std::pair<std::string, MetricReport>> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 5) throw IoError("metrics csv: expected 5 fields");
    MetricReport r;
    r.accuracy = parse_metric(f[1]);
    r.aurc = parse_metric(f[2]) / 1000.0;
    r.auroc = parse_metric(f[3]);
    r.fpr95 = parse_metric(f[4]);
    out.emplace_back(f[0], r);
  }
  return out;
}

inline void write_curve_csv(std::ostream& os, const RiskCoverageCurve& curve) {
  os << "coverage,risk\n" << std::setprecision(17);
  for (const auto& p : curve.points) os << p.coverage << ',' << p.risk << '\n';
}

inline void write_histogram_csv(std::ostream& os, const ConfidenceHistogram& h) {
  os << "bin_lo,bin_hi,correct,incorrect\n";
  for (std::size_t b = 0; b < h.correct.size(); ++b)
    os << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.correct[b] << ',' << h.incorrect[b] << '\n';
}

inline void write_curve_svg(std::ostream& os, const RiskCoverageCurve& curve, const std::string& title) {
  const double W = 480, H = 360, L = 50, R = 20, T = 30, Bm = 40;
  double max_risk = 0.0;
  for (const auto& p : curve.points) max_risk = std::max(max_risk, p.risk);
  max_risk = max_risk > 0.0 ? max_risk : 1.0;
  auto X = [&](double c) { return L + c * (W - L - R); };
  auto Y = [&](double r) { return H - Bm - r / max_risk * (H - T - Bm); };
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - Bm << "\" x2=\"" << W - R << "\" y2=\"" << H - Bm << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - Bm << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">coverage</text>\n"
     << "<text x=\"14\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << H / 2
     << ")\" text-anchor=\"middle\">risk (max " << format_metric(max_risk) << ")</text>\n"
     << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (const auto& p : curve.points) os << X(p.coverage) << ',' << Y(p.risk) << ' ';
  os << "\"/>\n</svg>\n";
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << content;
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

/// Writes every report file of a run into `dir` and returns the manifest.
inline json emit_report(const RunResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());

  const auto curve = risk_coverage_curve(r.test.clean_records);
  json artifacts;
  auto emit = [&](const char* key, const char* file, auto&& writer) {
    std::ostringstream os;
    writer(os);
    write_text_file(dir / file, os.str());
    artifacts[key] = (dir / file).string();
  };
  emit("metrics", "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, r.config.run_id, r.test.clean); });
  emit("curve", "curve.csv", [&](std::ostream& os) { write_curve_csv(os, curve); });
  emit("histogram", "histogram.csv",
       [&](std::ostream& os) { write_histogram_csv(os, confidence_histogram(r.test.clean_records, 20)); });
  emit("curve_plot", "curve.svg", [&](std::ostream& os) { write_curve_svg(os, curve, "risk-coverage: " + r.config.run_id); });
  emit("predictions", "predictions.csv", [&](std::ostream& os) { write_prediction_dump(os, r.test.clean_records); });
  emit("model", "model.ckpt", [&](std::ostream& os) { write_checkpoint(os, r.training.model); });
  if (r.scores) emit("scores", "scores.csv", [&](std::ostream& os) { write_scores_csv(os, r.train, *r.scores); });
  artifacts["manifest"] = (dir / "manifest.json").string();

  json manifest = build_manifest(r, artifacts);
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

inline json read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("manifest '" + path.string() + "': " + e.what());
  }
}

}  // namespace sure
