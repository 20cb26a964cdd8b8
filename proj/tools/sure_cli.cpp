// Command-line front end: train, eval, ablate, report, metrics.
//
// Exit codes: 0 success, 1 validation error, 2 divergence, 3 I/O error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sure/sure.hpp"

namespace fs = std::filesystem;
using namespace sure;

namespace {

enum Exit { kOk = 0, kValidation = 1, kDivergence = 2, kIo = 3 };

struct ConfigArgs {
  std::string config_path;
  std::string preset = "desk";
  std::map<std::string, std::string> overrides;
};

/// Registers --config, --preset and one --<key> flag per config key.
void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("--config", args.config_path, "flat key = value config file");
  app->add_option("--preset", args.preset, "starting values before the config file: default, desk or full")
      ->check(CLI::IsMember({"default", "desk", "full"}));
  for (const auto& key : ExperimentConfig::keys())
    app->add_option("--" + key, args.overrides[key], "override config key '" + key + "'");
}

ExperimentConfig resolve_config(const CLI::App* app, const ConfigArgs& args) {
  ExperimentConfig cfg = args.preset == "desk"   ? desk_benchmark_preset()
                         : args.preset == "full" ? full_schedule_preset()
                                                 : ExperimentConfig{};
  if (!args.config_path.empty()) cfg = load_config(args.config_path, cfg);
  for (const auto& [key, value] : args.overrides)
    if (app->count("--" + key) > 0) cfg.set(key, value);
  cfg.validate();
  return cfg;
}

void print_metrics(const std::string& run_id, const MetricReport& r) { write_metrics_csv(std::cout, run_id, r); }

void write_failure(const fs::path& out, const ExperimentConfig& cfg, const std::string& kind, const std::string& msg) {
  try {
    fs::create_directories(out);
    write_text_file(out / "manifest.json", failure_manifest(cfg, kind, msg).dump(2) + "\n");
    std::cerr << "diagnostic manifest: " << (out / "manifest.json").string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "could not write diagnostic manifest: " << e.what() << '\n';
  }
}

/// Metrics, curve, histogram and plot for a set of predictions.
void write_prediction_reports(const fs::path& out, const std::string& run_id, const std::vector<EvalRecord>& records) {
  fs::create_directories(out);
  const MetricReport m = evaluate_records(records);
  const auto curve = risk_coverage_curve(records);
  std::ostringstream metrics, curve_csv, hist, svg;
  write_metrics_csv(metrics, run_id, m);
  write_curve_csv(curve_csv, curve);
  write_histogram_csv(hist, confidence_histogram(records, 20));
  write_curve_svg(svg, curve, "risk-coverage: " + run_id);
  write_text_file(out / "metrics.csv", metrics.str());
  write_text_file(out / "curve.csv", curve_csv.str());
  write_text_file(out / "histogram.csv", hist.str());
  write_text_file(out / "curve.svg", svg.str());
}

int run_train(const CLI::App* app, const ConfigArgs& args, const std::string& out_dir) {
  if (app->count("--seed") == 0) throw ValidationError("seed: --seed is required for train");
  const ExperimentConfig cfg = resolve_config(app, args);
  const fs::path out = out_dir.empty() ? fs::path("runs") / cfg.run_id : fs::path(out_dir);
  try {
    const RunResult r = run_experiment(cfg);
    const json manifest = emit_report(r, out);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    print_metrics(cfg.run_id, r.test.clean);
    if (r.reweighted) print_metrics(cfg.run_id + "-reweighted", r.reweighted->clean);
    std::cerr << "manifest: " << manifest["artifacts"]["manifest"].get<std::string>() << '\n';
  } catch (const DivergenceError& e) {
    write_failure(out, cfg, "diverged", e.what());
    throw;
  }
  return kOk;
}

int run_eval_cmd(const CLI::App* app, const ConfigArgs& args, const std::string& predictions, const std::string& model_path,
                 const std::string& out_dir) {
  if (!predictions.empty()) {
    const auto records = read_prediction_dump(predictions);
    const std::string run_id = fs::path(predictions).stem().string();
    if (!out_dir.empty()) write_prediction_reports(out_dir, run_id, records);
    print_metrics(run_id, evaluate_records(records));
    return kOk;
  }
  if (model_path.empty()) throw ValidationError("eval: give --predictions or --model");
  const ExperimentConfig cfg = resolve_config(app, args);
  const Model model = load_checkpoint(model_path);
  const ExperimentData data = build_data(cfg);
  const EvalSummary s = run_eval(model, data.test, cfg.corruptions, cfg.seed);
  if (!out_dir.empty()) {
    write_prediction_reports(out_dir, cfg.run_id, s.clean_records);
    write_text_file(fs::path(out_dir) / "eval.json", to_json(s).dump(2) + "\n");
  }
  print_metrics(cfg.run_id, s.clean);
  for (const auto& c : s.corrupted)
    std::cout << cfg.run_id << '-' << to_string(c.spec.kind) << '-' << c.spec.severity << ','
              << format_metric(c.report.accuracy) << ',' << format_metric(c.report.aurc_x1000()) << ','
              << format_metric(c.report.auroc) << ',' << format_metric(c.report.fpr95) << '\n';
  if (s.corrupted_mean)
    std::cout << cfg.run_id << "-corrupted-mean," << format_metric(s.corrupted_mean->accuracy) << ','
              << format_metric(s.corrupted_mean->aurc_x1000()) << ',' << format_metric(s.corrupted_mean->auroc) << ','
              << format_metric(s.corrupted_mean->fpr95) << '\n';
  return kOk;
}

int run_ablate(const CLI::App* app, const ConfigArgs& args, const std::string& components, bool single,
               std::size_t num_seeds, unsigned jobs, const std::string& out_path) {
  const ExperimentConfig cfg = resolve_config(app, args);
  AblationOptions opt;
  opt.jobs = jobs;
  opt.seeds.clear();
  if (num_seeds < 1) throw ValidationError("seeds: must be >= 1");
  for (std::size_t i = 0; i < num_seeds; ++i) opt.seeds.push_back(cfg.seed + i);
  if (single) {
    opt.masks = single_component_masks();
  } else {
    unsigned varied = 0;
    for (const auto& name : detail::split(components, ',')) varied |= parse_component(detail::trim(name));
    const unsigned fixed = kAllComponents & ~varied;  // components not varied stay on
    opt.masks.clear();
    for (unsigned m = 0; m <= kAllComponents; ++m)
      if ((m & ~varied) == 0) opt.masks.push_back(m | fixed);
  }
  const auto rows = run_ablation_grid(cfg, opt);
  std::ostringstream table;
  write_ablation_csv(table, rows);
  std::cout << table.str();
  if (!out_path.empty()) write_text_file(out_path, table.str());
  std::size_t failed = 0;
  for (const auto& r : rows)
    for (const auto& run : r.runs)
      if (!run.ok) {
        ++failed;
        std::cerr << "cell " << r.label << " seed " << run.seed << " failed: " << run.error << '\n';
      }
  if (failed) std::cerr << failed << " grid cells failed\n";
  return kOk;
}

int run_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const json manifest = read_manifest(dir / "manifest.json");
  const std::string run_id = manifest.value("run_id", std::string("run"));
  const auto records = read_prediction_dump((dir / "predictions.csv").string());
  write_prediction_reports(dir, run_id, records);
  std::cout << "run " << run_id << " (version " << manifest.value("version", std::string("?")) << ", seed "
            << manifest.value("seed", 0ULL) << ")\n";
  if (manifest.contains("metrics"))
    for (const auto& [split, m] : manifest["metrics"].items()) {
      const MetricReport r = metric_report_from_json(m.contains("clean") ? m["clean"] : m);
      std::cout << "  " << split << ": accuracy " << format_metric(r.accuracy) << ", aurc_x1000 "
                << format_metric(r.aurc_x1000()) << ", auroc " << format_metric(r.auroc) << ", fpr95 "
                << format_metric(r.fpr95) << '\n';
    }
  if (manifest.contains("warnings"))
    for (const auto& w : manifest["warnings"]) std::cout << "  warning: " << w.get<std::string>() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Failure-prediction training recipe: train, evaluate, ablate and report"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  ConfigArgs train_cfg, eval_cfg, ablate_cfg;
  std::string train_out, eval_out, eval_predictions, eval_model, ablate_components = "crl,mix,sam,swa,csc", ablate_out;
  std::string report_dir, metrics_predictions;
  bool ablate_single = false;
  std::size_t ablate_seeds = 3;
  unsigned ablate_jobs = 1;

  auto* train = app.add_subcommand("train", "train one configuration and write its report");
  add_config_options(train, train_cfg);
  train->add_option("--out", train_out, "output directory (default runs/<run_id>)");

  auto* eval = app.add_subcommand("eval", "evaluate a prediction dump or a checkpoint on the configured test set");
  add_config_options(eval, eval_cfg);
  eval->add_option("--predictions", eval_predictions, "prediction dump: confidence,predicted,true_label");
  eval->add_option("--model", eval_model, "checkpoint written by train");
  eval->add_option("--out", eval_out, "directory for metrics, curve and histogram files");

  auto* ablate = app.add_subcommand("ablate", "component ablation grid");
  add_config_options(ablate, ablate_cfg);
  ablate->add_option("--components", ablate_components, "comma-separated components to toggle; others stay on");
  ablate->add_flag("--single", ablate_single, "baseline, each single component and the full recipe only");
  ablate->add_option("--seeds", ablate_seeds, "seeds per cell, starting at --seed");
  ablate->add_option("--jobs", ablate_jobs, "cells run concurrently");
  ablate->add_option("--out", ablate_out, "write the comparison table to this CSV file");

  auto* report = app.add_subcommand("report", "regenerate curve, histogram and plot for a run directory");
  report->add_option("run_dir", report_dir, "directory written by train")->required();

  auto* metrics = app.add_subcommand("metrics", "metrics of a prediction dump");
  metrics->add_option("predictions", metrics_predictions, "prediction dump: confidence,predicted,true_label")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*train) return run_train(train, train_cfg, train_out);
    if (*eval) return run_eval_cmd(eval, eval_cfg, eval_predictions, eval_model, eval_out);
    if (*ablate)
      return run_ablate(ablate, ablate_cfg, ablate_components, ablate_single, ablate_seeds, ablate_jobs, ablate_out);
    if (*report) return run_report(report_dir);
    if (*metrics) {
      const auto records = read_prediction_dump(metrics_predictions);
      print_metrics(fs::path(metrics_predictions).stem().string(), evaluate_records(records));
      return kOk;
    }
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kValidation;
}
