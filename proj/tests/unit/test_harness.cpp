#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "sure/sure.hpp"

using namespace sure;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(std::uint64_t seed = 1) {
  ExperimentConfig c;
  c.num_classes = 3;
  c.dim = 4;
  c.train_per_class = 20;
  c.test_per_class = 15;
  c.hidden = {8};
  c.epochs = 3;
  c.swa_start = 1;
  c.batch_size = 16;
  c.seed = seed;
  c.seed_given = true;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("sure_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

bool same_report(const MetricReport& a, const MetricReport& b) {
  auto eq = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  return eq(a.accuracy, b.accuracy) && eq(a.aurc, b.aurc) && eq(a.auroc, b.auroc) && eq(a.fpr95, b.fpr95);
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string& args, const fs::path& work) {
  const fs::path out = work / "stdout.txt";
  const std::string cmd = "cd '" + work.string() + "' && '" SURE_CLI_PATH "' " + args + " > '" + out.string() + "' 2> '" +
                          (work / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsAndPresetsValidate) {
  EXPECT_NO_THROW(ExperimentConfig{}.validate());
  const auto desk = desk_benchmark_preset();
  EXPECT_NO_THROW(desk.validate());
  EXPECT_EQ(desk.num_classes, 10u);
  EXPECT_EQ(desk.dim, 16u);
  EXPECT_EQ(desk.train_per_class, 200u);
  EXPECT_EQ(desk.batch_size, 128u);
  const auto full = full_schedule_preset();
  EXPECT_EQ(full.epochs, 200);
  EXPECT_EQ(full.swa_start, 120);
  EXPECT_NO_THROW(full.validate());
}

TEST(Config, ParseCommentsWhitespaceAndLists) {
  std::istringstream is(
      "# desk run\n"
      "  epochs = 7   # inline comment\n"
      "hidden=32,16\n"
      "head = linear\n"
      "corruptions = gaussian_noise:3, brightness:1\n"
      "\n"
      "relu_features = yes\n");
  const auto c = parse_config(is);
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{32, 16}));
  EXPECT_EQ(c.head, HeadKind::linear);
  ASSERT_EQ(c.corruptions.size(), 2u);
  EXPECT_EQ(c.corruptions[0].kind, CorruptionKind::gaussian_noise);
  EXPECT_EQ(c.corruptions[0].severity, 3);
  EXPECT_EQ(c.corruptions[1].kind, CorruptionKind::brightness);
  EXPECT_TRUE(c.relu_features);
  std::istringstream all("corruptions = all\n");
  EXPECT_EQ(parse_config(all).corruptions.size(), 25u);
}

TEST(Config, ParseErrorsNameTheKey) {
  auto expect_key = [](const std::string& text, const std::string& key) {
    std::istringstream is(text);
    try {
      parse_config(is);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  };
  expect_key("epochs = ten\n", "epochs");
  expect_key("no_such_key = 1\n", "no_such_key");
  expect_key("head = mlp\n", "head");
  expect_key("reweight_map = sigmoid\n", "reweight_map");
  expect_key("corruptions = fog:1\n", "corruptions");
  expect_key("batch_size = -4\n", "batch_size");
  expect_key("lr = 0.1x\n", "lr");
  std::istringstream missing_eq("epochs 7\n");
  EXPECT_THROW(parse_config(missing_eq), ValidationError);
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), IoError);
}

TEST(Config, WriteThenParseRoundTrips) {
  ExperimentConfig c = tiny(42);
  c.corruptions = {{CorruptionKind::contrast, 2}, {CorruptionKind::box_blur, 5}};
  c.input_shape = {2, 2};
  c.reweight_map = ReweightKind::power;
  c.reweight_param = 2.5;
  c.lr = 0.1 / 3.0;
  std::stringstream ss;
  write_config(ss, c);
  const auto back = parse_config(ss);
  EXPECT_EQ(back.to_pairs(), c.to_pairs());
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(config_from_json(config_json(c)).to_pairs(), c.to_pairs());
}

TEST(Config, FuzzedInvalidConfigsAreAllRejectedByField) {
  using Mutator = std::function<void(ExperimentConfig&, std::mt19937_64&)>;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<std::pair<std::string, Mutator>> mutators = {
      {"num_classes", [](auto& c, auto& r) { c.num_classes = r() % 2; }},
      {"dim", [](auto& c, auto&) { c.dim = 0; }},
      {"train_per_class", [](auto& c, auto&) { c.train_per_class = 0; }},
      {"test_per_class", [](auto& c, auto&) { c.test_per_class = 0; }},
      {"sigma_gap", [&](auto& c, auto& r) { c.sigma_gap = -1.0 - 10 * u(r); }},
      {"long_tail_if", [&](auto& c, auto& r) { c.long_tail_if = u(r) * 0.999; }},
      {"noise_rate", [&](auto& c, auto& r) { c.noise_rate = r() % 2 ? -u(r) - 1e-9 : 1.0 + u(r) + 1e-9; }},
      {"val_fraction", [&](auto& c, auto& r) { c.val_fraction = r() % 2 ? -u(r) : 1.0 + u(r); }},
      {"hidden", [](auto& c, auto&) { c.hidden = {8, 0}; }},
      {"tau", [&](auto& c, auto& r) { c.tau = -u(r); }},
      {"lambda_mix", [&](auto& c, auto& r) { c.lambda_mix = -u(r) - 1e-9; }},
      {"lambda_crl", [&](auto& c, auto& r) { c.lambda_crl = r() % 2 ? -1.0 : std::nan(""); }},
      {"beta", [&](auto& c, auto& r) { c.beta = -u(r); }},
      {"lr", [&](auto& c, auto& r) { c.lr = r() % 2 ? -u(r) : std::numeric_limits<double>::infinity(); }},
      {"lr_min", [&](auto& c, auto& r) { c.lr_min = c.lr + 1.0 + u(r); }},
      {"momentum", [&](auto& c, auto& r) { c.momentum = 1.0 + u(r); }},
      {"weight_decay", [&](auto& c, auto& r) { c.weight_decay = -u(r) - 1e-9; }},
      {"rho", [&](auto& c, auto& r) { c.rho = -u(r) - 1e-9; }},
      {"epochs", [](auto& c, auto& r) { c.epochs = -static_cast<int>(r() % 100); }},
      {"swa_start", [](auto& c, auto& r) { c.swa_start = -1 - static_cast<int>(r() % 100); }},
      {"swa_lr", [](auto& c, auto&) { c.swa_lr = 0.0; }},
      {"batch_size", [](auto& c, auto& r) { c.batch_size = r() % 2; }},
      {"reweight_param", [&](auto& c, auto& r) {
         c.reweight_map = ReweightKind::threshold;
         c.reweight_param = 1.0 + u(r);
       }},
      {"reweight_epochs", [](auto& c, auto&) { c.reweight_epochs = -1; }},
      {"reweight_lr", [](auto& c, auto&) { c.reweight_lr = 0.0; }},
      {"selection", [](auto& c, auto&) { c.selection = "best_acc"; }},
      {"run_id", [](auto& c, auto& r) { c.run_id = r() % 2 ? "" : "a b"; }},
      {"dataset", [](auto& c, auto&) { c.dataset = "imagenet"; }},
      {"input_shape", [](auto& c, auto&) { c.input_shape = {3, 3}; }},
      {"corruptions", [](auto& c, auto& r) { c.corruptions = {{CorruptionKind::contrast, r() % 2 ? 0 : 6}}; }},
  };
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 1000; ++rep) {
    ExperimentConfig c = rep % 2 ? ExperimentConfig{} : desk_benchmark_preset();
    const auto& [field, mutate] = mutators[rng() % mutators.size()];
    mutate(c, rng);
    try {
      c.validate();
      ADD_FAILURE() << "accepted invalid " << field;
    } catch (const ValidationError& e) {
      EXPECT_EQ(std::string(e.what()).rfind(field + ":", 0), 0u) << e.what();
    }
  }
}

// ---------------------------------------------------------------------------
// Seeds and data assembly

TEST(Seeds, DerivedStreamsAreDistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 20; ++s)
    for (std::uint64_t stream = 1; stream <= 12; ++stream) seen.insert(derive_seed(s, stream));
  EXPECT_EQ(seen.size(), 240u);
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}

TEST(BuildData, SplitsNoiseAndLongTail) {
  ExperimentConfig c = tiny();
  c.noise_rate = 0.5;
  const auto d = build_data(c);
  EXPECT_EQ(d.train.size() + d.val.size(), 60u);
  EXPECT_EQ(d.test.size(), 45u);
  EXPECT_EQ(d.clean_train_labels.size(), d.train.size());
  EXPECT_NE(d.clean_train_labels, d.train.labels);

  c = tiny();
  c.train_per_class = 100;
  c.long_tail_if = 10.0;
  const auto lt = build_data(c);
  ASSERT_TRUE(lt.long_tail.has_value());
  EXPECT_EQ(lt.long_tail->counts, (std::vector<std::size_t>{100, 32, 10}));
  EXPECT_EQ(lt.train.size() + lt.val.size(), 142u);
  EXPECT_EQ(lt.test.class_counts(), std::vector<std::size_t>(3, 15));
}

// ---------------------------------------------------------------------------
// Training runs

TEST(Run, SmokeOneEpochOnFiftySamples) {
  ExperimentConfig c = tiny();
  c.num_classes = 5;
  c.train_per_class = 10;
  c.epochs = 1;
  c.swa_start = 1;
  c.batch_size = 8;
  const auto dir = fresh_dir("smoke");
  const RunResult r = run_experiment(c);
  const auto manifest = emit_report(r, dir);
  EXPECT_EQ(manifest["status"], "ok");
  for (const char* k : {"accuracy", "aurc", "auroc", "fpr95"}) EXPECT_TRUE(manifest["metrics"]["test"]["clean"].contains(k));
  EXPECT_EQ(manifest["epochs"].size(), 1u);
  for (const char* f : {"metrics.csv", "curve.csv", "histogram.csv", "curve.svg", "predictions.csv", "model.ckpt",
                        "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST(Run, SameConfigAndSeedIsBitwiseDeterministic) {
  ExperimentConfig c = tiny(5);
  c.corruptions = detail::parse_corruptions("gaussian_noise:2,contrast:4");
  const auto a = run_experiment(c), b = run_experiment(c);
  EXPECT_TRUE(same_report(a.test.clean, b.test.clean));
  EXPECT_TRUE(same_report(a.final_test, b.final_test));
  EXPECT_TRUE(same_report(*a.test.corrupted_mean, *b.test.corrupted_mean));
  EXPECT_TRUE(a.training.model.params() == b.training.model.params());
  auto strip = [](json m) {
    m.erase("timings_seconds");
    m.erase("artifacts");
    return m.dump();
  };
  EXPECT_EQ(strip(build_manifest(a)), strip(build_manifest(b)));
  EXPECT_FALSE(same_report(a.test.clean, run_experiment(tiny(6)).test.clean));
}

TEST(Run, ComponentTogglesDriveExactlyTheirCodePaths) {
  const ExperimentConfig base = tiny(2);
  const auto counters = [&](unsigned mask) { return run_experiment(apply_components(base, mask)).training.counters; };
  const auto none = counters(0);
  EXPECT_GT(none.steps, 0u);
  EXPECT_EQ(none.mixup_passes, 0u);
  EXPECT_EQ(none.crl_terms, 0u);
  EXPECT_EQ(none.sam_second_passes, 0u);
  EXPECT_EQ(none.swa_updates, 0u);
  EXPECT_EQ(none.cosine_head, 0u);
  const auto expect_only = [&](unsigned mask, std::size_t TrainingCounters::*field) {
    const auto c = counters(mask);
    EXPECT_EQ(c.steps, none.steps);
    for (auto f : {&TrainingCounters::mixup_passes, &TrainingCounters::crl_terms, &TrainingCounters::sam_second_passes,
                   &TrainingCounters::swa_updates, &TrainingCounters::cosine_head})
      if (f == field)
        EXPECT_GT(c.*f, 0u) << components_label(mask);
      else
        EXPECT_EQ(c.*f, 0u) << components_label(mask);
  };
  expect_only(kMix, &TrainingCounters::mixup_passes);
  expect_only(kCrl, &TrainingCounters::crl_terms);
  expect_only(kSam, &TrainingCounters::sam_second_passes);
  expect_only(kSwa, &TrainingCounters::swa_updates);
  expect_only(kCsc, &TrainingCounters::cosine_head);
  const auto all = counters(kAllComponents);
  EXPECT_EQ(all.sam_second_passes, all.steps);
  EXPECT_EQ(all.mixup_passes, 2 * all.steps);  // both SAM passes see the mixed batch
  EXPECT_EQ(all.swa_updates, 2u);
}

TEST(Run, BaselineMaskIsTheMspConfiguration) {
  const auto c = apply_components(desk_benchmark_preset(), 0);
  EXPECT_EQ(c.lambda_mix, 0.0);
  EXPECT_EQ(c.lambda_crl, 0.0);
  EXPECT_EQ(c.rho, 0.0);
  EXPECT_FALSE(c.swa_enabled());
  EXPECT_EQ(c.head, HeadKind::linear);
  const auto s = apply_components(desk_benchmark_preset(), kAllComponents);
  EXPECT_EQ(s.lambda_mix, 1.0);
  EXPECT_EQ(s.lambda_crl, 1.0);
  EXPECT_EQ(s.rho, 0.05);
  EXPECT_EQ(s.swa_start, 60);
  EXPECT_EQ(s.head, HeadKind::cosine);
  EXPECT_EQ(apply_components(apply_components(desk_benchmark_preset(), 0), kSwa).swa_start, 60);
}

TEST(Run, SelectedAndFinalModelsAreBothRecorded) {
  ExperimentConfig c = tiny(3);
  c.epochs = 6;
  c.swa_start = 3;
  const auto r = run_experiment(c);
  EXPECT_GE(r.training.selected_epoch, 0);
  EXPECT_LT(r.training.selected_epoch, 6);
  EXPECT_EQ(r.training.log.size(), 6u);
  double best = 1e300;
  for (const auto& e : r.training.log) best = std::min(best, e.val_aurc);
  EXPECT_EQ(r.training.selected_val_aurc, best);
  c.selection = "final";
  const auto f = run_experiment(c);
  EXPECT_TRUE(f.training.model.params() == f.training.final_model.params());
}

TEST(Run, MemorizingModelScoresPerfectlyOnItsTrainingSet) {
  ExperimentConfig c = tiny(4);
  c.sigma_gap = 40.0;
  c.epochs = 5;
  const auto r = run_experiment(c);
  const auto data = build_data(c);
  const auto s = run_eval(r.training.model, data.train, {}, c.seed);
  EXPECT_EQ(s.clean.accuracy, 1.0);
  EXPECT_EQ(s.clean.aurc, 0.0);
}

TEST(Run, ReweightingStageIsReported) {
  ExperimentConfig c = tiny(5);
  c.train_per_class = 60;
  c.long_tail_if = 5.0;
  c.reweight = true;
  c.reweight_epochs = 2;
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.reweighted.has_value());
  ASSERT_TRUE(r.scores.has_value());
  EXPECT_EQ(r.scores->scores.size(), r.train.size());
  const auto m = build_manifest(r);
  EXPECT_TRUE(m["metrics"].contains("reweighted_test"));
  EXPECT_TRUE(m.contains("long_tail"));
}

TEST(Run, DivergenceIsReported) {
  ExperimentConfig c = tiny(1);
  c.lr = 1e200;
  c.head = HeadKind::linear;
  EXPECT_THROW(run_experiment(c), DivergenceError);
}

TEST(Run, EvalRejectsMismatchedShapes) {
  const auto r = run_experiment(tiny(1));
  const auto other = gen_gaussian_blobs(3, 5, 7, 3.0, 1, 1);
  EXPECT_THROW(run_eval(r.training.model, other, {}, 1), ShapeError);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, MetricsCsvHeaderAndRoundTrip) {
  MetricReport r{0.8125, 0.0456789012345678, 0.87654321, 0.5};
  std::stringstream ss;
  write_metrics_csv(ss, "run-7", r);
  std::string header;
  std::getline(std::istringstream(ss.str()), header);
  EXPECT_EQ(header, "run_id,accuracy,aurc_x1000,auroc,fpr95");
  const auto rows = read_metrics_csv(ss);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].first, "run-7");
  EXPECT_NEAR(rows[0].second.accuracy, r.accuracy, 1e-12);
  EXPECT_NEAR(rows[0].second.aurc, r.aurc, 1e-12);
  EXPECT_NEAR(rows[0].second.auroc, r.auroc, 1e-12);
  EXPECT_NEAR(rows[0].second.fpr95, r.fpr95, 1e-12);

  std::stringstream nan_row;
  write_metrics_csv(nan_row, "x", MetricReport{1.0, 0.0, std::nan(""), std::nan("")});
  EXPECT_TRUE(std::isnan(read_metrics_csv(nan_row)[0].second.auroc));
  std::istringstream bad("run,accuracy\n");
  EXPECT_THROW(read_metrics_csv(bad), IoError);
}

TEST(Report, EmittedFilesRoundTrip) {
  const auto dir = fresh_dir("report");
  const RunResult r = run_experiment(tiny(8));
  emit_report(r, dir);
  const std::size_t n = r.test.clean_records.size();

  EXPECT_EQ(count_lines(slurp(dir / "curve.csv")), n + 1);
  std::istringstream hist(slurp(dir / "histogram.csv"));
  std::string line;
  std::getline(hist, line);
  EXPECT_EQ(line, "bin_lo,bin_hi,correct,incorrect");
  std::size_t bins = 0, total = 0;
  while (std::getline(hist, line)) {
    const auto f = detail::split(line, ',');
    ASSERT_EQ(f.size(), 4u);
    EXPECT_NEAR(std::stod(f[0]), bins / 20.0, 1e-12);
    total += std::stoul(f[2]) + std::stoul(f[3]);
    ++bins;
  }
  EXPECT_EQ(bins, 20u);
  EXPECT_EQ(total, n);

  std::istringstream metrics(slurp(dir / "metrics.csv"));
  const auto m = read_metrics_csv(metrics);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_NEAR(m[0].second.accuracy, r.test.clean.accuracy, 1e-12);
  EXPECT_NEAR(m[0].second.aurc, r.test.clean.aurc, 1e-12);
  EXPECT_NEAR(m[0].second.auroc, r.test.clean.auroc, 1e-12);
  EXPECT_NEAR(m[0].second.fpr95, r.test.clean.fpr95, 1e-12);

  const auto manifest = read_manifest(dir / "manifest.json");
  const auto back = metric_report_from_json(manifest["metrics"]["test"]["clean"]);
  EXPECT_NEAR(back.aurc, r.test.clean.aurc, 1e-12);
  EXPECT_NEAR(back.auroc, r.test.clean.auroc, 1e-12);
  EXPECT_EQ(manifest["config"]["seed"], "8");
  EXPECT_EQ(manifest["version"], kVersion);

  const auto preds = read_prediction_dump((dir / "predictions.csv").string());
  ASSERT_EQ(preds.size(), n);
  EXPECT_TRUE(same_report(evaluate_records(preds), r.test.clean));
  EXPECT_TRUE(load_checkpoint((dir / "model.ckpt").string()).params() == r.training.model.params());
}

TEST(Report, UnwritableDirectoryIsAnIoError) {
  const RunResult r = run_experiment(tiny(8));
  const auto blocker = fresh_dir("blocker") / "file";
  std::ofstream(blocker) << "x";
  EXPECT_THROW(emit_report(r, blocker / "sub"), IoError);
  EXPECT_THROW(read_manifest("/nonexistent/manifest.json"), IoError);
}

// ---------------------------------------------------------------------------
// Ablation grid

TEST(Ablation, LabelsAndParsing) {
  EXPECT_EQ(components_label(0), "baseline");
  EXPECT_EQ(components_label(kAllComponents), "crl+mix+sam+swa+csc");
  EXPECT_EQ(parse_component("sam"), kSam);
  EXPECT_THROW(parse_component("dropout"), ValidationError);
  EXPECT_EQ(all_component_masks().size(), 32u);
  EXPECT_EQ(single_component_masks().size(), 7u);
  EXPECT_NEAR(mean_std({1.0, 2.0, 3.0}).std, 1.0, 1e-15);
  EXPECT_EQ(median({3.0, 1.0, 2.0, 10.0}), 2.5);
}

TEST(Ablation, FullGridEmitsThirtyTwoSortedRows) {
  ExperimentConfig base = tiny(0);
  base.epochs = 2;
  base.train_per_class = 12;
  base.test_per_class = 10;
  AblationOptions opt;
  opt.seeds = {0, 1, 2};
  const auto rows = run_ablation_grid(base, opt);
  ASSERT_EQ(rows.size(), 32u);
  std::set<unsigned> masks;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    masks.insert(rows[i].mask);
    EXPECT_EQ(rows[i].runs.size(), 3u);
    EXPECT_EQ(rows[i].failures, 0u) << rows[i].label << ": " << rows[i].runs[0].error;
    if (i > 0) EXPECT_LE(rows[i - 1].aurc.mean, rows[i].aurc.mean);
  }
  EXPECT_EQ(masks.size(), 32u);
  std::ostringstream os;
  write_ablation_csv(os, rows);
  EXPECT_EQ(count_lines(os.str()), 33u);
}

TEST(Ablation, IdenticalCellsAgreeAcrossThreads) {
  ExperimentConfig base = tiny(0);
  base.epochs = 2;
  AblationOptions opt;
  opt.masks = {kAllComponents, kSam | kCsc, kAllComponents, kSam | kCsc};
  opt.seeds = {4, 5};
  opt.jobs = 3;
  const auto rows = run_ablation_grid(base, opt);
  std::map<unsigned, std::vector<const AblationRow*>> by_mask;
  for (const auto& r : rows) by_mask[r.mask].push_back(&r);
  for (const auto& [mask, list] : by_mask) {
    ASSERT_EQ(list.size(), 2u);
    for (std::size_t s = 0; s < 2; ++s) EXPECT_TRUE(same_report(list[0]->runs[s].test, list[1]->runs[s].test));
  }
}

TEST(Ablation, FailingCellsAreRecordedAndTheGridContinues) {
  ExperimentConfig base = tiny(0);
  base.long_tail_if = 1000.0;  // tail classes round to zero samples
  AblationOptions opt;
  opt.masks = {0, kAllComponents};
  opt.seeds = {0, 1};
  const auto rows = run_ablation_grid(base, opt);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.failures, 2u);
    EXPECT_FALSE(r.runs[0].error.empty());
    EXPECT_TRUE(std::isnan(r.aurc.mean));
  }
  opt.seeds.clear();
  EXPECT_THROW(run_ablation_grid(tiny(0), opt), ValidationError);
}

// ---------------------------------------------------------------------------
// Command line

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    work_ = fresh_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::ofstream(work_ / "tiny.cfg") << "num_classes = 3\ndim = 4\ninput_shape = 2,2\ntrain_per_class = 20\n"
                                         "test_per_class = 10\nhidden = 8\nepochs = 2\nswa_start = 1\nbatch_size = 16\n";
  }
  fs::path work_;
};

TEST_F(Cli, TrainRequiresSeed) {
  const auto r = cli("train --config tiny.cfg", work_);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(slurp(work_ / "stderr.txt").find("seed"), std::string::npos);
}

TEST_F(Cli, TrainWritesReportAndPrintsMetrics) {
  const auto r = cli("train --config tiny.cfg --seed 3 --run_id cli-run --out out", work_);
  ASSERT_EQ(r.code, 0) << slurp(work_ / "stderr.txt");
  EXPECT_EQ(r.out.rfind("run_id,accuracy,aurc_x1000,auroc,fpr95\ncli-run,", 0), 0u);
  const auto manifest = read_manifest(work_ / "out" / "manifest.json");
  EXPECT_EQ(manifest["config"]["epochs"], "2");
  EXPECT_EQ(manifest["seed"], 3);

  const auto again = cli("train --config tiny.cfg --seed 3 --run_id cli-run --out out2", work_);
  EXPECT_EQ(again.out, r.out);

  const auto override = cli("train --config tiny.cfg --seed 3 --epochs 1 --out out3", work_);
  ASSERT_EQ(override.code, 0);
  EXPECT_EQ(read_manifest(work_ / "out3" / "manifest.json")["config"]["epochs"], "1");
}

TEST_F(Cli, ValidationErrorsExitWithOne) {
  EXPECT_EQ(cli("train --config tiny.cfg --seed 1 --lr -3", work_).code, 1);
  EXPECT_EQ(cli("train --config tiny.cfg --seed 1 --head mlp", work_).code, 1);
  EXPECT_EQ(cli("train --seed 1 --no_such_flag 2", work_).code, 1);
  EXPECT_EQ(cli("", work_).code, 1);
  std::ofstream(work_ / "bad.cfg") << "epochs = many\n";
  EXPECT_EQ(cli("train --config bad.cfg --seed 1", work_).code, 1);
}

TEST_F(Cli, DivergenceExitsWithTwoAndLeavesADiagnosticManifest) {
  const auto r = cli("train --config tiny.cfg --seed 1 --lr 1e200 --head linear --out div", work_);
  EXPECT_EQ(r.code, 2);
  const auto m = read_manifest(work_ / "div" / "manifest.json");
  EXPECT_EQ(m["status"], "diverged");
  EXPECT_FALSE(m["error"].get<std::string>().empty());
}

TEST_F(Cli, IoErrorsExitWithThree) {
  EXPECT_EQ(cli("metrics missing.csv", work_).code, 3);
  EXPECT_EQ(cli("train --config missing.cfg --seed 1", work_).code, 3);
  EXPECT_EQ(cli("report nowhere", work_).code, 3);
  std::ofstream(work_ / "trunc.bin") << std::string(3072, 'x');
  EXPECT_EQ(cli("train --config tiny.cfg --seed 1 --dataset cifar10 --num_classes 10 --input_shape '' "
                "--cifar_train trunc.bin",
                work_)
                .code,
            3);
}

TEST_F(Cli, MetricsEvalAndReportOnAPredictionDump) {
  std::ofstream(work_ / "preds.csv") << "confidence,predicted,true_label\n0.9,1,1\n0.8,0,1\n0.7,2,2\n";
  const auto m = cli("metrics preds.csv", work_);
  ASSERT_EQ(m.code, 0);
  std::istringstream is(m.out);
  const auto rows = read_metrics_csv(is);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].second.aurc, (0.0 + 0.5 + 1.0 / 3.0) / 3.0, 1e-12);
  EXPECT_NEAR(rows[0].second.auroc, 0.5, 1e-12);

  ASSERT_EQ(cli("eval --predictions preds.csv --out ev", work_).code, 0);
  EXPECT_EQ(count_lines(slurp(work_ / "ev" / "curve.csv")), 4u);
  EXPECT_EQ(count_lines(slurp(work_ / "ev" / "histogram.csv")), 21u);

  ASSERT_EQ(cli("train --config tiny.cfg --seed 2 --out run", work_).code, 0);
  fs::remove(work_ / "run" / "curve.csv");
  const auto rep = cli("report run", work_);
  ASSERT_EQ(rep.code, 0) << slurp(work_ / "stderr.txt");
  EXPECT_TRUE(fs::exists(work_ / "run" / "curve.csv"));
  EXPECT_NE(rep.out.find("test: accuracy"), std::string::npos);

  const auto ev = cli("eval --config tiny.cfg --seed 2 --model run/model.ckpt --corruptions brightness:2", work_);
  ASSERT_EQ(ev.code, 0) << slurp(work_ / "stderr.txt");
  EXPECT_NE(ev.out.find("-brightness-2,"), std::string::npos);
  EXPECT_NE(ev.out.find("-corrupted-mean,"), std::string::npos);
  EXPECT_EQ(cli("eval --config tiny.cfg", work_).code, 1);
}

TEST_F(Cli, AblateWritesComparisonTable) {
  const auto r = cli("ablate --config tiny.cfg --seed 0 --epochs 1 --components sam,csc --seeds 2 --out grid.csv", work_);
  ASSERT_EQ(r.code, 0) << slurp(work_ / "stderr.txt");
  const auto table = slurp(work_ / "grid.csv");
  EXPECT_EQ(count_lines(table), 5u);  // header + 4 combinations of two varied components
  EXPECT_EQ(table, r.out);
  EXPECT_EQ(cli("ablate --config tiny.cfg --components dropout", work_).code, 1);
}
