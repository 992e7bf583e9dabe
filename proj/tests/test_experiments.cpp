#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "emgssl/experiments.hpp"
#include "support/fixtures.hpp"

namespace emgssl {
namespace {

namespace fs = std::filesystem;

std::map<std::string, int> rows_per(const std::vector<io::ResultRow>& rows, const std::string& metric,
                                    double threshold) {
  std::map<std::string, int> n;
  for (const auto& r : rows)
    if (r.metric == metric && r.rejection_threshold == threshold) ++n[r.trial];
  return n;
}

TEST(Folds, RampSchemesTrainOnRampAndTestOnEveryDynamicTrial) {
  const auto& d = fixtures::small_subject();
  const auto cfg = fixtures::tiny_experiment(Scheme::lda_r);
  const auto lda = plan_folds(Scheme::lda_r, d, cfg);
  ASSERT_EQ(lda.size(), 1u);
  EXPECT_EQ(lda[0].train, d.of_kind(TrialKind::ramp));
  EXPECT_EQ(lda[0].test, d.of_kind(TrialKind::dynamic));
  EXPECT_TRUE(lda[0].validation.empty());

  const auto lstm = plan_folds(Scheme::lstm_r, d, cfg);
  ASSERT_EQ(lstm.size(), 1u);
  EXPECT_EQ(lstm[0].train.size(), 4u);
  ASSERT_EQ(lstm[0].validation.size(), 1u);
  EXPECT_EQ(d.trials[lstm[0].validation[0]].kind(), TrialKind::ramp);
  EXPECT_EQ(plan_folds(Scheme::lstm_r, d, cfg)[0].validation, lstm[0].validation);
}

TEST(Folds, LeaveOneTrialOut) {
  const auto& d = fixtures::small_subject();
  const auto cfg = fixtures::tiny_experiment(Scheme::lda_d);
  const auto dyn = d.of_kind(TrialKind::dynamic);
  const auto lda = plan_folds(Scheme::lda_d, d, cfg);
  ASSERT_EQ(lda.size(), 6u);
  std::set<std::size_t> tested;
  for (const auto& p : lda) {
    ASSERT_EQ(p.test.size(), 1u);
    EXPECT_EQ(p.train.size(), 5u);
    tested.insert(p.test[0]);
  }
  EXPECT_EQ(tested.size(), 6u);

  const auto lstm = plan_folds(Scheme::lstm_d, d, cfg);
  for (const auto& p : lstm) {
    EXPECT_EQ(p.train.size(), 4u);
    ASSERT_EQ(p.validation.size(), 1u);
    // lowest-index remaining trial
    EXPECT_EQ(p.validation[0], p.test[0] == dyn[0] ? dyn[1] : dyn[0]);
  }
}

TEST(Folds, LstmDAndLstmVShareSplits) {
  const auto& d = fixtures::small_subject();
  for (const char* v : {"lowest", "random"}) {
    auto cfg = fixtures::tiny_experiment(Scheme::lstm_d);
    cfg.validation = v;
    const auto a = plan_folds(Scheme::lstm_d, d, cfg);
    cfg.scheme = Scheme::lstm_v;
    const auto b = plan_folds(Scheme::lstm_v, d, cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(a[k].train, b[k].train);
      EXPECT_EQ(a[k].validation, b[k].validation);
      EXPECT_EQ(a[k].test, b[k].test);
      EXPECT_NE(a[k].validation[0], a[k].test[0]);
    }
  }
}

TEST(Audit, DetectsPlantedLeak) {
  FoldRecord r;
  r.train = {"a", "b"};
  r.validation = {"c"};
  r.test = {"t"};
  r.audit = {{"standardizer", {"a", "b"}}};
  EXPECT_TRUE(audit_violations(r).empty());
  r.audit.push_back({"lda", {"a", "t"}});
  EXPECT_EQ(audit_violations(r).size(), 1u);
  r.validation = {"a"};
  EXPECT_EQ(audit_violations(r).size(), 2u);
}

TEST(Windows, CausalWindowsLeftPadWithFirstFrame) {
  const auto& d = fixtures::small_subject();
  const auto cfg = fixtures::tiny_experiment(Scheme::lstm_d);
  const auto plan = plan_folds(Scheme::lstm_d, d, cfg)[0];
  const auto ff = prepare_fold(d, plan, cfg.wamp_fraction);
  const auto w = causal_windows(d, plan.test[0], 4);
  ASSERT_EQ(w.size(), d.trials[plan.test[0]].labels.size());
  EXPECT_EQ(w[0].start, -3);
  const auto x = gather(ff, std::span<const Window>(w.data(), 2), 4);
  const auto& src = ff.xf.at(plan.test[0]);
  for (int t = 0; t < 4; ++t) EXPECT_TRUE(x.col(t * 2) == src.col(0));
  EXPECT_TRUE(x.col(3 * 2 + 1) == src.col(1));
  EXPECT_TRUE(x.col(2 * 2 + 1) == src.col(0));

  const auto tw = training_windows(d, plan.train, 4, 16);
  for (const auto& v : tw) {
    EXPECT_GE(v.start, 0);
    EXPECT_LE(v.start + 4, static_cast<std::int64_t>(d.trials[v.trial].labels.size()));
    EXPECT_EQ(v.start % 16, 0);
    EXPECT_EQ(v.label, d.trials[v.trial].labels.labels[static_cast<std::size_t>(v.start + 3)]);
  }
}

TEST(Windows, FoldStatisticsComeFromTrainingTrialsOnly) {
  const auto& d = fixtures::small_subject();
  const auto cfg = fixtures::tiny_experiment(Scheme::lstm_d);
  const auto plan = plan_folds(Scheme::lstm_d, d, cfg)[2];
  const auto ff = prepare_fold(d, plan, cfg.wamp_fraction);
  std::vector<std::string> ids;
  for (auto i : plan.train) ids.push_back(d.trials[i].id());
  EXPECT_EQ(ff.wamp.fitted_on, ids);
  EXPECT_EQ(ff.standardizer.fitted_on, ids);
  Eigen::Index rows = 0;
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(kNumFeatures);
  for (auto i : plan.train) {
    sum += ff.x.at(i).colwise().sum();
    rows += ff.x.at(i).rows();
  }
  EXPECT_LT((sum / static_cast<double>(rows)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Causality, PosteriorsIgnoreLaterFrames) {
  const auto& d = fixtures::small_subject();
  const auto cfg = fixtures::tiny_experiment(Scheme::lstm_d);
  const auto plan = plan_folds(Scheme::lstm_d, d, cfg)[0];
  auto ff = prepare_fold(d, plan, cfg.wamp_fraction);
  FoldModel m;
  Rng rng(4);
  m.net = init_params<float>(cfg.network, rng);
  m.steps = cfg.sequence_length;
  const auto trial = plan.test[0];
  const auto before = trial_posteriors(m, d, ff, trial);
  const Eigen::Index k = 700;
  auto& x = ff.xf.at(trial);
  x.rightCols(x.cols() - k - 1).setConstant(5.0f);
  const auto after = trial_posteriors(m, d, ff, trial);
  EXPECT_TRUE(before.topRows(k + 1) == after.topRows(k + 1));
  EXPECT_FALSE(before.row(k + 1) == after.row(k + 1));
}

TEST(RunScheme, LdaDGivesSixRowsPerMetricPerThreshold) {
  const auto& d = fixtures::small_subject();
  RunOptions opt;
  opt.write_files = false;
  const auto res = run_scheme(fixtures::tiny_experiment(Scheme::lda_d), d, opt);
  EXPECT_EQ(res.folds.size(), 6u);
  EXPECT_EQ(res.rows.size(), 6u * 7u * 2u);
  for (const auto& m : metric_names())
    for (double t : {0.0, 0.5}) {
      const auto n = rows_per(res.rows, m, t);
      EXPECT_EQ(n.size(), 6u);
      for (const auto& [trial, c] : n) EXPECT_EQ(c, 1);
    }
  for (const auto& f : res.folds) EXPECT_TRUE(audit_violations(f).empty());
}

TEST(RunScheme, EveryFittedObjectIsAuditedWithoutLeakage) {
  const auto& d = fixtures::small_subject();
  RunOptions opt;
  opt.write_files = false;
  for (auto s : all_schemes()) {
    auto cfg = fixtures::tiny_experiment(s);
    if (is_temporal(s)) cfg.fold = 0;
    const auto res = run_scheme(cfg, d, opt);
    ASSERT_FALSE(res.folds.empty());
    for (const auto& f : res.folds) {
      EXPECT_TRUE(audit_violations(f).empty()) << to_string(s);
      std::set<std::string> objects;
      for (const auto& e : f.audit) objects.insert(e.object);
      EXPECT_TRUE(objects.count("wamp_thresholds") && objects.count("standardizer")) << to_string(s);
      if (trains_on_ramp(s)) EXPECT_TRUE(objects.count("nm_threshold/subject_0/ramp_0") ||
                                         objects.count("nm_threshold/subject_0/ramp_1"));
      if (s == Scheme::lstm_v) EXPECT_TRUE(objects.count("backbone") && objects.count("head"));
    }
  }
}

TEST(RunScheme, DeterministicUnderFixedSeed) {
  const auto& d = fixtures::small_subject();
  RunOptions opt;
  opt.write_files = false;
  auto cfg = fixtures::tiny_experiment(Scheme::lstm_v);
  cfg.fold = 3;
  const auto a = run_scheme(cfg, d, opt);
  const auto b = run_scheme(cfg, d, opt);
  EXPECT_EQ(io::format_results(a.rows), io::format_results(b.rows));
  cfg.seed += 1;
  const auto c = run_scheme(cfg, d, opt);
  EXPECT_NE(a.folds[0].embedding_std, c.folds[0].embedding_std);
}

TEST(RunScheme, LstmVBackboneIsFrozenDuringHeadTraining) {
  const auto& d = fixtures::small_subject();
  const auto dir = fixtures::scratch("freeze");
  auto cfg = fixtures::tiny_experiment(Scheme::lstm_v);
  cfg.fold = 1;
  cfg.output_dir = dir.string();
  const auto res = run_scheme(cfg, d);
  const Paths paths{dir};
  const auto pre = io::read_json(paths.checkpoint(0, "lstm-v_fold1_pretrain"));
  const auto fin = io::read_json(paths.checkpoint(0, "lstm-v_fold1"));
  EXPECT_EQ(pre["stage"], "pretrain");
  EXPECT_EQ(fin["version"], io::kCheckpointVersion);
  const auto& ta = pre["model"]["tensors"];
  const auto& tb = fin["model"]["tensors"];
  ASSERT_EQ(ta.size(), tb.size());
  bool head_changed = false;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    const auto name = ta[k]["name"].get<std::string>();
    if (is_backbone_tensor(name))
      EXPECT_EQ(ta[k]["values"], tb[k]["values"]) << name;
    else
      head_changed |= ta[k]["values"] != tb[k]["values"];
  }
  EXPECT_TRUE(head_changed);
  EXPECT_TRUE(fs::exists(paths.results(0, "lstm-v_fold1")));
  EXPECT_TRUE(fs::exists(paths.audit(0, "lstm-v_fold1")));
  EXPECT_EQ(io::read_results(paths.results(0, "lstm-v_fold1")), res.rows);
  fs::remove_all(dir);
}

TEST(RunScheme, CheckpointReevaluationReproducesRows) {
  const auto& d = fixtures::small_subject();
  const auto dir = fixtures::scratch("reeval");
  for (auto s : {Scheme::lda_d, Scheme::lstm_d}) {
    auto cfg = fixtures::tiny_experiment(s);
    cfg.fold = 2;
    cfg.output_dir = dir.string();
    const auto res = run_scheme(cfg, d);
    const auto ckpt = io::read_json(Paths{dir}.checkpoint(0, fold_name(s, 2)));
    EXPECT_EQ(evaluate_checkpoint(ckpt, cfg.thresholds, &d), res.rows) << to_string(s);
    const auto more = evaluate_checkpoint(ckpt, {0.0, 0.25, 0.9}, &d);
    EXPECT_EQ(more.size(), 3u * 7u);
  }
  fs::remove_all(dir);
}

TEST(RunScheme, EmbeddingExportHasOneRowPerEvaluatedSequence) {
  const auto& d = fixtures::small_subject();
  const auto dir = fixtures::scratch("embed");
  auto cfg = fixtures::tiny_experiment(Scheme::lstm_v);
  cfg.fold = 0;
  cfg.output_dir = dir.string();
  cfg.export_embeddings = true;
  cfg.write_checkpoints = false;
  run_scheme(cfg, d);
  const auto text = io::read_file(Paths{dir}.embeddings(0, "lstm-v_fold0"));
  const auto lines = std::count(text.begin(), text.end(), '\n');
  const auto test = plan_folds(Scheme::lstm_v, d, cfg)[0].test[0];
  EXPECT_EQ(static_cast<std::size_t>(lines - 1), d.trials[test].labels.size());
  EXPECT_EQ(text.rfind("trial,frame,label,e0,", 0), 0u);
  EXPECT_FALSE(fs::exists(Paths{dir}.checkpoint(0, "lstm-v_fold0")));
  fs::remove_all(dir);
}

TEST(RunScheme, RejectsBadFold) {
  auto cfg = fixtures::tiny_experiment(Scheme::lda_r);
  cfg.fold = 1;
  RunOptions opt;
  opt.write_files = false;
  EXPECT_THROW(run_scheme(cfg, fixtures::small_subject(), opt), UsageError);
}

TEST(Config, JsonRoundTripAndValidation) {
  auto cfg = fixtures::tiny_experiment(Scheme::lstm_v);
  cfg.vicreg.lambda = 4;
  cfg.augment.noise_std = 0.1;
  const auto back = experiment_config_from_json(to_json(cfg));
  EXPECT_EQ(back.scheme, Scheme::lstm_v);
  EXPECT_EQ(back.vicreg.lambda, 4);
  EXPECT_EQ(back.augment.noise_std, 0.1);
  EXPECT_EQ(back.thresholds, cfg.thresholds);
  EXPECT_EQ(back.network.lstm_units, 8);

  const ExperimentConfig defaults = experiment_config_from_json(nlohmann::json::object());
  EXPECT_EQ(defaults.sequence_length, 32);
  EXPECT_EQ(defaults.train_stride, 1);
  EXPECT_EQ(defaults.train.max_epochs, 500);
  EXPECT_EQ(defaults.thresholds.size(), 10u);
  EXPECT_EQ(defaults.thresholds[5], 0.5);

  EXPECT_THROW(experiment_config_from_json({{"schema", "lda-d"}}), UsageError);
  EXPECT_THROW(experiment_config_from_json({{"scheme", "lda-d"}, {"vicreg", nlohmann::json::object()}}), UsageError);
  EXPECT_THROW(experiment_config_from_json({{"thresholds", {0.5, 0.1}}}), UsageError);
  EXPECT_THROW(experiment_config_from_json({{"thresholds", {1.5}}}), UsageError);
  EXPECT_THROW(experiment_config_from_json({{"scheme", "svm"}}), UsageError);
  EXPECT_THROW(experiment_config_from_json({{"train", {{"max_epochs", 0}}}}), UsageError);
}

TEST(Config, OutputRootPrecedence) {
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(resolve_output_root("", "cfg"), fs::path("cfg"));
  ::setenv(kOutputRootEnv, "/tmp/env_root", 1);
  EXPECT_EQ(resolve_output_root("", "cfg"), fs::path("/tmp/env_root"));
  EXPECT_EQ(resolve_output_root("cli", "cfg"), fs::path("cli"));
  ::unsetenv(kOutputRootEnv);
}

TEST(Config, ErrorKindsMapToExitCodes) {
  EXPECT_EQ(UsageError("x").exit_code(), 1);
  EXPECT_EQ(DataError("x").exit_code(), 2);
  EXPECT_EQ(NumericError("x").exit_code(), 3);
}

TEST(Report, TwoSchemesSevenMetricsTwoThresholdsGive28Rows) {
  std::vector<io::ResultRow> rows;
  for (const char* s : {"lda-d", "lstm-d"})
    for (int trial = 0; trial < 3; ++trial)
      for (double t : {0.0, 0.5})
        for (const auto& m : metric_names())
          rows.push_back({0, "subject_0/dyn_" + std::to_string(trial), s, t, m, trial + t, 0});
  const auto summary = summarize(rows);
  ASSERT_EQ(summary.size(), 28u);
  EXPECT_EQ(summary[0].n, 3u);
  EXPECT_DOUBLE_EQ(summary[0].median, 1.0);
  EXPECT_DOUBLE_EQ(summary[0].q1, 0.5);
  EXPECT_DOUBLE_EQ(summary[0].q3, 1.5);
}

TEST(Report, SingleRowSummaryEqualsThatRow) {
  const std::vector<io::ResultRow> rows{{2, "subject_2/dyn_4", "lstm-v", 0.5, "ttd", 7.25, 1}};
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].scheme, "lstm-v");
  EXPECT_EQ(s[0].metric, "ttd");
  EXPECT_EQ(s[0].threshold, 0.5);
  EXPECT_EQ(s[0].median, 7.25);
  EXPECT_EQ(s[0].q1, 7.25);
  EXPECT_EQ(s[0].q3, 7.25);
  EXPECT_THROW(summarize({}), DataError);
}

TEST(Report, EmitReportWritesTablesFromResultsDirectory) {
  const auto dir = fixtures::scratch("report");
  std::vector<io::ResultRow> rows;
  for (const auto& m : metric_names()) rows.push_back({0, "subject_0/dyn_0", "lda-d", 0.0, m, 1.0, 0});
  io::write_results(dir / "results" / "subject_0" / "lda-d.csv", rows);
  const auto s = emit_report(dir / "results", dir / "report");
  EXPECT_EQ(s.size(), 7u);
  const auto text = io::read_file(dir / "report" / "summary.csv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 8);
  EXPECT_TRUE(fs::exists(dir / "report" / "rejection_curves.csv"));
  EXPECT_THROW(emit_report(dir / "nothing", dir / "report"), DataError);
  fs::remove_all(dir);
}

TEST(Report, QuantileInterpolatesLinearly) {
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({5}, 0.75), 5);
}

}  // namespace
}  // namespace emgssl
