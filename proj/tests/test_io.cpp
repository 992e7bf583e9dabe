#include <filesystem>

#include <gtest/gtest.h>

#include "emgssl/io.hpp"
#include "support/fixtures.hpp"

namespace emgssl {
namespace {

namespace fs = std::filesystem;

TEST(Io, FormatDoubleRoundTrips) {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform_int(-12, 12));
    EXPECT_EQ(io::parse_double(io::format_double(v), "t"), v);
  }
  EXPECT_EQ(io::format_double(0.5), "0.5");
  EXPECT_THROW(io::parse_double("1.5x", "t"), DataError);
}

TEST(Io, TrialRoundTripIsExact) {
  const auto dir = fixtures::scratch("trial");
  auto cfg = fixtures::small_synth();
  const auto trials = generate_subject(cfg, 0);
  const auto& t = trials.back();
  io::write_trial(dir / "dyn.csv", t);
  EXPECT_TRUE(fs::exists(dir / "dyn.meta"));
  EXPECT_FALSE(fs::exists(dir / "dyn.csv.tmp"));
  const auto back = io::read_trial(dir / "dyn.csv");
  EXPECT_EQ(back.id, t.id);
  EXPECT_EQ(back.kind, t.kind);
  EXPECT_EQ(back.sample_rate, t.sample_rate);
  EXPECT_TRUE(back.samples == t.samples);
  ASSERT_EQ(back.prompts.size(), t.prompts.size());
  for (std::size_t i = 0; i < t.prompts.size(); ++i) {
    EXPECT_EQ(back.prompts[i].class_id, t.prompts[i].class_id);
    EXPECT_EQ(back.prompts[i].onset_sample, t.prompts[i].onset_sample);
  }
  ASSERT_EQ(back.movement_onsets.size(), t.movement_onsets.size());
  for (std::size_t i = 0; i < t.movement_onsets.size(); ++i) {
    EXPECT_EQ(back.movement_onsets[i].onset_sample, t.movement_onsets[i].onset_sample);
    EXPECT_EQ(back.movement_onsets[i].end_sample, t.movement_onsets[i].end_sample);
  }
  fs::remove_all(dir);
}

TEST(Io, TrialHeaderIsChecked) {
  const auto dir = fixtures::scratch("hdr");
  const auto t = generate_subject(fixtures::small_synth(), 0).front();
  io::write_trial(dir / "r.csv", t);
  auto text = io::read_file(dir / "r.csv");
  text.replace(0, 1, "x");
  io::write_atomic(dir / "r.csv", text);
  EXPECT_THROW(io::read_trial(dir / "r.csv"), DataError);
  EXPECT_THROW(io::read_trial(dir / "missing.csv"), DataError);
  fs::remove_all(dir);
}

TEST(Io, DatasetLayoutAndManifest) {
  const auto dir = fixtures::scratch("dataset");
  auto cfg = fixtures::small_synth();
  cfg.num_subjects = 2;
  cfg.ramp_trials = 1;
  cfg.dynamic_trials = 1;
  io::write_synthetic_dataset(dir, cfg);
  for (const char* f : {"subject_0/ramp_0.csv", "subject_0/ramp_0.meta", "subject_1/dyn_0.csv", "subject_1/dyn_0.meta",
                        "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto m = io::read_manifest(dir);
  EXPECT_EQ(m.trials.size(), 4u);
  EXPECT_EQ(m.subjects(), (std::vector<int>{0, 1}));
  EXPECT_EQ(m.synth.prompt_duration_s, cfg.prompt_duration_s);
  EXPECT_TRUE(m.synth.class_gains == cfg.class_gains);
  const auto loaded = io::load_subject(dir, m, 1);
  const auto generated = generate_subject(cfg, 1);
  ASSERT_EQ(loaded.size(), generated.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) EXPECT_TRUE(loaded[i].samples == generated[i].samples);
  EXPECT_THROW(io::load_subject(dir, m, 5), DataError);
  EXPECT_THROW(io::read_manifest(dir / "nowhere"), DataError);
  fs::remove_all(dir);
}

TEST(Io, FeatureCacheAndLabelsRoundTrip) {
  const auto dir = fixtures::scratch("cache");
  const auto& t = fixtures::small_subject().trials.back();
  io::write_feature_cache(dir / "f.csv", t.features, t.labels.frame_starts);
  const auto header = io::read_file(dir / "f.csv").substr(0, 60);
  EXPECT_EQ(header.rfind("ch1_lscale,ch1_mfl,ch1_msr,ch1_wamp,ch2_lscale", 0), 0u);
  std::vector<std::int64_t> starts;
  const auto f = io::read_feature_cache(dir / "f.csv", &starts);
  EXPECT_TRUE(f == t.features);
  EXPECT_EQ(starts, t.labels.frame_starts);

  io::write_labels(dir / "l.csv", t.labels);
  const auto l = io::read_labels(dir / "l.csv");
  EXPECT_EQ(l.labels, t.labels.labels);
  EXPECT_EQ(l.frame_starts, t.labels.frame_starts);
  EXPECT_TRUE(l.regions == t.labels.regions);
  fs::remove_all(dir);
}

TEST(Io, ResultsRoundTrip) {
  const auto dir = fixtures::scratch("results");
  std::vector<io::ResultRow> rows{{0, "subject_0/dyn_1", "lda-d", 0.5, "toff", 1.0 / 3.0, 2},
                                  {3, "subject_3/dyn_0", "lstm-v", 0.0, "ss_ter", 12.25, 0}};
  io::write_results(dir / "r.csv", rows);
  EXPECT_EQ(io::read_file(dir / "r.csv").substr(0, 60),
            std::string("subject,trial,scheme,rejection_threshold,metric,value,flag_count\n").substr(0, 60));
  EXPECT_EQ(io::read_results(dir / "r.csv"), rows);
  fs::remove_all(dir);
}

TEST(Io, NetworkTensorsRoundTripExactly) {
  NetShape s;
  s.lstm_units = 5;
  s.hidden_units = 4;
  s.embedding = 3;
  Rng rng(1);
  const auto p = init_params<float>(s, rng);
  const auto j = io::tensors_to_json(p);
  EXPECT_EQ(j[0]["name"], "backbone/lstm_wx");
  EXPECT_EQ(j[0]["shape"][0], 20);
  const auto q = io::params_from_json<float>(io::to_json(s), nlohmann::json::parse(j.dump()));
  const auto a = p.tensors();
  const auto b = q.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(*a[k].second == *b[k].second) << a[k].first;

  auto broken = j;
  broken[1]["shape"][1] = 99;
  EXPECT_THROW(io::params_from_json<float>(io::to_json(s), broken), DataError);
}

TEST(Io, LdaAndPreprocessingRoundTrip) {
  Rng rng(2);
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(60, 3);
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) y.push_back(i % 3);
  x.col(0).array() += Eigen::Map<Eigen::VectorXi>(y.data(), 60).cast<double>().array();
  const auto m = fit_lda(x, y, 3, {"a", "b"});
  const auto back = io::lda_from_json(nlohmann::json::parse(io::to_json(m).dump()));
  EXPECT_TRUE(back.predict_posterior(x) == m.predict_posterior(x));
  EXPECT_EQ(back.fitted_on, m.fitted_on);

  const auto st = fit_standardizer(x, {"a"});
  const auto st2 = io::standardizer_from_json(io::to_json(st));
  EXPECT_TRUE(st2.apply(x) == st.apply(x));
  WampThresholds w;
  w.values.setConstant(0.25);
  w.fitted_on = {"z"};
  EXPECT_TRUE(io::wamp_from_json(io::to_json(w)).values == w.values);
}

TEST(Io, ConfigsRejectUnknownKeys) {
  EXPECT_THROW(io::train_config_from_json({{"batchsize", 3}}), UsageError);
  EXPECT_THROW(io::vicreg_config_from_json({{"lambda", -1.0}}), UsageError);
  EXPECT_THROW(io::augment_config_from_json({{"lag_a", 3}, {"lag_b", 1}}), UsageError);
  const auto t = io::train_config_from_json({{"max_epochs", 7}});
  EXPECT_EQ(t.max_epochs, 7);
  EXPECT_EQ(t.batch_size, 256);
  const auto s = io::synth_config_from_json(io::to_json(fixtures::small_synth()));
  EXPECT_EQ(s.prompt_duration_s, 1.5);
}

TEST(Io, HistoryRoundTrip) {
  TrainHistory h;
  h.epochs = {{1, 2.0, 1.5}, {2, 1.0, 1.25}};
  h.best_epoch = 2;
  h.best_val_loss = 1.25;
  const auto b = io::history_from_json(nlohmann::json::parse(io::to_json(h).dump()));
  EXPECT_EQ(b.best_epoch, 2);
  EXPECT_EQ(b.epochs[1].val_loss, 1.25);
  EXPECT_FALSE(b.early_stopped);
}

}  // namespace
}  // namespace emgssl
