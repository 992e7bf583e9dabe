// Command-line front end: synth, features, train, eval, report.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emgssl/emgssl.hpp"

namespace fs = std::filesystem;
using namespace emgssl;

namespace {

std::vector<double> parse_thresholds(const std::string& s) {
  std::vector<double> out;
  for (auto part : io::split(s)) out.push_back(io::parse_double(part, "--thresholds"));
  return out;
}

int cmd_synth(int subjects, std::uint64_t seed, double snr_db, const std::string& out) {
  SynthConfig cfg;
  cfg.num_subjects = subjects;
  cfg.seed = seed;
  cfg.snr_db = snr_db;
  validate(cfg);
  const fs::path dir = out.empty() ? resolve_output_root("", "emgssl_out") / "dataset" : fs::path(out);
  const auto m = io::write_synthetic_dataset(dir, cfg);
  std::cout << "wrote " << m.trials.size() << " trials for " << subjects << " subject(s) to " << dir.string() << "\n";
  return 0;
}

/// Fold-independent feature and label files. The WAMP columns use thresholds
/// fit on the subject's ramp trials; experiments refit them per fold.
int cmd_features(const std::string& dataset, std::optional<int> subject, const std::string& out) {
  const auto m = io::read_manifest(dataset);
  const fs::path root = resolve_output_root(out, "emgssl_out");
  auto subjects = m.subjects();
  if (subject) subjects = {*subject};
  for (int s : subjects) {
    const auto d = prepare_subject(s, io::load_subject(dataset, m, s));
    std::vector<const RawTrial*> ramp;
    for (auto i : d.of_kind(TrialKind::ramp)) ramp.push_back(&d.trials[i].filtered);
    const auto wamp = fit_wamp_thresholds(ramp);
    for (const auto& t : d.trials) {
      io::write_feature_cache(root / "features" / (t.id() + ".csv"), fold_features(t, wamp), t.labels.frame_starts);
      io::write_labels(root / "labels" / (t.id() + ".labels.csv"), t.labels);
    }
    std::cout << "subject " << s << ": " << d.trials.size() << " trials featurized\n";
  }
  return 0;
}

int cmd_train(const std::string& scheme, int subject, std::optional<int> fold, const std::string& config,
              const std::string& dataset, const std::string& out) {
  ExperimentConfig cfg;
  if (!config.empty()) cfg = experiment_config_from_json(io::read_json(config));
  if (!scheme.empty()) cfg.scheme = scheme_from_string(scheme);
  if (fold) cfg.fold = fold;
  if (!dataset.empty()) cfg.dataset = dataset;
  if (!cfg.dataset.empty()) cfg.dataset = fs::absolute(cfg.dataset).string();
  cfg.output_dir = resolve_output_root(out, cfg.output_dir).string();
  validate(cfg);
  RunOptions opt;
  opt.log = &std::cerr;
  const auto res = run_scheme_from_disk(cfg, subject, opt);
  for (const auto& f : res.folds)
    for (const auto& v : audit_violations(f)) throw DataError("leakage audit failed: " + v);
  std::cout << "wrote " << res.rows.size() << " result rows under " << cfg.output_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& thresholds, const std::string& out) {
  const auto ckpt = io::read_json(checkpoint);
  std::vector<double> thr = default_thresholds();
  if (!thresholds.empty()) thr = parse_thresholds(thresholds);
  const auto rows = evaluate_checkpoint(ckpt, thr);
  const fs::path root = resolve_output_root(out, "emgssl_out");
  const fs::path dst = root / "eval" / ("subject_" + std::to_string(ckpt.at("subject").get<int>())) /
                       (fs::path(checkpoint).stem().string() + ".csv");
  io::write_results(dst, rows);
  std::cout << io::format_results(rows);
  std::cerr << "wrote " << dst.string() << "\n";
  return 0;
}

int cmd_report(const std::string& results_dir, const std::string& out) {
  const fs::path root = resolve_output_root("", "emgssl_out");
  const fs::path src = results_dir.empty() ? root / "results" : fs::path(results_dir);
  const fs::path dst = out.empty() ? root / "report" : fs::path(out);
  const auto summary = emit_report(src, dst);
  std::cout << summary.size() << " summary rows written to " << dst.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sEMG pattern-recognition experiments"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  int subjects = 1;
  std::uint64_t seed = 42;
  double snr_db = 20.0;
  std::string synth_out;
  synth->add_option("--subjects", subjects, "number of subjects")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--snr-db", snr_db, "signal-to-noise ratio in dB");
  synth->add_option("--out", synth_out, "dataset directory (default <output root>/dataset)");

  auto* features = app.add_subcommand("features", "precompute feature and label files");
  std::string feat_dataset, feat_out;
  std::optional<int> feat_subject;
  features->add_option("--dataset", feat_dataset, "dataset directory")->required();
  features->add_option("--subject", feat_subject, "only this subject");
  features->add_option("--out", feat_out, "output root");

  auto* train = app.add_subcommand("train", "fit and evaluate one scheme on one subject");
  std::string scheme, config, train_dataset, train_out;
  int subject = 0;
  std::optional<int> fold;
  train->add_option("--scheme", scheme, "lda-r, lstm-r, lda-d, lstm-d or lstm-v");
  train->add_option("--subject", subject, "subject id");
  train->add_option("--fold", fold, "run a single fold");
  train->add_option("--config", config, "experiment configuration (JSON)");
  train->add_option("--dataset", train_dataset, "dataset directory (overrides the configuration)");
  train->add_option("--out", train_out, "output root");

  auto* eval = app.add_subcommand("eval", "re-evaluate a checkpoint on its held-out trials");
  std::string checkpoint, thresholds, eval_out;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--thresholds", thresholds, "comma-separated rejection thresholds");
  eval->add_option("--out", eval_out, "output root");

  auto* report = app.add_subcommand("report", "summarize results files");
  std::string results_dir, report_out;
  report->add_option("--results-dir", results_dir, "directory searched for results files");
  report->add_option("--out", report_out, "report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(subjects, seed, snr_db, synth_out);
    if (*features) return cmd_features(feat_dataset, feat_subject, feat_out);
    if (*train) return cmd_train(scheme, subject, fold, config, train_dataset, train_out);
    if (*eval) return cmd_eval(checkpoint, thresholds, eval_out);
    if (*report) return cmd_report(results_dir, report_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
