#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "emgssl/augment.hpp"
#include "emgssl/error.hpp"
#include "emgssl/features.hpp"
#include "emgssl/labeling.hpp"
#include "emgssl/lda.hpp"
#include "emgssl/neural.hpp"
#include "emgssl/signal.hpp"
#include "emgssl/synthgen.hpp"
#include "emgssl/vicreg.hpp"

namespace emgssl::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "emgssl-checkpoint";

// ---------------------------------------------------------------------------
// Text primitives
// ---------------------------------------------------------------------------

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw DataError(where + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t b = 0;
  while (true) {
    const auto e = line.find(sep, b);
    out.push_back(line.substr(b, e == std::string_view::npos ? std::string_view::npos : e - b));
    if (e == std::string_view::npos) break;
    b = e + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().remove_suffix(1);
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary file, then renames it over `p`.
inline void write_atomic(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) { write_atomic(p, j.dump(1) + "\n"); }

/// Rejects keys outside `allowed` so that typos in configuration documents
/// do not silently fall back to defaults.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw UsageError(where + ": unknown key '" + k + "'");
}

template <class T>
void get_if(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad value for '") + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Configuration structs
// ---------------------------------------------------------------------------

inline json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"lr_backbone", c.lr_backbone},
          {"lr_end_to_end", c.lr_end_to_end}, {"lr_head", c.lr_head},
          {"early_stop_patience", c.early_stop_patience}, {"max_epochs", c.max_epochs},
          {"beta1", c.beta1},             {"beta2", c.beta2},
          {"eps", c.eps},                 {"weight_decay", c.weight_decay}};
}

inline TrainConfig train_config_from_json(const json& j) {
  check_keys(j, {"batch_size", "lr_backbone", "lr_end_to_end", "lr_head", "early_stop_patience", "max_epochs", "beta1",
                 "beta2", "eps", "weight_decay"},
             "train");
  TrainConfig c;
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "lr_backbone", c.lr_backbone);
  get_if(j, "lr_end_to_end", c.lr_end_to_end);
  get_if(j, "lr_head", c.lr_head);
  get_if(j, "early_stop_patience", c.early_stop_patience);
  get_if(j, "max_epochs", c.max_epochs);
  get_if(j, "beta1", c.beta1);
  get_if(j, "beta2", c.beta2);
  get_if(j, "eps", c.eps);
  get_if(j, "weight_decay", c.weight_decay);
  validate(c);
  return c;
}

inline json to_json(const VicregConfig& c) {
  return {{"lambda", c.lambda}, {"mu", c.mu}, {"nu", c.nu}, {"gamma", c.gamma}, {"eps", c.eps}};
}

inline VicregConfig vicreg_config_from_json(const json& j) {
  check_keys(j, {"lambda", "mu", "nu", "gamma", "eps"}, "vicreg");
  VicregConfig c;
  get_if(j, "lambda", c.lambda);
  get_if(j, "mu", c.mu);
  get_if(j, "nu", c.nu);
  get_if(j, "gamma", c.gamma);
  get_if(j, "eps", c.eps);
  validate(c);
  return c;
}

inline json to_json(const AugmentConfig& c) {
  return {{"lag_a", c.lag_a},         {"lag_b", c.lag_b},           {"scale_mean", c.scale_mean},
          {"scale_std", c.scale_std}, {"noise_mean", c.noise_mean}, {"noise_std", c.noise_std}};
}

inline AugmentConfig augment_config_from_json(const json& j) {
  check_keys(j, {"lag_a", "lag_b", "scale_mean", "scale_std", "noise_mean", "noise_std"}, "augment");
  AugmentConfig c;
  get_if(j, "lag_a", c.lag_a);
  get_if(j, "lag_b", c.lag_b);
  get_if(j, "scale_mean", c.scale_mean);
  get_if(j, "scale_std", c.scale_std);
  get_if(j, "noise_mean", c.noise_mean);
  get_if(j, "noise_std", c.noise_std);
  validate(c);
  return c;
}

inline json to_json(const NetShape& s) {
  return {{"inputs", s.inputs},         {"lstm_units", s.lstm_units}, {"hidden_units", s.hidden_units},
          {"hidden_layers", s.hidden_layers}, {"embedding", s.embedding}, {"classes", s.classes}};
}

inline NetShape net_shape_from_json(const json& j) {
  check_keys(j, {"inputs", "lstm_units", "hidden_units", "hidden_layers", "embedding", "classes"}, "network");
  NetShape s;
  get_if(j, "inputs", s.inputs);
  get_if(j, "lstm_units", s.lstm_units);
  get_if(j, "hidden_units", s.hidden_units);
  get_if(j, "hidden_layers", s.hidden_layers);
  get_if(j, "embedding", s.embedding);
  get_if(j, "classes", s.classes);
  if (s.inputs < 1 || s.lstm_units < 1 || s.hidden_units < 1 || s.hidden_layers < 0 || s.embedding < 1 ||
      s.classes < 2)
    throw UsageError("network: invalid layer sizes");
  return s;
}

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw DataError(where + ": expected a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw DataError(where + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline json to_json(const SynthConfig& c) {
  return {{"num_subjects", c.num_subjects},
          {"seed", c.seed},
          {"ramp_trials", c.ramp_trials},
          {"dynamic_trials", c.dynamic_trials},
          {"prompt_duration_s", c.prompt_duration_s},
          {"transition_min_s", c.transition_min_s},
          {"transition_max_s", c.transition_max_s},
          {"reaction_min_s", c.reaction_min_s},
          {"reaction_max_s", c.reaction_max_s},
          {"snr_db", c.snr_db},
          {"subject_gain_spread", c.subject_gain_spread},
          {"intensity_spread", c.intensity_spread},
          {"class_gains", matrix_to_json(c.class_gains)}};
}

inline SynthConfig synth_config_from_json(const json& j) {
  check_keys(j, {"num_subjects", "seed", "ramp_trials", "dynamic_trials", "prompt_duration_s", "transition_min_s",
                 "transition_max_s", "reaction_min_s", "reaction_max_s", "snr_db", "subject_gain_spread",
                 "intensity_spread", "class_gains"},
             "synth");
  SynthConfig c;
  get_if(j, "num_subjects", c.num_subjects);
  get_if(j, "seed", c.seed);
  get_if(j, "ramp_trials", c.ramp_trials);
  get_if(j, "dynamic_trials", c.dynamic_trials);
  get_if(j, "prompt_duration_s", c.prompt_duration_s);
  get_if(j, "transition_min_s", c.transition_min_s);
  get_if(j, "transition_max_s", c.transition_max_s);
  get_if(j, "reaction_min_s", c.reaction_min_s);
  get_if(j, "reaction_max_s", c.reaction_max_s);
  get_if(j, "snr_db", c.snr_db);
  get_if(j, "subject_gain_spread", c.subject_gain_spread);
  get_if(j, "intensity_spread", c.intensity_spread);
  if (j.contains("class_gains")) c.class_gains = matrix_from_json(j["class_gains"], "class_gains");
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Trials: `t,ch1..ch6` table plus a JSON sidecar with the same stem and a
// .meta extension.
// ---------------------------------------------------------------------------

inline json trial_meta(const RawTrial& t) {
  json prompts = json::array();
  for (const auto& p : t.prompts) prompts.push_back({{"class_id", p.class_id}, {"onset_sample", p.onset_sample}});
  json bounds = json::array();
  for (const auto& b : t.movement_onsets)
    bounds.push_back(
        {{"transition_index", b.transition_index}, {"onset_sample", b.onset_sample}, {"end_sample", b.end_sample}});
  return {{"id", t.id},
          {"sample_rate", t.sample_rate},
          {"trial_kind", to_string(t.kind)},
          {"num_samples", t.num_samples()},
          {"prompts", prompts},
          {"movement_onsets", bounds}};
}

inline fs::path meta_path(const fs::path& csv) {
  fs::path m = csv;
  return m.replace_extension(".meta");
}

inline void write_trial(const fs::path& csv, const RawTrial& t) {
  validate(t);
  std::string out = "t,ch1,ch2,ch3,ch4,ch5,ch6\n";
  out.reserve(static_cast<std::size_t>(t.num_samples()) * 140);
  for (Eigen::Index i = 0; i < t.samples.rows(); ++i) {
    out += format_double(static_cast<double>(i) / t.sample_rate);
    for (Eigen::Index c = 0; c < t.samples.cols(); ++c) {
      out += ',';
      out += format_double(t.samples(i, c));
    }
    out += '\n';
  }
  write_atomic(csv, out);
  write_json(meta_path(csv), trial_meta(t));
}

inline RawTrial read_trial(const fs::path& csv) {
  const json meta = read_json(meta_path(csv));
  RawTrial t;
  try {
    t.id = meta.at("id").get<std::string>();
    t.sample_rate = meta.at("sample_rate").get<double>();
    t.kind = trial_kind_from_string(meta.at("trial_kind").get<std::string>());
    for (const auto& p : meta.at("prompts"))
      t.prompts.push_back({p.at("class_id").get<int>(), p.at("onset_sample").get<std::int64_t>()});
    for (const auto& b : meta.at("movement_onsets"))
      t.movement_onsets.push_back({b.at("transition_index").get<int>(), b.at("onset_sample").get<std::int64_t>(),
                                   b.at("end_sample").get<std::int64_t>()});
  } catch (const json::exception& e) {
    throw DataError(meta_path(csv).string() + ": " + e.what());
  }

  const std::string text = read_file(csv);
  std::string_view rest(text);
  const auto take_line = [&rest]() {
    const auto e = rest.find('\n');
    std::string_view line = rest.substr(0, e);
    rest = e == std::string_view::npos ? std::string_view{} : rest.substr(e + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
  };
  const auto header = split(take_line());
  const std::vector<std::string_view> expected{"t", "ch1", "ch2", "ch3", "ch4", "ch5", "ch6"};
  if (header != expected) throw DataError(csv.string() + ": header must be t,ch1,...,ch6");
  std::vector<double> values;
  std::int64_t rows = 0;
  while (!rest.empty()) {
    const auto line = take_line();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != 7) throw DataError(csv.string() + ": row " + std::to_string(rows + 1) + " has wrong width");
    for (std::size_t c = 1; c < 7; ++c) values.push_back(parse_double(cells[c], csv.string()));
    ++rows;
  }
  t.samples = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), rows, kNumChannels);
  validate(t);
  return t;
}

// ---------------------------------------------------------------------------
// Dataset directory: subject_<id>/{ramp,dyn}_<k>.csv|.meta plus manifest.json
// ---------------------------------------------------------------------------

struct ManifestEntry {
  int subject = 0;
  std::string id;  // e.g. subject_0/dyn_3, also the relative path stem
  TrialKind kind = TrialKind::dynamic;
  int index = 0;
};

struct Manifest {
  SynthConfig synth;
  std::vector<ManifestEntry> trials;

  std::vector<int> subjects() const {
    std::vector<int> s;
    for (const auto& t : trials)
      if (s.empty() || s.back() != t.subject) s.push_back(t.subject);
    return s;
  }
};

inline json to_json(const Manifest& m) {
  json trials = json::array();
  for (const auto& t : m.trials)
    trials.push_back({{"subject", t.subject},
                      {"id", t.id},
                      {"trial_kind", to_string(t.kind)},
                      {"index", t.index},
                      {"file", t.id + ".csv"}});
  return {{"format", "emgssl-dataset"}, {"version", 1}, {"synth_config", to_json(m.synth)}, {"trials", trials}};
}

inline fs::path manifest_path(const fs::path& dir) { return dir / "manifest.json"; }

inline Manifest read_manifest(const fs::path& dir) {
  if (!fs::exists(manifest_path(dir))) throw DataError("dataset manifest not found in " + dir.string());
  const json j = read_json(manifest_path(dir));
  Manifest m;
  try {
    m.synth = synth_config_from_json(j.at("synth_config"));
    for (const auto& t : j.at("trials"))
      m.trials.push_back({t.at("subject").get<int>(), t.at("id").get<std::string>(),
                          trial_kind_from_string(t.at("trial_kind").get<std::string>()), t.at("index").get<int>()});
  } catch (const json::exception& e) {
    throw DataError(manifest_path(dir).string() + ": " + e.what());
  }
  return m;
}

/// Generates and writes `cfg.num_subjects` subjects.
inline Manifest write_synthetic_dataset(const fs::path& dir, const SynthConfig& cfg) {
  Manifest m;
  m.synth = cfg;
  for (int s = 0; s < cfg.num_subjects; ++s) {
    for (const auto& t : generate_subject(cfg, s)) {
      write_trial(dir / (t.id + ".csv"), t);
      const int k = std::stoi(t.id.substr(t.id.rfind('_') + 1));
      m.trials.push_back({s, t.id, t.kind, k});
    }
  }
  write_json(manifest_path(dir), to_json(m));
  return m;
}

/// All trials of one subject in manifest order (ramp trials first).
inline std::vector<RawTrial> load_subject(const fs::path& dir, const Manifest& m, int subject) {
  std::vector<RawTrial> out;
  for (const auto& e : m.trials)
    if (e.subject == subject) out.push_back(read_trial(dir / (e.id + ".csv")));
  if (out.empty()) throw DataError("subject " + std::to_string(subject) + " is not in the dataset manifest");
  return out;
}

// ---------------------------------------------------------------------------
// Feature cache and label files
// ---------------------------------------------------------------------------

inline void write_feature_cache(const fs::path& p, const Eigen::MatrixXd& features,
                                const std::vector<std::int64_t>& starts) {
  if (features.cols() != kNumFeatures || static_cast<std::size_t>(features.rows()) != starts.size())
    throw UsageError("feature cache: shape mismatch");
  std::string out;
  for (const auto& n : feature_names()) out += n + ",";
  out += "frame_start_sample\n";
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) out += format_double(features(r, c)) + ",";
    out += std::to_string(starts[static_cast<std::size_t>(r)]) + "\n";
  }
  write_atomic(p, out);
}

inline Eigen::MatrixXd read_feature_cache(const fs::path& p, std::vector<std::int64_t>* starts = nullptr) {
  std::istringstream in(read_file(p));
  std::string line;
  std::getline(in, line);
  auto expected = feature_names();
  expected.push_back("frame_start_sample");
  const auto header = split(line);
  if (header.size() != expected.size() || !std::equal(header.begin(), header.end(), expected.begin()))
    throw DataError(p.string() + ": unexpected feature cache header");
  std::vector<double> values;
  if (starts) starts->clear();
  Eigen::Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != expected.size()) throw DataError(p.string() + ": ragged row");
    for (int c = 0; c < kNumFeatures; ++c) values.push_back(parse_double(cells[static_cast<std::size_t>(c)], p.string()));
    if (starts) starts->push_back(static_cast<std::int64_t>(parse_double(cells.back(), p.string())));
    ++rows;
  }
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(values.data(), rows,
                                                                                                   kNumFeatures);
}

inline void write_labels(const fs::path& p, const LabeledFrames& l) {
  std::string out = "frame_start,label,region_kind,region_prev,region_next\n";
  for (std::size_t i = 0; i < l.size(); ++i) {
    const auto& r = l.regions[i];
    out += std::to_string(l.frame_starts[i]) + "," + std::to_string(l.labels[i]) + "," +
           (r.is_steady() ? "steady" : "transition") + "," + std::to_string(r.is_steady() ? r.cls : r.prev) + "," +
           std::to_string(r.is_steady() ? r.cls : r.next) + "\n";
  }
  write_atomic(p, out);
}

inline LabeledFrames read_labels(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::string line;
  std::getline(in, line);
  if (line.rfind("frame_start,label,region_kind,region_prev,region_next", 0) != 0)
    throw DataError(p.string() + ": unexpected label file header");
  LabeledFrames l;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split(line);
    if (c.size() != 5) throw DataError(p.string() + ": ragged row");
    const auto num = [&](std::string_view s) { return static_cast<std::int64_t>(parse_double(s, p.string())); };
    l.frame_starts.push_back(num(c[0]));
    l.labels.push_back(static_cast<int>(num(c[1])));
    if (c[2] == "steady")
      l.regions.push_back(Region::steady(static_cast<int>(num(c[3]))));
    else if (c[2] == "transition")
      l.regions.push_back(Region::transition(static_cast<int>(num(c[3])), static_cast<int>(num(c[4]))));
    else
      throw DataError(p.string() + ": unknown region kind '" + std::string(c[2]) + "'");
  }
  return l;
}

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

struct ResultRow {
  int subject = 0;
  std::string trial;
  std::string scheme;
  double rejection_threshold = 0;
  std::string metric;
  double value = 0;
  std::size_t flag_count = 0;

  bool operator==(const ResultRow&) const = default;
};

inline constexpr const char* kResultsHeader = "subject,trial,scheme,rejection_threshold,metric,value,flag_count";

inline std::string format_results(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows)
    out += std::to_string(r.subject) + "," + r.trial + "," + r.scheme + "," + format_double(r.rejection_threshold) +
           "," + r.metric + "," + format_double(r.value) + "," + std::to_string(r.flag_count) + "\n";
  return out;
}

inline void write_results(const fs::path& p, const std::vector<ResultRow>& rows) {
  write_atomic(p, format_results(rows));
}

inline std::vector<ResultRow> read_results(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kResultsHeader) throw DataError(p.string() + ": not a results file");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split(line);
    if (c.size() != 7) throw DataError(p.string() + ": ragged row");
    ResultRow r;
    r.subject = static_cast<int>(parse_double(c[0], p.string()));
    r.trial = c[1];
    r.scheme = c[2];
    r.rejection_threshold = parse_double(c[3], p.string());
    r.metric = c[4];
    r.value = parse_double(c[5], p.string());
    r.flag_count = static_cast<std::size_t>(parse_double(c[6], p.string()));
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoint pieces: named tensors (shape + row-major values), LDA, fitted
// preprocessing, training history.
// ---------------------------------------------------------------------------

template <class S>
json tensors_to_json(const NetParams<S>& p) {
  json out = json::array();
  for (const auto& [name, m] : p.tensors()) {
    json values = json::array();
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) values.push_back(static_cast<double>((*m)(r, c)));
    out.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"values", std::move(values)}});
  }
  return out;
}

template <class S>
NetParams<S> params_from_json(const json& shape, const json& tensors) {
  auto p = NetParams<S>::zeros(net_shape_from_json(shape));
  auto named = p.tensors();
  if (!tensors.is_array() || tensors.size() != named.size()) throw DataError("checkpoint: tensor count mismatch");
  for (std::size_t k = 0; k < named.size(); ++k) {
    const auto& t = tensors[k];
    auto& m = *named[k].second;
    if (t.at("name").get<std::string>() != named[k].first)
      throw DataError("checkpoint: expected tensor '" + named[k].first + "'");
    if (t.at("shape")[0].get<Eigen::Index>() != m.rows() || t.at("shape")[1].get<Eigen::Index>() != m.cols())
      throw DataError("checkpoint: shape mismatch for '" + named[k].first + "'");
    const auto& v = t.at("values");
    if (static_cast<Eigen::Index>(v.size()) != m.size())
      throw DataError("checkpoint: value count mismatch for '" + named[k].first + "'");
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(v[i++].get<double>());
  }
  return p;
}

inline json to_json(const LdaModel& m) {
  return {{"class_means", matrix_to_json(m.class_means)},
          {"shared_covariance", matrix_to_json(m.shared_covariance)},
          {"priors", std::vector<double>(m.priors.data(), m.priors.data() + m.priors.size())},
          {"fitted_on", m.fitted_on}};
}

inline LdaModel lda_from_json(const json& j) {
  LdaModel m;
  try {
    m.class_means = matrix_from_json(j.at("class_means"), "class_means");
    m.shared_covariance = matrix_from_json(j.at("shared_covariance"), "shared_covariance");
    const auto pr = j.at("priors").get<std::vector<double>>();
    m.priors = Eigen::Map<const Eigen::VectorXd>(pr.data(), static_cast<Eigen::Index>(pr.size()));
    m.fitted_on = j.value("fitted_on", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint LDA model: ") + e.what());
  }
  m.factorize();
  return m;
}

inline json to_json(const Standardizer& s) {
  return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())},
          {"fitted_on", s.fitted_on}};
}

inline Standardizer standardizer_from_json(const json& j) {
  Standardizer s;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("std").get<std::vector<double>>();
  s.mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.std = Eigen::Map<const Eigen::RowVectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  s.fitted_on = j.value("fitted_on", std::vector<std::string>{});
  return s;
}

inline json to_json(const WampThresholds& w) {
  return {{"values", std::vector<double>(w.values.data(), w.values.data() + w.values.size())},
          {"fitted_on", w.fitted_on}};
}

inline WampThresholds wamp_from_json(const json& j) {
  WampThresholds w;
  const auto v = j.at("values").get<std::vector<double>>();
  if (v.size() != kNumChannels) throw DataError("checkpoint: WAMP thresholds need one value per channel");
  w.values = Eigen::Map<const Eigen::VectorXd>(v.data(), kNumChannels);
  w.fitted_on = j.value("fitted_on", std::vector<std::string>{});
  return w;
}

inline json to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  return {{"epochs", epochs},
          {"best_epoch", h.best_epoch},
          {"best_val_loss", std::isfinite(h.best_val_loss) ? json(h.best_val_loss) : json(nullptr)},
          {"early_stopped", h.early_stopped}};
}

inline TrainHistory history_from_json(const json& j) {
  TrainHistory h;
  for (const auto& e : j.at("epochs"))
    h.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_loss").get<double>()});
  h.best_epoch = j.at("best_epoch").get<int>();
  if (!j.at("best_val_loss").is_null()) h.best_val_loss = j.at("best_val_loss").get<double>();
  h.early_stopped = j.at("early_stopped").get<bool>();
  return h;
}

}  // namespace emgssl::io
