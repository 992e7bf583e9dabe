#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "emgssl/augment.hpp"
#include "emgssl/error.hpp"
#include "emgssl/features.hpp"
#include "emgssl/io.hpp"
#include "emgssl/labeling.hpp"
#include "emgssl/lda.hpp"
#include "emgssl/metrics.hpp"
#include "emgssl/neural.hpp"
#include "emgssl/rng.hpp"
#include "emgssl/signal.hpp"
#include "emgssl/synthgen.hpp"
#include "emgssl/vicreg.hpp"

namespace emgssl {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "EMGSSL_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Schemes and configuration
// ---------------------------------------------------------------------------

enum class Scheme { lda_r, lstm_r, lda_d, lstm_d, lstm_v };

inline const std::vector<Scheme>& all_schemes() {
  static const std::vector<Scheme> s{Scheme::lda_r, Scheme::lstm_r, Scheme::lda_d, Scheme::lstm_d, Scheme::lstm_v};
  return s;
}

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::lda_r: return "lda-r";
    case Scheme::lstm_r: return "lstm-r";
    case Scheme::lda_d: return "lda-d";
    case Scheme::lstm_d: return "lstm-d";
    case Scheme::lstm_v: return "lstm-v";
  }
  return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
  for (auto x : all_schemes())
    if (to_string(x) == s) return x;
  throw UsageError("unknown scheme '" + s + "' (expected lda-r, lstm-r, lda-d, lstm-d or lstm-v)");
}

inline bool is_temporal(Scheme s) { return s == Scheme::lstm_r || s == Scheme::lstm_d || s == Scheme::lstm_v; }
inline bool trains_on_ramp(Scheme s) { return s == Scheme::lda_r || s == Scheme::lstm_r; }

inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int k = 0; k <= 9; ++k) t.push_back(k / 10.0);
  return t;
}

struct ExperimentConfig {
  Scheme scheme = Scheme::lstm_v;
  std::string dataset;
  std::uint64_t seed = 42;
  TrainConfig train;
  VicregConfig vicreg;
  AugmentConfig augment;
  NetShape network;
  int sequence_length = 32;  // T
  int train_stride = 1;      // frames between successive training windows
  std::string validation = "lowest";  // or "random"
  std::vector<double> thresholds = default_thresholds();
  std::string output_dir = "emgssl_out";
  double wamp_fraction = kWampRmsFraction;
  bool export_embeddings = false;
  bool write_checkpoints = true;
  std::optional<int> fold;  // run a single fold
  // Set when the document carried vicreg / augment sections.
  bool has_ssl_sections = false;
};

inline void validate(const ExperimentConfig& c) {
  validate(c.train);
  validate(c.vicreg);
  validate(c.augment);
  if (c.has_ssl_sections && c.scheme != Scheme::lstm_v)
    throw UsageError("vicreg / augment settings only apply to scheme lstm-v, not " + to_string(c.scheme));
  if (c.sequence_length < 1) throw UsageError("sequence_length must be >= 1");
  if (c.train_stride < 1) throw UsageError("train_stride must be >= 1");
  if (c.validation != "lowest" && c.validation != "random")
    throw UsageError("validation must be 'lowest' or 'random'");
  if (c.thresholds.empty()) throw UsageError("at least one rejection threshold is required");
  for (double t : c.thresholds)
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError("rejection thresholds must lie in [0, 1]");
  if (!std::is_sorted(c.thresholds.begin(), c.thresholds.end()))
    throw UsageError("rejection thresholds must be in ascending order");
  if (!(c.wamp_fraction > 0)) throw UsageError("wamp_fraction must be > 0");
  if (c.network.inputs != kNumFeatures) throw UsageError("network.inputs must equal the feature count (24)");
  if (c.network.classes != kNumClasses) throw UsageError("network.classes must equal the class count (7)");
  if (c.fold && *c.fold < 0) throw UsageError("fold must be >= 0");
}

inline json to_json(const ExperimentConfig& c) {
  json j{{"scheme", to_string(c.scheme)},
         {"dataset", c.dataset},
         {"seed", c.seed},
         {"sequence_length", c.sequence_length},
         {"train_stride", c.train_stride},
         {"validation", c.validation},
         {"thresholds", c.thresholds},
         {"output_dir", c.output_dir},
         {"wamp_fraction", c.wamp_fraction},
         {"export_embeddings", c.export_embeddings},
         {"write_checkpoints", c.write_checkpoints},
         {"train", io::to_json(c.train)},
         {"network", io::to_json(c.network)}};
  if (c.scheme == Scheme::lstm_v) {
    j["vicreg"] = io::to_json(c.vicreg);
    j["augment"] = io::to_json(c.augment);
  }
  if (c.fold) j["fold"] = *c.fold;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  io::check_keys(j,
                 {"scheme", "dataset", "seed", "sequence_length", "train_stride", "validation", "thresholds",
                  "output_dir", "wamp_fraction", "export_embeddings", "write_checkpoints", "train", "vicreg",
                  "augment", "network", "fold"},
                 "config");
  ExperimentConfig c;
  if (j.contains("scheme")) c.scheme = scheme_from_string(j["scheme"].get<std::string>());
  io::get_if(j, "dataset", c.dataset);
  io::get_if(j, "seed", c.seed);
  io::get_if(j, "sequence_length", c.sequence_length);
  io::get_if(j, "train_stride", c.train_stride);
  io::get_if(j, "validation", c.validation);
  io::get_if(j, "thresholds", c.thresholds);
  io::get_if(j, "output_dir", c.output_dir);
  io::get_if(j, "wamp_fraction", c.wamp_fraction);
  io::get_if(j, "export_embeddings", c.export_embeddings);
  io::get_if(j, "write_checkpoints", c.write_checkpoints);
  if (j.contains("fold")) c.fold = j["fold"].get<int>();
  if (j.contains("train")) c.train = io::train_config_from_json(j["train"]);
  if (j.contains("network")) c.network = io::net_shape_from_json(j["network"]);
  if (j.contains("vicreg")) c.vicreg = io::vicreg_config_from_json(j["vicreg"]);
  if (j.contains("augment")) c.augment = io::augment_config_from_json(j["augment"]);
  c.has_ssl_sections = j.contains("vicreg") || j.contains("augment");
  validate(c);
  return c;
}

/// Explicit value, else $EMGSSL_OUTPUT_ROOT, else the configured directory.
inline fs::path resolve_output_root(const std::string& explicit_dir, const std::string& configured) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return configured;
}

// ---------------------------------------------------------------------------
// Per-subject preprocessing
// ---------------------------------------------------------------------------

/// A filtered trial with its fold-independent features and labels. The WAMP
/// columns of `features` are placeholders until a fold refits them.
struct PreparedTrial {
  RawTrial filtered;
  Eigen::MatrixXd features;
  LabeledFrames labels;

  const std::string& id() const { return filtered.id; }
  TrialKind kind() const { return filtered.kind; }
  std::vector<Frame> frames() const { return frame_trial(filtered); }
};

struct SubjectData {
  int subject = 0;
  std::vector<PreparedTrial> trials;

  std::vector<std::size_t> of_kind(TrialKind k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < trials.size(); ++i)
      if (trials[i].kind() == k) out.push_back(i);
    return out;
  }
  std::size_t find(const std::string& id) const {
    for (std::size_t i = 0; i < trials.size(); ++i)
      if (trials[i].id() == id) return i;
    throw DataError("trial '" + id + "' not found for subject " + std::to_string(subject));
  }
};

inline PreparedTrial prepare_trial(RawTrial raw) {
  validate(raw);
  PreparedTrial p;
  p.filtered = bandpass_filter(raw);
  raw.samples.resize(0, 0);
  const auto frames = p.frames();
  p.features = extract_features(frames, Eigen::VectorXd::Zero(kNumChannels));
  p.labels = label_trial(p.filtered, frames);
  return p;
}

/// Filters, frames, featurizes and labels every trial. Ramp and dynamic
/// trials keep their relative order.
inline SubjectData prepare_subject(int subject, std::vector<RawTrial> raw) {
  SubjectData d;
  d.subject = subject;
  for (auto& t : raw) d.trials.push_back(prepare_trial(std::move(t)));
  for (auto k : {TrialKind::ramp, TrialKind::dynamic})
    if (d.of_kind(k).empty())
      throw DataError("subject " + std::to_string(subject) + " has no " + to_string(k) + " trials");
  return d;
}

// ---------------------------------------------------------------------------
// Fold planning and audit
// ---------------------------------------------------------------------------

struct FoldPlan {
  int fold = 0;
  std::vector<std::size_t> train, validation, test;
};

inline std::vector<FoldPlan> plan_folds(Scheme scheme, const SubjectData& d, const ExperimentConfig& cfg) {
  const auto ramp = d.of_kind(TrialKind::ramp);
  const auto dyn = d.of_kind(TrialKind::dynamic);
  std::vector<FoldPlan> plans;
  const Rng root = Rng(cfg.seed).child({static_cast<std::uint64_t>(d.subject), 0x5e1ec7});
  if (trains_on_ramp(scheme)) {
    FoldPlan p;
    p.test = dyn;
    p.train = ramp;
    if (scheme == Scheme::lstm_r) {
      if (ramp.size() < 2) throw DataError("lstm-r needs at least 2 ramp trials");
      Rng r = root.child({0});
      const auto v = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(ramp.size()) - 1));
      p.validation = {ramp[v]};
      p.train.erase(p.train.begin() + static_cast<std::ptrdiff_t>(v));
    }
    plans.push_back(std::move(p));
    return plans;
  }
  const bool needs_val = is_temporal(scheme);
  if (dyn.size() < (needs_val ? 3u : 2u))
    throw DataError("not enough dynamic trials for leave-one-trial-out on subject " + std::to_string(d.subject));
  for (std::size_t k = 0; k < dyn.size(); ++k) {
    FoldPlan p;
    p.fold = static_cast<int>(k);
    p.test = {dyn[k]};
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < dyn.size(); ++i)
      if (i != k) rest.push_back(dyn[i]);
    if (needs_val) {
      std::size_t v = 0;
      if (cfg.validation == "random") {
        Rng r = root.child({1, k});
        v = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(rest.size()) - 1));
      }
      p.validation = {rest[v]};
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(v));
    }
    p.train = std::move(rest);
    plans.push_back(std::move(p));
  }
  return plans;
}

struct AuditEntry {
  std::string object;
  std::vector<std::string> fitted_on;
};

struct FoldRecord {
  int fold = 0;
  std::vector<std::string> train, validation, test;
  std::vector<AuditEntry> audit;
  std::optional<TrainHistory> history;           // supervised training
  std::optional<TrainHistory> pretrain_history;  // VICReg
  std::vector<double> embedding_std;             // per dimension, validation windows
  double seconds = 0;
};

/// Human-readable audit violations: a test trial among any fitted object's
/// inputs, or overlapping train / validation / test sets.
inline std::vector<std::string> audit_violations(const FoldRecord& r) {
  std::vector<std::string> out;
  const auto has = [](const std::vector<std::string>& v, const std::string& id) {
    return std::find(v.begin(), v.end(), id) != v.end();
  };
  for (const auto& t : r.test) {
    for (const auto& e : r.audit)
      if (has(e.fitted_on, t)) out.push_back("fold " + std::to_string(r.fold) + ": " + e.object + " fitted on test trial " + t);
    if (has(r.train, t) || has(r.validation, t))
      out.push_back("fold " + std::to_string(r.fold) + ": test trial " + t + " also used for training");
  }
  for (const auto& v : r.validation)
    if (has(r.train, v)) out.push_back("fold " + std::to_string(r.fold) + ": validation trial " + v + " also in train");
  return out;
}

inline json to_json(const FoldRecord& r) {
  json audit = json::array();
  for (const auto& e : r.audit) audit.push_back({{"object", e.object}, {"fitted_on", e.fitted_on}});
  json j{{"fold", r.fold}, {"train", r.train}, {"validation", r.validation}, {"test", r.test}, {"audit", audit}};
  if (r.history) j["history"] = io::to_json(*r.history);
  if (r.pretrain_history) j["pretrain_history"] = io::to_json(*r.pretrain_history);
  if (!r.embedding_std.empty()) j["embedding_std"] = r.embedding_std;
  return j;
}

// ---------------------------------------------------------------------------
// Fold preprocessing: WAMP refit, standardization, float buffers
// ---------------------------------------------------------------------------

struct FoldFeatures {
  WampThresholds wamp;
  Standardizer standardizer;
  std::map<std::size_t, Eigen::MatrixXd> x;  // trial -> standardized frames x F
  std::map<std::size_t, Mat<float>> xf;     // trial -> F x frames, float
};

inline Eigen::MatrixXd fold_features(const PreparedTrial& t, const WampThresholds& w) {
  Eigen::MatrixXd f = t.features;
  refresh_wamp(f, t.frames(), w.values);
  return f;
}

inline void add_standardized(FoldFeatures& ff, const SubjectData& d, std::size_t i) {
  Eigen::MatrixXd z = ff.standardizer.apply(fold_features(d.trials[i], ff.wamp));
  ff.xf[i] = z.transpose().cast<float>();
  ff.x[i] = std::move(z);
}

/// WAMP thresholds and the standardizer come from the training trials only.
inline FoldFeatures prepare_fold(const SubjectData& d, const FoldPlan& plan, double wamp_fraction) {
  FoldFeatures ff;
  std::vector<const RawTrial*> train_raw;
  for (auto i : plan.train) train_raw.push_back(&d.trials[i].filtered);
  ff.wamp = fit_wamp_thresholds(train_raw, wamp_fraction);

  std::vector<Eigen::MatrixXd> parts;
  std::vector<std::string> ids;
  Eigen::Index rows = 0;
  for (auto i : plan.train) {
    parts.push_back(fold_features(d.trials[i], ff.wamp));
    rows += parts.back().rows();
    ids.push_back(d.trials[i].id());
  }
  Eigen::MatrixXd all(rows, kNumFeatures);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    all.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  ff.standardizer = fit_standardizer(all, ids);
  for (const auto* set : {&plan.train, &plan.validation, &plan.test})
    for (auto i : *set) add_standardized(ff, d, i);
  return ff;
}

// ---------------------------------------------------------------------------
// Sequence windows
// ---------------------------------------------------------------------------

struct Window {
  std::size_t trial = 0;
  std::int64_t start = 0;  // first frame; negative values repeat frame 0
  int label = 0;
};

/// Windows lying fully inside each trial, labelled by their last frame.
inline std::vector<Window> training_windows(const SubjectData& d, const std::vector<std::size_t>& trials, int steps,
                                            int stride) {
  std::vector<Window> w;
  for (auto i : trials) {
    const auto n = static_cast<std::int64_t>(d.trials[i].labels.size());
    for (std::int64_t s = 0; s + steps <= n; s += stride)
      w.push_back({i, s, d.trials[i].labels.labels[static_cast<std::size_t>(s + steps - 1)]});
  }
  if (w.empty()) throw DataError("no training windows: trials shorter than the sequence length");
  return w;
}

/// One window ending at every frame of `trial`, left-padded with frame 0.
inline std::vector<Window> causal_windows(const SubjectData& d, std::size_t trial, int steps) {
  std::vector<Window> w;
  const auto& labels = d.trials[trial].labels.labels;
  for (std::size_t k = 0; k < labels.size(); ++k)
    w.push_back({trial, static_cast<std::int64_t>(k) - steps + 1, labels[k]});
  return w;
}

/// F x (T * B) batch; column t * B + j holds step t of window j.
inline Mat<float> gather(const FoldFeatures& ff, std::span<const Window> windows, int steps) {
  const auto b = static_cast<Eigen::Index>(windows.size());
  Mat<float> x(kNumFeatures, steps * b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto& w = windows[static_cast<std::size_t>(j)];
    const auto& src = ff.xf.at(w.trial);
    for (int t = 0; t < steps; ++t) x.col(t * b + j) = src.col(std::max<std::int64_t>(0, w.start + t));
  }
  return x;
}

inline std::vector<int> labels_of(std::span<const Window> windows) {
  std::vector<int> y;
  y.reserve(windows.size());
  for (const auto& w : windows) y.push_back(w.label);
  return y;
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

/// Two augmented views of each window, F x (T * B) each.
inline std::pair<Mat<float>, Mat<float>> gather_views(const FoldFeatures& ff, std::span<const Window> windows,
                                                      int steps, const AugmentConfig& cfg, Rng& rng) {
  const auto b = static_cast<Eigen::Index>(windows.size());
  Mat<float> va(kNumFeatures, steps * b), vb(kNumFeatures, steps * b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto& w = windows[static_cast<std::size_t>(j)];
    const auto& buf = ff.x.at(w.trial);
    const auto s = take_window(buf, w.trial, w.start, steps);
    const auto [a, bb] = make_views(s, buf, cfg, rng);
    for (int t = 0; t < steps; ++t) {
      va.col(t * b + j) = a.x.row(t).transpose().cast<float>();
      vb.col(t * b + j) = bb.x.row(t).transpose().cast<float>();
    }
  }
  return {std::move(va), std::move(vb)};
}

inline constexpr std::size_t kInferenceChunk = 512;

/// Backbone embeddings (D x N) for the given windows.
inline Mat<float> embed(const NetParams<float>& p, const FoldFeatures& ff, const std::vector<Window>& windows,
                        int steps) {
  Mat<float> z(p.shape.embedding, static_cast<Eigen::Index>(windows.size()));
  for (std::size_t b = 0; b < windows.size(); b += kInferenceChunk) {
    const std::size_t n = std::min(kInferenceChunk, windows.size() - b);
    const std::span<const Window> part(windows.data() + b, n);
    z.middleCols(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(n)) =
        backbone_forward(p, gather(ff, part, steps), steps);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void select_tensors(NetParams<S>& p, NetParams<S>& g, TrainProblem<S>& prob, bool (*keep)(const std::string&)) {
  auto pt = p.tensors();
  auto gt = g.tensors();
  for (std::size_t k = 0; k < pt.size(); ++k) {
    if (!keep(pt[k].first)) continue;
    prob.params.push_back(pt[k].second);
    prob.grads.push_back(gt[k].second);
    prob.trainable.push_back(true);
  }
}

inline bool any_tensor(const std::string&) { return true; }
inline bool head_tensor(const std::string& n) { return !is_backbone_tensor(n); }

inline double batched_xent(const NetParams<float>& p, const Mat<float>& z, const std::vector<int>& y) {
  const Mat<float> post = head_forward(p, z);
  return static_cast<double>(xent_loss<float>(post, y));
}

}  // namespace detail

/// Joint backbone + head training with cross-entropy.
inline TrainHistory train_end_to_end(NetParams<float>& p, const FoldFeatures& ff, const std::vector<Window>& train,
                                     const std::vector<Window>& val, const ExperimentConfig& cfg, Rng& rng) {
  const int steps = cfg.sequence_length;
  auto grad = NetParams<float>::zeros(p.shape);
  TrainProblem<float> prob;
  detail::select_tensors(p, grad, prob, detail::any_tensor);
  prob.num_samples = train.size();
  prob.batch_loss = [&](std::span<const std::size_t> idx) {
    const auto w = pick(train, idx);
    return static_cast<double>(supervised_loss_and_grad<float>(p, gather(ff, w, steps), steps, labels_of(w), &grad));
  };
  const auto val_y = labels_of(val);
  prob.validation_loss = [&]() { return detail::batched_xent(p, embed(p, ff, val, steps), val_y); };
  return emgssl::train(prob, cfg.train, cfg.train.lr_end_to_end, rng);
}

/// Label-free VICReg pre-training of the backbone tensors. Validation loss
/// uses one fixed draw of augmented views.
inline TrainHistory pretrain_vicreg(NetParams<float>& p, const FoldFeatures& ff, const std::vector<Window>& train,
                                    const std::vector<Window>& val, const ExperimentConfig& cfg, Rng& rng) {
  const int steps = cfg.sequence_length;
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  const std::size_t min_batch = std::max<std::size_t>(2, bs / 2);
  auto grad = NetParams<float>::zeros(p.shape);
  TrainProblem<float> prob;
  detail::select_tensors(p, grad, prob, is_backbone_tensor);
  prob.num_samples = train.size();
  prob.min_batch = min_batch;
  Rng aug = rng.child({0xa06});
  prob.batch_loss = [&](std::span<const std::size_t> idx) {
    const auto w = pick(train, idx);
    const auto [va, vb] = gather_views(ff, w, steps, cfg.augment, aug);
    return vicreg_backbone_loss<float>(p, va, vb, steps, cfg.vicreg, &grad).total;
  };

  std::vector<std::pair<Mat<float>, Mat<float>>> val_views;
  Rng val_aug = rng.child({0x7a1});
  for (std::size_t b = 0; b < val.size(); b += bs) {
    const std::size_t n = std::min(bs, val.size() - b);
    if (n < 2 || (b > 0 && n < min_batch)) continue;
    val_views.push_back(gather_views(ff, std::span<const Window>(val.data() + b, n), steps, cfg.augment, val_aug));
  }
  if (val_views.empty()) throw DataError("validation trial too short for a VICReg batch");
  prob.validation_loss = [&]() {
    double total = 0, count = 0;
    for (const auto& [va, vb] : val_views) {
      const double n = static_cast<double>(va.cols() / steps);
      total += n * vicreg_backbone_loss<float>(p, va, vb, steps, cfg.vicreg, nullptr).total;
      count += n;
    }
    return total / count;
  };
  return emgssl::train(prob, cfg.train, cfg.train.lr_backbone, rng);
}

/// Head training on embeddings of the frozen backbone. Only head tensors are
/// handed to the optimizer.
inline TrainHistory train_head(NetParams<float>& p, const Mat<float>& z_train, const std::vector<int>& y_train,
                               const Mat<float>& z_val, const std::vector<int>& y_val, const TrainConfig& cfg,
                               Rng& rng) {
  auto grad = NetParams<float>::zeros(p.shape);
  TrainProblem<float> prob;
  detail::select_tensors(p, grad, prob, detail::head_tensor);
  prob.num_samples = static_cast<std::size_t>(z_train.cols());
  Mat<float> zb;
  prob.batch_loss = [&](std::span<const std::size_t> idx) {
    zb.resize(z_train.rows(), static_cast<Eigen::Index>(idx.size()));
    std::vector<int> y;
    y.reserve(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      zb.col(static_cast<Eigen::Index>(j)) = z_train.col(static_cast<Eigen::Index>(idx[j]));
      y.push_back(y_train[idx[j]]);
    }
    const Mat<float> post = head_forward(p, zb);
    head_backward(p, zb, xent_grad_logits<float>(post, y), grad);
    return static_cast<double>(xent_loss<float>(post, y));
  };
  prob.validation_loss = [&]() { return detail::batched_xent(p, z_val, y_val); };
  return emgssl::train(prob, cfg, cfg.lr_head, rng);
}

inline std::vector<double> embedding_std(const Mat<float>& z) {
  const Eigen::MatrixXd zd = z.cast<double>().transpose();  // N x D
  const Eigen::MatrixXd c = zd.rowwise() - zd.colwise().mean();
  std::vector<double> sd;
  const double denom = std::max<double>(1.0, static_cast<double>(zd.rows() - 1));
  for (Eigen::Index j = 0; j < c.cols(); ++j) sd.push_back(std::sqrt(c.col(j).squaredNorm() / denom));
  return sd;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// A fitted classifier for one fold: either LDA or a network.
struct FoldModel {
  std::optional<LdaModel> lda;
  std::optional<NetParams<float>> net;
  int steps = 1;
};

/// Frames x classes posteriors for one trial; optionally the embeddings of
/// every evaluated sequence (D x frames).
inline Eigen::MatrixXd trial_posteriors(const FoldModel& m, const SubjectData& d, const FoldFeatures& ff,
                                        std::size_t trial, Mat<float>* embeddings = nullptr) {
  if (m.lda) return m.lda->predict_posterior(ff.x.at(trial));
  const auto windows = causal_windows(d, trial, m.steps);
  const Mat<float> z = embed(*m.net, ff, windows, m.steps);
  if (embeddings) *embeddings = z;
  return head_forward(*m.net, z).transpose().cast<double>();
}

inline std::vector<io::ResultRow> evaluate_trial(const Eigen::MatrixXd& posteriors, const LabeledFrames& labels,
                                                 int subject, const std::string& trial, const std::string& scheme,
                                                 const std::vector<double>& thresholds) {
  const auto stream = classify_stream(posteriors, labels.regions);
  std::vector<io::ResultRow> rows;
  for (const auto& s : rejection_sweep(stream, thresholds)) {
    const auto values = s.report.values();
    for (std::size_t m = 0; m < values.size(); ++m)
      rows.push_back({subject, trial, scheme, s.threshold, metric_names()[m], values[m], s.report.flagged_transitions});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline json checkpoint_json(const ExperimentConfig& cfg, const SubjectData& d, const FoldRecord& rec,
                            const FoldFeatures& ff, const FoldModel& m, const std::string& stage = "final") {
  json j{{"format", io::kCheckpointFormat},
         {"version", io::kCheckpointVersion},
         {"stage", stage},
         {"scheme", to_string(cfg.scheme)},
         {"subject", d.subject},
         {"dataset", cfg.dataset},
         {"sequence_length", cfg.sequence_length},
         {"fold", to_json(rec)},
         {"wamp", io::to_json(ff.wamp)},
         {"standardizer", io::to_json(ff.standardizer)},
         {"train_config", io::to_json(cfg.train)},
         {"experiment_config", to_json(cfg)}};
  if (m.lda) {
    j["model"] = {{"kind", "lda"}, {"lda", io::to_json(*m.lda)}};
  } else {
    j["model"] = {{"kind", "network"}, {"shape", io::to_json(m.net->shape)}, {"tensors", io::tensors_to_json(*m.net)}};
  }
  return j;
}

inline FoldModel model_from_checkpoint(const json& j) {
  if (j.value("format", "") != io::kCheckpointFormat) throw DataError("not an emgssl checkpoint");
  if (j.value("version", 0) != io::kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  FoldModel m;
  const auto& model = j.at("model");
  if (model.at("kind") == "lda") {
    m.lda = io::lda_from_json(model.at("lda"));
  } else {
    m.net = io::params_from_json<float>(model.at("shape"), model.at("tensors"));
    m.steps = j.at("sequence_length").get<int>();
  }
  return m;
}

struct Paths {
  fs::path root;
  fs::path results(int subject, const std::string& name) const {
    return root / "results" / ("subject_" + std::to_string(subject)) / (name + ".csv");
  }
  fs::path checkpoint(int subject, const std::string& name) const {
    return root / "checkpoints" / ("subject_" + std::to_string(subject)) / (name + ".json");
  }
  fs::path audit(int subject, const std::string& name) const {
    return root / "audit" / ("subject_" + std::to_string(subject)) / (name + ".json");
  }
  fs::path embeddings(int subject, const std::string& name) const {
    return root / "embeddings" / ("subject_" + std::to_string(subject)) / (name + ".csv");
  }
};

inline std::string fold_name(Scheme s, int fold) { return to_string(s) + "_fold" + std::to_string(fold); }

/// trial, frame, label, then one column per embedding dimension.
inline std::string format_embeddings(const std::string& trial, const Mat<float>& z, const LabeledFrames& labels,
                                     bool header) {
  std::string out;
  if (header) {
    out = "trial,frame,label";
    for (Eigen::Index k = 0; k < z.rows(); ++k) out += ",e" + std::to_string(k);
    out += "\n";
  }
  for (Eigen::Index n = 0; n < z.cols(); ++n) {
    out += trial + "," + std::to_string(n) + "," + std::to_string(labels.labels[static_cast<std::size_t>(n)]);
    for (Eigen::Index k = 0; k < z.rows(); ++k) out += "," + io::format_double(static_cast<double>(z(k, n)));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// run_scheme
// ---------------------------------------------------------------------------

struct SchemeResult {
  Scheme scheme = Scheme::lda_r;
  int subject = 0;
  std::vector<io::ResultRow> rows;
  std::vector<FoldRecord> folds;
};

struct RunOptions {
  std::ostream* log = nullptr;
  bool write_files = true;
};

namespace detail {

inline std::vector<std::string> ids_of(const SubjectData& d, const std::vector<std::size_t>& idx) {
  std::vector<std::string> ids;
  for (auto i : idx) ids.push_back(d.trials[i].id());
  return ids;
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline Rng fold_rng(const ExperimentConfig& cfg, int subject, int fold) {
  return Rng(cfg.seed).child({static_cast<std::uint64_t>(subject), static_cast<std::uint64_t>(cfg.scheme),
                              static_cast<std::uint64_t>(fold)});
}

/// Frames x F standardized training matrix and labels for LDA.
inline std::pair<Eigen::MatrixXd, std::vector<int>> stacked(const SubjectData& d, const FoldFeatures& ff,
                                                            const std::vector<std::size_t>& trials) {
  Eigen::Index rows = 0;
  for (auto i : trials) rows += ff.x.at(i).rows();
  Eigen::MatrixXd x(rows, kNumFeatures);
  std::vector<int> y;
  Eigen::Index r = 0;
  for (auto i : trials) {
    x.middleRows(r, ff.x.at(i).rows()) = ff.x.at(i);
    r += ff.x.at(i).rows();
    y.insert(y.end(), d.trials[i].labels.labels.begin(), d.trials[i].labels.labels.end());
  }
  return {std::move(x), std::move(y)};
}

}  // namespace detail

/// Fits and evaluates one fold. Fills `rec` and returns the result rows.
inline std::vector<io::ResultRow> run_fold(const ExperimentConfig& cfg, const SubjectData& d, const FoldPlan& plan,
                                           FoldRecord& rec, const Paths* paths, std::string* embeddings_csv) {
  const auto t0 = std::chrono::steady_clock::now();
  rec.fold = plan.fold;
  rec.train = detail::ids_of(d, plan.train);
  rec.validation = detail::ids_of(d, plan.validation);
  rec.test = detail::ids_of(d, plan.test);

  const FoldFeatures ff = prepare_fold(d, plan, cfg.wamp_fraction);
  rec.audit.push_back({"wamp_thresholds", ff.wamp.fitted_on});
  rec.audit.push_back({"standardizer", ff.standardizer.fitted_on});
  for (const auto* set : {&plan.train, &plan.validation})
    for (auto i : *set)
      if (d.trials[i].labels.nm_threshold) rec.audit.push_back({"nm_threshold/" + d.trials[i].id(), {d.trials[i].id()}});

  Rng rng = detail::fold_rng(cfg, d.subject, plan.fold);
  const auto fit_ids = detail::concat(rec.train, rec.validation);
  FoldModel model;
  model.steps = cfg.sequence_length;
  const std::string name = fold_name(cfg.scheme, plan.fold);

  if (!is_temporal(cfg.scheme)) {
    const auto [x, y] = detail::stacked(d, ff, plan.train);
    model.lda = fit_lda(x, y, kNumClasses, rec.train);
    rec.audit.push_back({"lda", model.lda->fitted_on});
  } else {
    Rng init = rng.child({0x1417});
    model.net = init_params<float>(cfg.network, init);
    auto& p = *model.net;
    const int steps = cfg.sequence_length;
    const auto train_w = training_windows(d, plan.train, steps, cfg.train_stride);
    const auto val_w = training_windows(d, plan.validation, steps, cfg.train_stride);
    if (cfg.scheme == Scheme::lstm_v) {
      Rng pre = rng.child({0x55});
      rec.pretrain_history = pretrain_vicreg(p, ff, train_w, val_w, cfg, pre);
      rec.audit.push_back({"backbone", fit_ids});
      const Mat<float> z_val = embed(p, ff, val_w, steps);
      rec.embedding_std = embedding_std(z_val);
      if (paths && cfg.write_checkpoints)
        io::write_json(paths->checkpoint(d.subject, name + "_pretrain"),
                       checkpoint_json(cfg, d, rec, ff, model, "pretrain"));
      Rng head = rng.child({0xead});
      rec.history = train_head(p, embed(p, ff, train_w, steps), labels_of(train_w), z_val, labels_of(val_w), cfg.train,
                               head);
      rec.audit.push_back({"head", fit_ids});
    } else {
      Rng sup = rng.child({0x5e});
      rec.history = train_end_to_end(p, ff, train_w, val_w, cfg, sup);
      rec.audit.push_back({"network", fit_ids});
    }
  }

  std::vector<io::ResultRow> rows;
  for (auto i : plan.test) {
    Mat<float> z;
    const auto post = trial_posteriors(model, d, ff, i, embeddings_csv ? &z : nullptr);
    const auto r = evaluate_trial(post, d.trials[i].labels, d.subject, d.trials[i].id(), to_string(cfg.scheme),
                                  cfg.thresholds);
    rows.insert(rows.end(), r.begin(), r.end());
    if (embeddings_csv && z.size() > 0)
      *embeddings_csv += format_embeddings(d.trials[i].id(), z, d.trials[i].labels, embeddings_csv->empty());
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (paths && cfg.write_checkpoints) io::write_json(paths->checkpoint(d.subject, name), checkpoint_json(cfg, d, rec, ff, model));
  return rows;
}

/// Runs every fold of `cfg.scheme` (or only `cfg.fold`) on one subject.
/// Writes results/<subject>/<scheme>.csv, the fold checkpoints and the audit
/// log under the output directory when `opt.write_files` is set.
inline SchemeResult run_scheme(const ExperimentConfig& cfg, const SubjectData& d, const RunOptions& opt = {}) {
  validate(cfg);
  SchemeResult res;
  res.scheme = cfg.scheme;
  res.subject = d.subject;
  auto plans = plan_folds(cfg.scheme, d, cfg);
  if (cfg.fold) {
    if (*cfg.fold >= static_cast<int>(plans.size()))
      throw UsageError("fold " + std::to_string(*cfg.fold) + " out of range (scheme " + to_string(cfg.scheme) + " has " +
                       std::to_string(plans.size()) + ")");
    plans = {plans[static_cast<std::size_t>(*cfg.fold)]};
  }
  const Paths paths{cfg.output_dir};
  const Paths* out = opt.write_files ? &paths : nullptr;
  const bool export_z = opt.write_files && cfg.export_embeddings && is_temporal(cfg.scheme);
  for (const auto& plan : plans) {
    FoldRecord rec;
    std::string z_csv;
    const auto rows = run_fold(cfg, d, plan, rec, out, export_z ? &z_csv : nullptr);
    res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    if (export_z) io::write_atomic(paths.embeddings(d.subject, fold_name(cfg.scheme, plan.fold)), z_csv);
    if (opt.log) {
      *opt.log << "subject " << d.subject << " " << to_string(cfg.scheme) << " fold " << plan.fold;
      if (rec.pretrain_history)
        *opt.log << ": vicreg " << rec.pretrain_history->epochs.size() << " epochs (best "
                 << rec.pretrain_history->best_epoch << ")";
      if (rec.history)
        *opt.log << (rec.pretrain_history ? ", head " : ": ") << rec.history->epochs.size() << " epochs (best "
                 << rec.history->best_epoch << ", val " << rec.history->best_val_loss << ")";
      *opt.log << ", " << rec.seconds << " s\n";
      opt.log->flush();
    }
    res.folds.push_back(std::move(rec));
  }
  if (opt.write_files) {
    const std::string name = cfg.fold ? fold_name(cfg.scheme, *cfg.fold) : to_string(cfg.scheme);
    io::write_results(paths.results(d.subject, name), res.rows);
    json folds = json::array();
    for (const auto& f : res.folds) folds.push_back(to_json(f));
    io::write_json(paths.audit(d.subject, name), {{"scheme", to_string(cfg.scheme)}, {"subject", d.subject}, {"folds", folds}});
  }
  return res;
}

/// Loads one subject of the dataset named in `cfg` and runs the scheme.
inline SchemeResult run_scheme_from_disk(const ExperimentConfig& cfg, int subject, const RunOptions& opt = {}) {
  if (cfg.dataset.empty()) throw UsageError("no dataset path configured");
  const auto manifest = io::read_manifest(cfg.dataset);
  return run_scheme(cfg, prepare_subject(subject, io::load_subject(cfg.dataset, manifest, subject)), opt);
}

/// Re-evaluates a checkpoint on its held-out trials with new thresholds.
inline std::vector<io::ResultRow> evaluate_checkpoint(const json& ckpt, const std::vector<double>& thresholds,
                                                      const SubjectData* preloaded = nullptr) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end()) || thresholds.empty())
    throw UsageError("thresholds must be a non-empty ascending list");
  const FoldModel model = model_from_checkpoint(ckpt);
  const int subject = ckpt.at("subject").get<int>();
  SubjectData loaded;
  if (!preloaded) {
    const std::string dataset = ckpt.at("dataset").get<std::string>();
    if (dataset.empty()) throw DataError("checkpoint does not name its dataset");
    loaded = prepare_subject(subject, io::load_subject(dataset, io::read_manifest(dataset), subject));
    preloaded = &loaded;
  }
  const SubjectData& d = *preloaded;
  FoldFeatures ff;
  ff.wamp = io::wamp_from_json(ckpt.at("wamp"));
  ff.standardizer = io::standardizer_from_json(ckpt.at("standardizer"));
  const auto tests = ckpt.at("fold").at("test").get<std::vector<std::string>>();
  std::vector<io::ResultRow> rows;
  for (const auto& id : tests) {
    const auto i = d.find(id);
    add_standardized(ff, d, i);
    const auto r = evaluate_trial(trial_posteriors(model, d, ff, i), d.trials[i].labels, subject, id,
                                  ckpt.at("scheme").get<std::string>(), thresholds);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct SummaryRow {
  std::string scheme, metric;
  double threshold = 0;
  std::size_t n = 0;
  double median = 0, q1 = 0, q3 = 0, mean = 0;
};

/// Linearly interpolated quantile of sorted values.
inline double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw DataError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Distribution of per-trial values for every scheme x metric x threshold.
/// Duplicate rows for the same trial (several runs of one fold) are averaged
/// first.
inline std::vector<SummaryRow> summarize(const std::vector<io::ResultRow>& rows) {
  if (rows.empty()) throw DataError("no result rows to summarize");
  using TrialKey = std::tuple<std::string, std::string, double, int, std::string>;
  std::map<TrialKey, std::pair<double, int>> per_trial;
  for (const auto& r : rows) {
    auto& acc = per_trial[{r.scheme, r.metric, r.rejection_threshold, r.subject, r.trial}];
    acc.first += r.value;
    acc.second += 1;
  }
  std::map<std::tuple<std::string, double, std::string>, std::vector<double>> groups;
  for (const auto& [k, acc] : per_trial)
    groups[{std::get<0>(k), std::get<2>(k), std::get<1>(k)}].push_back(acc.first / acc.second);

  std::vector<SummaryRow> out;
  for (auto& [k, v] : groups) {
    std::sort(v.begin(), v.end());
    SummaryRow s{std::get<0>(k), std::get<2>(k), std::get<1>(k), v.size()};
    s.median = quantile(v, 0.5);
    s.q1 = quantile(v, 0.25);
    s.q3 = quantile(v, 0.75);
    double sum = 0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    out.push_back(s);
  }
  // metric order follows the metric table rather than the alphabet
  const auto metric_rank = [](const std::string& m) {
    const auto& names = metric_names();
    return std::find(names.begin(), names.end(), m) - names.begin();
  };
  std::stable_sort(out.begin(), out.end(), [&](const SummaryRow& a, const SummaryRow& b) {
    return std::tuple(a.scheme, metric_rank(a.metric), a.threshold) <
           std::tuple(b.scheme, metric_rank(b.metric), b.threshold);
  });
  return out;
}

inline std::vector<io::ResultRow> collect_results(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("results directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<io::ResultRow> rows;
  for (const auto& f : files) {
    const auto r = io::read_results(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw DataError("no result rows under " + dir.string());
  return rows;
}

/// summary.csv (median and quartiles) and rejection_curves.csv (mean per
/// threshold) in `out_dir`. Returns the summary rows.
inline std::vector<SummaryRow> emit_report(const fs::path& results_dir, const fs::path& out_dir) {
  const auto summary = summarize(collect_results(results_dir));
  std::string s = "scheme,metric,rejection_threshold,n,median,q1,q3\n";
  std::string c = "scheme,rejection_threshold,metric,mean\n";
  for (const auto& r : summary) {
    s += r.scheme + "," + r.metric + "," + io::format_double(r.threshold) + "," + std::to_string(r.n) + "," +
         io::format_double(r.median) + "," + io::format_double(r.q1) + "," + io::format_double(r.q3) + "\n";
  }
  auto curves = summary;
  std::stable_sort(curves.begin(), curves.end(), [](const SummaryRow& a, const SummaryRow& b) {
    return std::tie(a.scheme, a.threshold) < std::tie(b.scheme, b.threshold);
  });
  for (const auto& r : curves)
    c += r.scheme + "," + io::format_double(r.threshold) + "," + r.metric + "," + io::format_double(r.mean) + "\n";
  io::write_atomic(out_dir / "summary.csv", s);
  io::write_atomic(out_dir / "rejection_curves.csv", c);
  return summary;
}

}  // namespace emgssl
