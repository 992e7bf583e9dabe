#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/rng.hpp"
#include "emgssl/signal.hpp"

namespace emgssl {

inline constexpr int kNumClasses = 7;
inline constexpr int kNoMovement = 0;

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"NM", "WF", "WE", "WP", "WS", "HC", "HO"};
  return names;
}

/// Per-class, per-channel activation gains. Row 0 (NM) is silent: rest is
/// represented by the additive noise floor alone.
inline Eigen::MatrixXd default_class_gains() {
  Eigen::MatrixXd g(kNumClasses, kNumChannels);
  // clang-format off
  g << 0.00, 0.00, 0.00, 0.00, 0.00, 0.00,   // NM
       1.00, 0.65, 0.20, 0.10, 0.15, 0.45,   // WF
       0.15, 0.10, 0.45, 1.00, 0.70, 0.20,   // WE
       0.70, 1.00, 0.55, 0.15, 0.10, 0.10,   // WP
       0.10, 0.15, 0.25, 0.55, 1.00, 0.80,   // WS
       0.85, 0.35, 0.15, 0.40, 0.30, 1.00,   // HC
       0.25, 0.50, 1.00, 0.75, 0.25, 0.15;   // HO
  // clang-format on
  return g;
}

struct SynthConfig {
  int num_subjects = 1;
  std::uint64_t seed = 42;
  int ramp_trials = 5;
  int dynamic_trials = 6;
  double prompt_duration_s = 3.0;
  double transition_min_s = 0.3;
  double transition_max_s = 0.7;
  // Delay from a prompt change to movement onset.
  double reaction_min_s = 0.2;
  double reaction_max_s = 0.5;
  double snr_db = 20.0;
  // Relative spread of the per-subject gain matrix around class_gains.
  double subject_gain_spread = 0.15;
  // Relative spread of contraction intensity between visits of a class.
  double intensity_spread = 0.1;
  Eigen::MatrixXd class_gains = default_class_gains();
};

inline double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return 1.0 - a.dot(b) / (a.norm() * b.norm());
}

inline void validate(const SynthConfig& cfg) {
  if (cfg.num_subjects < 1) throw UsageError("num_subjects must be >= 1");
  if (cfg.ramp_trials < 1 || cfg.dynamic_trials < 1) throw UsageError("trial counts must be >= 1");
  if (cfg.class_gains.rows() != kNumClasses || cfg.class_gains.cols() != kNumChannels)
    throw UsageError("class_gains must be 7 x 6");
  if ((cfg.class_gains.array() < 0).any()) throw UsageError("class gains must be non-negative");
  if (cfg.class_gains.row(kNoMovement).norm() > 1e-3) throw UsageError("NM gain row must be (near) zero");
  for (int a = 1; a < kNumClasses; ++a)
    for (int b = a + 1; b < kNumClasses; ++b)
      if (cosine_distance(cfg.class_gains.row(a).transpose(), cfg.class_gains.row(b).transpose()) <= 0.1)
        throw UsageError("class gain rows " + class_names()[a] + " and " + class_names()[b] + " are too similar");
  if (!(cfg.transition_min_s > 0) || cfg.transition_max_s < cfg.transition_min_s)
    throw UsageError("invalid transition_duration_range");
  if (cfg.reaction_min_s < 0 || cfg.reaction_max_s < cfg.reaction_min_s) throw UsageError("invalid reaction range");
  if (cfg.reaction_max_s + cfg.transition_max_s >= cfg.prompt_duration_s)
    throw UsageError("reaction + transition must fit inside one prompt");
}

/// Visit order covering every ordered class pair exactly once (Eulerian
/// circuit of the complete digraph, Hierholzer), starting at NM. With an
/// Rng the neighbour order is shuffled, giving a different valid order.
inline std::vector<int> transition_schedule(int num_classes = kNumClasses, Rng* rng = nullptr) {
  if (num_classes < 2) return {kNoMovement};
  std::vector<std::vector<int>> out(static_cast<std::size_t>(num_classes));
  for (int a = 0; a < num_classes; ++a) {
    for (int b = num_classes - 1; b >= 0; --b)
      if (b != a) out[a].push_back(b);
    if (rng) rng->shuffle(out[a]);
  }
  std::vector<int> stack{kNoMovement}, circuit;
  while (!stack.empty()) {
    const int v = stack.back();
    if (!out[v].empty()) {
      stack.push_back(out[v].back());
      out[v].pop_back();
    } else {
      circuit.push_back(v);
      stack.pop_back();
    }
  }
  return {circuit.rbegin(), circuit.rend()};
}

namespace detail {

// Band-limited unit-RMS Gaussian carrier.
inline Eigen::VectorXd carrier(std::int64_t n, Rng rng) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (auto& v : w) v = rng.normal();
  auto y = filtfilt(emg_bandpass(), w);
  Eigen::Map<Eigen::VectorXd> m(y.data(), n);
  const double rms = std::sqrt(m.squaredNorm() / static_cast<double>(n));
  return m / rms;
}

inline void synthesize(RawTrial& trial, const Eigen::MatrixXd& envelope, double snr_db, const Rng& rng) {
  const auto n = envelope.rows();
  const double noise_std = std::pow(10.0, -snr_db / 20.0);
  trial.samples.resize(n, kNumChannels);
  for (int c = 0; c < kNumChannels; ++c) {
    Rng noise = rng.child({2, static_cast<std::uint64_t>(c)});
    const Eigen::VectorXd car = carrier(n, rng.child({1, static_cast<std::uint64_t>(c)}));
    for (Eigen::Index i = 0; i < n; ++i) trial.samples(i, c) = envelope(i, c) * car[i] + noise_std * noise.normal();
  }
}

inline Eigen::MatrixXd subject_gains(const SynthConfig& cfg, Rng rng) {
  Eigen::MatrixXd g = cfg.class_gains;
  for (Eigen::Index r = 1; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c)
      g(r, c) = std::max(0.0, g(r, c) * (1.0 + cfg.subject_gain_spread * rng.normal()));
  return g;
}

inline double raised_cosine(double u) { return 0.5 * (1.0 - std::cos(std::numbers::pi * u)); }

// Piecewise-constant levels joined by raised-cosine cross-fades over each
// [onset, end) interval. transitions[j] moves from level j to level j + 1.
inline Eigen::MatrixXd crossfade_envelope(const std::vector<Eigen::RowVectorXd>& level,
                                          const std::vector<TransitionBounds>& transitions, std::int64_t n) {
  Eigen::MatrixXd env(n, level.front().size());
  std::size_t visit = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    while (visit < transitions.size() && i >= transitions[visit].end_sample) ++visit;
    if (visit < transitions.size() && i >= transitions[visit].onset_sample) {
      const auto& tr = transitions[visit];
      const double u = static_cast<double>(i - tr.onset_sample) / static_cast<double>(tr.end_sample - tr.onset_sample);
      const double w = raised_cosine(u);
      env.row(i) = (1.0 - w) * level[visit] + w * level[visit + 1];
    } else {
      env.row(i) = level[visit];
    }
  }
  return env;
}

}  // namespace detail

inline std::string trial_id(int subject, TrialKind kind, int k) {
  return "subject_" + std::to_string(subject) + (kind == TrialKind::ramp ? "/ramp_" : "/dyn_") + std::to_string(k);
}

/// Ramp trial: NM followed by the six active classes in shuffled order, each
/// prompt a 0 -> 1 linear ramp of that class's gain row.
inline RawTrial generate_ramp_trial(const SynthConfig& cfg, const Eigen::MatrixXd& gains, int subject, int k,
                                    const Rng& rng) {
  const auto seg = static_cast<std::int64_t>(std::llround(cfg.prompt_duration_s * kSampleRate));
  Rng r = rng.child({0});
  std::vector<int> order;
  for (int c = 1; c < kNumClasses; ++c) order.push_back(c);
  r.shuffle(order);
  order.insert(order.begin(), kNoMovement);

  RawTrial t;
  t.id = trial_id(subject, TrialKind::ramp, k);
  t.kind = TrialKind::ramp;
  const auto n = seg * static_cast<std::int64_t>(order.size());
  Eigen::MatrixXd env = Eigen::MatrixXd::Zero(n, kNumChannels);
  for (std::size_t s = 0; s < order.size(); ++s) {
    const auto start = static_cast<std::int64_t>(s) * seg;
    t.prompts.push_back({order[s], start});
    const double intensity = 1.0 + cfg.intensity_spread * (2.0 * r.uniform() - 1.0);
    for (std::int64_t i = 0; i < seg; ++i)
      env.row(start + i) = gains.row(order[s]) * (intensity * static_cast<double>(i) / static_cast<double>(seg));
  }
  detail::synthesize(t, env, cfg.snr_db, rng);
  return t;
}

/// Continuous dynamic trial: 43 prompts following transition_schedule, with
/// raised-cosine cross-fades between successive gain rows.
inline RawTrial generate_dynamic_trial(const SynthConfig& cfg, const Eigen::MatrixXd& gains, int subject, int k,
                                       const Rng& rng) {
  const auto seg = static_cast<std::int64_t>(std::llround(cfg.prompt_duration_s * kSampleRate));
  Rng r = rng.child({0});
  Rng order_rng = rng.child({3});
  const auto visits = transition_schedule(kNumClasses, &order_rng);

  RawTrial t;
  t.id = trial_id(subject, TrialKind::dynamic, k);
  t.kind = TrialKind::dynamic;
  const auto n = seg * static_cast<std::int64_t>(visits.size());
  std::vector<Eigen::RowVectorXd> level;
  for (std::size_t v = 0; v < visits.size(); ++v) {
    t.prompts.push_back({visits[v], static_cast<std::int64_t>(v) * seg});
    const double intensity = visits[v] == kNoMovement ? 1.0 : 1.0 + cfg.intensity_spread * (2.0 * r.uniform() - 1.0);
    level.push_back(gains.row(visits[v]) * intensity);
  }
  for (std::size_t j = 0; j + 1 < visits.size(); ++j) {
    const auto prompt = t.prompts[j + 1].onset_sample;
    const auto onset = prompt + std::llround(r.uniform(cfg.reaction_min_s, cfg.reaction_max_s) * kSampleRate);
    const auto end = onset + std::llround(r.uniform(cfg.transition_min_s, cfg.transition_max_s) * kSampleRate);
    t.movement_onsets.push_back({static_cast<int>(j), onset, end});
  }

  const Eigen::MatrixXd env = detail::crossfade_envelope(level, t.movement_onsets, n);
  detail::synthesize(t, env, cfg.snr_db, rng);
  return t;
}

/// All ramp trials followed by all dynamic trials of one subject. Streams are
/// derived subject -> trial -> channel from cfg.seed.
inline std::vector<RawTrial> generate_subject(const SynthConfig& cfg, int subject) {
  validate(cfg);
  const Rng root(cfg.seed);
  const Rng subj = root.child({static_cast<std::uint64_t>(subject)});
  const Eigen::MatrixXd gains = detail::subject_gains(cfg, subj.child({0xA}));
  std::vector<RawTrial> trials;
  for (int k = 0; k < cfg.ramp_trials; ++k)
    trials.push_back(generate_ramp_trial(cfg, gains, subject, k, subj.child({0xB, static_cast<std::uint64_t>(k)})));
  for (int k = 0; k < cfg.dynamic_trials; ++k)
    trials.push_back(
        generate_dynamic_trial(cfg, gains, subject, k, subj.child({0xC, static_cast<std::uint64_t>(k)})));
  return trials;
}

}  // namespace emgssl
