#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/signal.hpp"
#include "emgssl/synthgen.hpp"

namespace emgssl {

/// Ground-truth annotation of one frame.
struct Region {
  enum class Kind { steady, transition };
  Kind kind = Kind::steady;
  int cls = kNoMovement;  // steady-state class
  int prev = -1;          // transition source class
  int next = -1;          // transition target class

  static Region steady(int c) { return {Kind::steady, c, -1, -1}; }
  static Region transition(int p, int n) { return {Kind::transition, -1, p, n}; }

  bool is_steady() const { return kind == Kind::steady; }
  bool is_transition() const { return kind == Kind::transition; }
  bool operator==(const Region&) const = default;
};

struct LabeledFrames {
  std::vector<int> labels;
  std::vector<Region> regions;
  std::vector<std::int64_t> frame_starts;
  // Ramp trials only: the NM amplitude threshold that was applied.
  std::optional<double> nm_threshold;

  std::size_t size() const { return labels.size(); }
};

/// Channel-mean MAV of every frame.
inline std::vector<double> frame_amplitudes(const std::vector<Frame>& frames) {
  std::vector<double> a;
  a.reserve(frames.size());
  for (const auto& f : frames) a.push_back(mean_absolute_value(f).mean());
  return a;
}

namespace detail {
inline int prompted_class(const std::vector<Prompt>& prompts, std::int64_t start) {
  int cls = prompts.front().class_id;
  for (const auto& p : prompts) {
    if (p.onset_sample > start) break;
    cls = p.class_id;
  }
  return cls;
}
}  // namespace detail

/// Active-class labels whose amplitude falls below `threshold` become NM.
/// Idempotent.
inline std::vector<int> relabel_below_threshold(std::vector<int> labels, const std::vector<double>& amplitude,
                                                double threshold) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kNoMovement && amplitude[i] < threshold) labels[i] = kNoMovement;
  return labels;
}

/// Ramp labeling: label by prompt, then relabel active frames whose channel-mean
/// MAV is below mu + 3 sigma of the NM-prompted frames.
inline LabeledFrames label_ramp(const std::vector<std::int64_t>& frame_starts, const std::vector<double>& amplitude,
                                const std::vector<Prompt>& prompts) {
  if (prompts.empty()) throw DataError("ramp labeling needs a prompt schedule");
  if (amplitude.size() != frame_starts.size()) throw DataError("amplitude / frame count mismatch");
  LabeledFrames out;
  out.frame_starts = frame_starts;
  out.labels.reserve(frame_starts.size());
  double sum = 0, sumsq = 0;
  std::size_t nm = 0;
  for (std::size_t i = 0; i < frame_starts.size(); ++i) {
    const int cls = detail::prompted_class(prompts, frame_starts[i]);
    out.labels.push_back(cls);
    if (cls == kNoMovement) {
      sum += amplitude[i];
      sumsq += amplitude[i] * amplitude[i];
      ++nm;
    }
  }
  if (nm == 0) throw DataError("ramp trial has no NM-prompted frames");
  const double mu = sum / static_cast<double>(nm);
  const double sigma = std::sqrt(std::max(0.0, sumsq / static_cast<double>(nm) - mu * mu));
  const double tau = mu + 3.0 * sigma;
  out.labels = relabel_below_threshold(std::move(out.labels), amplitude, tau);
  out.nm_threshold = tau;
  for (int l : out.labels) out.regions.push_back(Region::steady(l));
  return out;
}

/// Naive onset-aligned labeling of continuous dynamic data. Transition j
/// (prompts[j] -> prompts[j+1]) switches the label at the first frame whose
/// start is >= its ground-truth onset; frames starting inside [onset, end)
/// are annotated as the transition region.
inline LabeledFrames label_dynamic(const std::vector<std::int64_t>& frame_starts, const std::vector<Prompt>& prompts,
                                   const std::vector<TransitionBounds>& onsets) {
  if (prompts.empty()) throw DataError("dynamic labeling needs a prompt schedule");
  const std::size_t changes = prompts.size() - 1;
  std::vector<const TransitionBounds*> by_index(changes, nullptr);
  for (const auto& t : onsets) {
    if (t.transition_index < 0 || static_cast<std::size_t>(t.transition_index) >= changes)
      throw DataError("transition index " + std::to_string(t.transition_index) + " has no matching prompt change");
    by_index[static_cast<std::size_t>(t.transition_index)] = &t;
  }
  for (std::size_t j = 0; j < changes; ++j)
    if (!by_index[j]) throw DataError("missing movement onset for prompt change " + std::to_string(j));

  LabeledFrames out;
  out.frame_starts = frame_starts;
  std::size_t j = 0;  // transitions whose onset has been passed
  int current = prompts.front().class_id;
  for (auto start : frame_starts) {
    while (j < changes && start >= by_index[j]->onset_sample) {
      current = prompts[j + 1].class_id;
      ++j;
    }
    out.labels.push_back(current);
    if (j > 0 && start < by_index[j - 1]->end_sample)
      out.regions.push_back(Region::transition(prompts[j - 1].class_id, prompts[j].class_id));
    else
      out.regions.push_back(Region::steady(current));
  }
  return out;
}

/// Dispatch on trial kind using the (filtered) trial's own frames.
inline LabeledFrames label_trial(const RawTrial& trial, const std::vector<Frame>& frames) {
  const auto starts = frame_starts(frames);
  if (trial.kind == TrialKind::ramp) return label_ramp(starts, frame_amplitudes(frames), trial.prompts);
  return label_dynamic(starts, trial.prompts, trial.movement_onsets);
}

}  // namespace emgssl
