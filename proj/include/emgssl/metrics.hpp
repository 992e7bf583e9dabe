#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/labeling.hpp"

namespace emgssl {

/// Per-frame decisions and confidences aligned with ground-truth regions.
struct DecisionStream {
  std::vector<int> decisions;
  std::vector<double> confidences;
  std::vector<Region> truth;

  std::size_t size() const { return decisions.size(); }
};

inline void validate(const DecisionStream& s) {
  if (s.confidences.size() != s.decisions.size() || s.truth.size() != s.decisions.size())
    throw DataError("decision stream fields differ in length");
  for (double c : s.confidences)
    if (!(c >= 0.0 && c <= 1.0)) throw DataError("confidence outside [0, 1]");
}

inline const std::array<std::string, 7>& metric_names() {
  static const std::array<std::string, 7> names{"ss_aer", "ss_ter", "ss_ins", "toff", "ttd", "ins", "tce"};
  return names;
}

struct MetricsReport {
  double ss_aer = 0, ss_ter = 0, ss_ins = 0;  // percent
  double toff = 0, ttd = 0, ins = 0, tce = 0;  // frames, averaged per transition
  std::size_t steady_frames = 0;
  std::size_t steady_regions = 0;
  std::size_t transitions = 0;
  std::size_t flagged_transitions = 0;  // TOFF/TTD capped at the next onset

  std::array<double, 7> values() const { return {ss_aer, ss_ter, ss_ins, toff, ttd, ins, tce}; }
};

/// Drop maximal NM runs bounded on both sides by the same class.
inline std::vector<int> remove_nm_blips(const std::vector<int>& d) {
  std::vector<int> out;
  out.reserve(d.size());
  std::size_t i = 0;
  while (i < d.size()) {
    if (d[i] != kNoMovement) {
      out.push_back(d[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < d.size() && d[j] == kNoMovement) ++j;
    const bool blip = i > 0 && j < d.size() && d[i - 1] == d[j];
    if (!blip) out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(i), d.begin() + static_cast<std::ptrdiff_t>(j));
    i = j;
  }
  return out;
}

inline std::size_t count_changes(const std::vector<int>& d) {
  std::size_t n = 0;
  for (std::size_t k = 1; k < d.size(); ++k) n += d[k] != d[k - 1];
  return n;
}

namespace detail {

struct Run {
  std::size_t begin, end;  // [begin, end)
  Region region;
};

inline std::vector<Run> region_runs(const std::vector<Region>& truth) {
  std::vector<Run> runs;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (!runs.empty() && runs.back().region == truth[k] && runs.back().end == k)
      runs.back().end = k + 1;
    else
      runs.push_back({k, k + 1, truth[k]});
  }
  return runs;
}

inline std::vector<int> slice(const std::vector<int>& d, std::size_t b, std::size_t e) {
  return {d.begin() + static_cast<std::ptrdiff_t>(b), d.begin() + static_cast<std::ptrdiff_t>(e)};
}

}  // namespace detail

/// Decisions whose confidence is below `threshold` become NM.
inline DecisionStream apply_rejection(DecisionStream s, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw UsageError("rejection threshold must lie in [0, 1]");
  for (std::size_t k = 0; k < s.size(); ++k)
    if (s.confidences[k] < threshold) s.decisions[k] = kNoMovement;
  return s;
}

/// Fills ss_aer, ss_ter, ss_ins and the steady-state counts of `r`.
inline void steady_state_metrics(const DecisionStream& s, MetricsReport& r) {
  std::size_t total = 0, wrong = 0, active = 0, active_wrong = 0, changes = 0, regions = 0;
  for (const auto& run : detail::region_runs(s.truth)) {
    if (!run.region.is_steady()) continue;
    ++regions;
    const int truth = run.region.cls;
    for (std::size_t k = run.begin; k < run.end; ++k) {
      const int d = s.decisions[k];
      ++total;
      wrong += d != truth;
      if (d != kNoMovement) {
        ++active;
        active_wrong += d != truth;
      }
    }
    changes += count_changes(remove_nm_blips(detail::slice(s.decisions, run.begin, run.end)));
  }
  if (total == 0) throw DataError("decision stream has no steady-state frames");
  r.steady_frames = total;
  r.steady_regions = regions;
  r.ss_ter = 100.0 * static_cast<double>(wrong) / static_cast<double>(total);
  r.ss_aer = active == 0 ? 0.0 : 100.0 * static_cast<double>(active_wrong) / static_cast<double>(active);
  const std::size_t pairs = total - regions;
  r.ss_ins = pairs == 0 ? 0.0 : 100.0 * static_cast<double>(changes) / static_cast<double>(pairs);
}

/// Fills toff, ttd, ins, tce and the transition counts of `r`.
///
/// For a transition whose first annotated frame is `onset`, the search window
/// runs up to (excluding) the next transition's first frame or the end of the
/// stream. TOFF counts frames from onset to the first decision that differs
/// from the previous class; TTD counts from that departure to the first
/// decision equal to the new class, both ends inclusive. A missing departure
/// or arrival caps the value at the window end and flags the transition.
inline void transition_metrics(const DecisionStream& s, MetricsReport& r) {
  std::vector<detail::Run> trans;
  for (const auto& run : detail::region_runs(s.truth))
    if (run.region.is_transition()) trans.push_back(run);
  if (trans.empty()) throw DataError("decision stream has no annotated transitions");

  double toff = 0, ttd = 0, ins = 0, tce = 0;
  std::size_t flagged = 0;
  for (std::size_t t = 0; t < trans.size(); ++t) {
    const auto& run = trans[t];
    const int prev = run.region.prev, next = run.region.next;
    const std::size_t onset = run.begin;
    const std::size_t limit = t + 1 < trans.size() ? trans[t + 1].begin : s.size();

    std::size_t depart = onset;
    while (depart < limit && s.decisions[depart] == prev) ++depart;
    if (depart == limit) {
      toff += static_cast<double>(limit - onset);
      ttd += static_cast<double>(limit - onset);
      ++flagged;
    } else {
      toff += static_cast<double>(depart - onset);
      std::size_t arrive = depart;
      while (arrive < limit && s.decisions[arrive] != next) ++arrive;
      if (arrive == limit) {
        ttd += static_cast<double>(limit - depart);
        ++flagged;
      } else {
        ttd += static_cast<double>(arrive - depart + 1);
      }
    }

    const auto region = detail::slice(s.decisions, run.begin, run.end);
    ins += static_cast<double>(count_changes(remove_nm_blips(region)));
    for (int d : region) tce += (d != prev && d != next && d != kNoMovement);
  }
  const double n = static_cast<double>(trans.size());
  r.toff = toff / n;
  r.ttd = ttd / n;
  r.ins = ins / n;
  r.tce = tce / n;
  r.transitions = trans.size();
  r.flagged_transitions = flagged;
}

inline MetricsReport evaluate_stream(const DecisionStream& s) {
  validate(s);
  MetricsReport r;
  steady_state_metrics(s, r);
  transition_metrics(s, r);
  return r;
}

struct SweepRow {
  double threshold;
  MetricsReport report;
};

inline std::vector<SweepRow> rejection_sweep(const DecisionStream& s, const std::vector<double>& thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw UsageError("thresholds must be sorted");
  std::vector<SweepRow> rows;
  for (double t : thresholds) rows.push_back({t, evaluate_stream(apply_rejection(s, t))});
  return rows;
}

/// Arg-max decisions (ties to the lowest class id) from a frames x classes
/// posterior matrix.
inline DecisionStream classify_stream(const Eigen::MatrixXd& posteriors, const std::vector<Region>& truth) {
  if (static_cast<std::size_t>(posteriors.rows()) != truth.size())
    throw DataError("posterior rows do not match the number of frames");
  DecisionStream s;
  s.truth = truth;
  s.decisions.reserve(truth.size());
  s.confidences.reserve(truth.size());
  for (Eigen::Index k = 0; k < posteriors.rows(); ++k) {
    Eigen::Index best;
    const double conf = posteriors.row(k).maxCoeff(&best);
    s.decisions.push_back(static_cast<int>(best));
    s.confidences.push_back(std::clamp(conf, 0.0, 1.0));
  }
  return s;
}

}  // namespace emgssl
