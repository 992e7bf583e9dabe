#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/signal.hpp"

namespace emgssl {

inline constexpr int kFeaturesPerChannel = 4;
inline constexpr int kNumFeatures = kNumChannels * kFeaturesPerChannel;  // 24
inline constexpr double kMflFloor = 1e-12;
inline constexpr double kStdFloor = 1e-8;
inline constexpr double kWampRmsFraction = 0.02;

/// Column layout: channel-major, [lscale, mfl, msr, wamp] per channel.
enum FeatureKind { kLScale = 0, kMfl = 1, kMsr = 2, kWamp = 3 };

inline int feature_column(int channel, FeatureKind kind) { return channel * kFeaturesPerChannel + kind; }

inline std::vector<std::string> feature_names() {
  static const char* suffix[] = {"lscale", "mfl", "msr", "wamp"};
  std::vector<std::string> names;
  for (int c = 0; c < kNumChannels; ++c)
    for (int k = 0; k < kFeaturesPerChannel; ++k) names.push_back("ch" + std::to_string(c + 1) + "_" + suffix[k]);
  return names;
}

/// Sample L-scale (second L-moment) from the order statistics.
inline double l_scale(std::span<const double> x) {
  const auto n = x.size();
  if (n < 2) throw DataError("l_scale needs at least 2 samples");
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  double acc = 0.0;
  const double nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) acc += (2.0 * static_cast<double>(i + 1) - nn - 1.0) * s[i];
  const double pairs = nn * (nn - 1.0) / 2.0;
  return 0.5 * acc / pairs;
}

/// log10 of the root summed squared first difference. Flat windows are
/// floored at kMflFloor inside the root.
inline double max_fractal_length(std::span<const double> x, double floor = kMflFloor) {
  if (x.size() < 2) throw DataError("max_fractal_length needs at least 2 samples");
  double ss = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double d = x[i] - x[i - 1];
    ss += d * d;
  }
  return std::log10(std::sqrt(std::max(ss, floor)));
}

inline double mean_square_root(std::span<const double> x) {
  if (x.empty()) throw DataError("mean_square_root needs at least 1 sample");
  double acc = 0.0;
  for (double v : x) acc += std::sqrt(std::abs(v));
  return acc / static_cast<double>(x.size());
}

inline double willison_amplitude(std::span<const double> x, double threshold) {
  if (threshold < 0) throw UsageError("willison_amplitude threshold must be >= 0");
  double count = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (std::abs(x[i] - x[i - 1]) >= threshold) count += 1.0;
  return count;
}

/// Per-channel WAMP thresholds with the trials they were fit on.
struct WampThresholds {
  Eigen::VectorXd values = Eigen::VectorXd::Zero(kNumChannels);
  std::vector<std::string> fitted_on;
};

/// kWampRmsFraction times the per-channel RMS over all samples of `trials`.
inline WampThresholds fit_wamp_thresholds(const std::vector<const RawTrial*>& trials,
                                          double fraction = kWampRmsFraction) {
  if (trials.empty()) throw DataError("no trials to fit WAMP thresholds");
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(kNumChannels);
  double n = 0;
  WampThresholds t;
  for (const auto* tr : trials) {
    ss += tr->samples.colwise().squaredNorm().transpose();
    n += static_cast<double>(tr->num_samples());
    t.fitted_on.push_back(tr->id);
  }
  t.values = fraction * (ss / n).cwiseSqrt();
  return t;
}

namespace detail {
template <class Col>
std::span<const double> as_span(const Col& c) {
  return {c.data(), static_cast<std::size_t>(c.size())};
}
}  // namespace detail

/// One 24-wide row per frame.
inline Eigen::MatrixXd extract_features(const std::vector<Frame>& frames, const Eigen::VectorXd& wamp_thresholds) {
  if (frames.empty()) throw DataError("no frames to extract features from");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(frames.size()), kNumFeatures);
  for (std::size_t r = 0; r < frames.size(); ++r) {
    const auto w = frames[r].window();
    for (int c = 0; c < kNumChannels; ++c) {
      const auto x = detail::as_span(w.col(c));
      const auto row = static_cast<Eigen::Index>(r);
      out(row, feature_column(c, kLScale)) = l_scale(x);
      out(row, feature_column(c, kMfl)) = max_fractal_length(x);
      out(row, feature_column(c, kMsr)) = mean_square_root(x);
      out(row, feature_column(c, kWamp)) = willison_amplitude(x, wamp_thresholds[c]);
    }
  }
  return out;
}

/// Recompute only the WAMP columns (the other three features do not depend on
/// fitted state).
inline void refresh_wamp(Eigen::MatrixXd& features, const std::vector<Frame>& frames,
                         const Eigen::VectorXd& wamp_thresholds) {
  for (std::size_t r = 0; r < frames.size(); ++r) {
    const auto w = frames[r].window();
    for (int c = 0; c < kNumChannels; ++c)
      features(static_cast<Eigen::Index>(r), feature_column(c, kWamp)) =
          willison_amplitude(detail::as_span(w.col(c)), wamp_thresholds[c]);
  }
}

struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd std;
  std::vector<std::string> fitted_on;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean).array().rowwise() / std.array();
  }
  Eigen::MatrixXd inverse(const Eigen::MatrixXd& z) const {
    return (z.array().rowwise() * std.array()).matrix().rowwise() + mean;
  }
};

/// Population statistics; std is floored at kStdFloor.
inline Standardizer fit_standardizer(const Eigen::MatrixXd& train, std::vector<std::string> fitted_on = {}) {
  if (train.rows() < 2) throw DataError("standardizer needs at least 2 training frames");
  Standardizer s;
  s.mean = train.colwise().mean();
  const Eigen::MatrixXd centred = train.rowwise() - s.mean;
  s.std = (centred.colwise().squaredNorm() / static_cast<double>(train.rows())).cwiseSqrt();
  for (Eigen::Index j = 0; j < s.std.size(); ++j) s.std[j] = std::max(s.std[j], kStdFloor);
  s.fitted_on = std::move(fitted_on);
  return s;
}

}  // namespace emgssl
