#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/rng.hpp"

namespace emgssl {

struct AugmentConfig {
  int lag_a = -4;
  int lag_b = 4;
  double scale_mean = 1.0;
  double scale_std = 0.05;
  double noise_mean = 0.0;
  double noise_std = 0.05;
};

inline void validate(const AugmentConfig& c) {
  if (c.lag_b < c.lag_a) throw UsageError("augment: lag_b must be >= lag_a");
  if (c.scale_std < 0 || c.noise_std < 0) throw UsageError("augment: standard deviations must be >= 0");
}

/// T consecutive standardized feature frames taken from one trial.
struct SequenceSample {
  Eigen::MatrixXd x;  // T x F
  std::size_t trial = 0;
  std::int64_t start_frame = 0;

  int length() const { return static_cast<int>(x.rows()); }
};

/// Frames [start, start + T) of `buffer` (frames x F).
inline SequenceSample take_window(const Eigen::MatrixXd& buffer, std::size_t trial, std::int64_t start, int length) {
  if (start < 0 || start + length > buffer.rows()) throw DataError("sequence window outside the trial");
  return {buffer.middleRows(start, length), trial, start};
}

/// Shift the window by phi ~ U{a..b}, clamped so it stays inside the trial.
inline SequenceSample random_lag(const SequenceSample& s, const Eigen::MatrixXd& buffer, const AugmentConfig& cfg,
                                 Rng& rng) {
  const std::int64_t lo = -s.start_frame;
  const std::int64_t hi = buffer.rows() - s.length() - s.start_frame;
  if (hi < lo) throw DataError("trial shorter than the sequence length");
  const std::int64_t phi = std::clamp<std::int64_t>(rng.uniform_int(cfg.lag_a, cfg.lag_b), lo, hi);
  return take_window(buffer, s.trial, s.start_frame + phi, s.length());
}

/// Multiply each feature column by its own alpha_f ~ N(scale_mean, scale_std^2).
inline SequenceSample random_scale(SequenceSample s, const AugmentConfig& cfg, Rng& rng) {
  for (Eigen::Index f = 0; f < s.x.cols(); ++f) s.x.col(f) *= rng.normal(cfg.scale_mean, cfg.scale_std);
  return s;
}

/// Add independent N(noise_mean, noise_std^2) to every element.
inline SequenceSample add_awgn(SequenceSample s, const AugmentConfig& cfg, Rng& rng) {
  for (Eigen::Index f = 0; f < s.x.cols(); ++f)
    for (Eigen::Index t = 0; t < s.x.rows(); ++t) s.x(t, f) += rng.normal(cfg.noise_mean, cfg.noise_std);
  return s;
}

/// lag -> scale -> noise.
inline SequenceSample augment(const SequenceSample& s, const Eigen::MatrixXd& buffer, const AugmentConfig& cfg,
                              Rng& rng) {
  return add_awgn(random_scale(random_lag(s, buffer, cfg, rng), cfg, rng), cfg, rng);
}

/// Two independent draws of the augmentation pipeline on the same sample.
inline std::pair<SequenceSample, SequenceSample> make_views(const SequenceSample& s, const Eigen::MatrixXd& buffer,
                                                            const AugmentConfig& cfg, Rng& rng) {
  auto first = augment(s, buffer, cfg, rng);
  auto second = augment(s, buffer, cfg, rng);
  return {std::move(first), std::move(second)};
}

}  // namespace emgssl
