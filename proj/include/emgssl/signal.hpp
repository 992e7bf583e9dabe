#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"

namespace emgssl {

inline constexpr int kNumChannels = 6;
inline constexpr double kSampleRate = 2000.0;
inline constexpr std::int64_t kFrameLength = 324;    // 162 ms at 2 kHz
inline constexpr std::int64_t kFrameIncrement = 27;  // 13.5 ms at 2 kHz

enum class TrialKind { ramp, dynamic };

inline std::string to_string(TrialKind k) { return k == TrialKind::ramp ? "ramp" : "dynamic"; }

inline TrialKind trial_kind_from_string(const std::string& s) {
  if (s == "ramp") return TrialKind::ramp;
  if (s == "dynamic") return TrialKind::dynamic;
  throw DataError("unknown trial_kind '" + s + "'");
}

struct Prompt {
  int class_id = 0;
  std::int64_t onset_sample = 0;
};

/// Ground-truth bounds of one class-to-class transition, [onset, end).
struct TransitionBounds {
  int transition_index = 0;
  std::int64_t onset_sample = 0;
  std::int64_t end_sample = 0;
};

struct RawTrial {
  std::string id;
  Eigen::MatrixXd samples;  // num_samples x num_channels, one column per channel
  double sample_rate = kSampleRate;
  std::vector<Prompt> prompts;
  std::vector<TransitionBounds> movement_onsets;
  TrialKind kind = TrialKind::dynamic;

  std::int64_t num_samples() const { return samples.rows(); }
};

/// Throws DataError if the trial violates the recording invariants.
inline void validate(const RawTrial& trial) {
  const std::string where = trial.id.empty() ? "trial" : "trial '" + trial.id + "'";
  if (trial.samples.cols() != kNumChannels)
    throw DataError(where + ": expected 6 channels, got " + std::to_string(trial.samples.cols()));
  if (trial.sample_rate != kSampleRate)
    throw DataError(where + ": sample_rate must be 2000 Hz");
  const auto n = trial.num_samples();
  for (std::size_t i = 0; i < trial.prompts.size(); ++i) {
    const auto& p = trial.prompts[i];
    if (p.onset_sample < 0 || p.onset_sample >= n) throw DataError(where + ": prompt onset outside trial");
    if (i > 0 && p.onset_sample <= trial.prompts[i - 1].onset_sample)
      throw DataError(where + ": prompt onsets must be strictly increasing");
  }
  for (const auto& t : trial.movement_onsets) {
    if (t.onset_sample < 0 || t.end_sample > n) throw DataError(where + ": transition bounds outside trial");
    if (t.end_sample <= t.onset_sample) throw DataError(where + ": transition end must follow onset");
  }
  if (trial.kind == TrialKind::ramp && !trial.movement_onsets.empty())
    throw DataError(where + ": ramp trials carry no transition annotations");
}

// ---------------------------------------------------------------------------
// Butterworth band-pass design
// ---------------------------------------------------------------------------

/// Second-order section in transposed direct form II, a0 normalised to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

  double dc_gain() const { return (b0 + b1 + b2) / (1.0 + a1 + a2); }

  std::complex<double> response(double omega) const {
    const std::complex<double> z1 = std::polar(1.0, -omega);
    const std::complex<double> z2 = z1 * z1;
    return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
  }
};

struct SosFilter {
  std::vector<Biquad> sections;

  /// Complex frequency response at `freq_hz`.
  std::complex<double> response(double freq_hz, double fs) const {
    const double omega = 2.0 * std::numbers::pi * freq_hz / fs;
    std::complex<double> h = 1.0;
    for (const auto& s : sections) h *= s.response(omega);
    return h;
  }

  /// Edge padding length used by the zero-phase filter.
  std::int64_t pad_length() const { return 3 * (2 * static_cast<std::int64_t>(sections.size()) + 1); }
};

/// Digital Butterworth band-pass of prototype order `order` (2*order poles),
/// designed by bilinear transform with pre-warped band edges.
inline SosFilter butter_bandpass(int order, double low_hz, double high_hz, double fs) {
  if (order < 1 || !(low_hz > 0) || !(high_hz > low_hz) || !(high_hz < fs / 2))
    throw UsageError("invalid band-pass specification");
  using cd = std::complex<double>;
  const double fs2 = 2.0 * fs;
  const double w1 = fs2 * std::tan(std::numbers::pi * low_hz / fs);
  const double w2 = fs2 * std::tan(std::numbers::pi * high_hz / fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  std::vector<cd> digital_upper;
  for (int k = 0; k < order; ++k) {
    const cd p = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    // s^2 - p*bw*s + w0^2 = 0
    const cd disc = std::sqrt(p * p * bw * bw - 4.0 * w0sq);
    for (const cd s : {(p * bw + disc) / 2.0, (p * bw - disc) / 2.0}) {
      const cd z = (fs2 + s) / (fs2 - s);
      if (z.imag() > 0) digital_upper.push_back(z);
    }
  }
  if (static_cast<int>(digital_upper.size()) != order)
    throw NumericError("band-pass design produced unpaired poles");
  std::sort(digital_upper.begin(), digital_upper.end(),
            [](const cd& a, const cd& b) { return std::abs(a) < std::abs(b); });

  SosFilter f;
  for (const auto& z : digital_upper) f.sections.push_back({1.0, 0.0, -1.0, -2.0 * z.real(), std::norm(z)});

  // Unit gain at the mapped centre frequency.
  const double centre_hz = fs / std::numbers::pi * std::atan(std::sqrt(w0sq) / fs2);
  const double g = std::abs(f.response(centre_hz, fs));
  f.sections.front().b0 /= g;
  f.sections.front().b1 /= g;
  f.sections.front().b2 /= g;
  return f;
}

/// The 20-450 Hz, 4th-order band-pass applied to every channel.
inline const SosFilter& emg_bandpass() {
  static const SosFilter f = butter_bandpass(4, 20.0, 450.0, kSampleRate);
  return f;
}

namespace detail {

// Steady-state section states for a unit step, scaled by the DC gain of the
// preceding sections.
inline std::vector<std::array<double, 2>> sos_initial_state(const SosFilter& f) {
  std::vector<std::array<double, 2>> zi(f.sections.size());
  double scale = 1.0;
  for (std::size_t i = 0; i < f.sections.size(); ++i) {
    const auto& s = f.sections[i];
    const double g = s.dc_gain();
    const double z2 = s.b2 - s.a2 * g;
    const double z1 = s.b1 - s.a1 * g + z2;
    zi[i] = {scale * z1, scale * z2};
    scale *= g;
  }
  return zi;
}

inline void sos_run(const SosFilter& f, std::vector<double>& x, const std::vector<std::array<double, 2>>& zi,
                    double x0) {
  for (std::size_t k = 0; k < f.sections.size(); ++k) {
    const auto& s = f.sections[k];
    double z1 = zi[k][0] * x0, z2 = zi[k][1] * x0;
    for (double& v : x) {
      const double in = v;
      const double y = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * y + z2;
      z2 = s.b2 * in - s.a2 * y;
      v = y;
    }
  }
}

}  // namespace detail

/// Forward-backward filtering with odd-reflection padding and steady-state
/// initial conditions. Output has the input's length and zero net phase.
inline std::vector<double> filtfilt(const SosFilter& f, std::span<const double> x) {
  const auto n = static_cast<std::int64_t>(x.size());
  const auto pad = f.pad_length();
  if (n <= pad) throw DataError("insufficient samples for zero-phase filtering");

  std::vector<double> ext;
  ext.reserve(static_cast<std::size_t>(n + 2 * pad));
  for (std::int64_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::int64_t i = n - 2; i >= n - 1 - pad; --i) ext.push_back(2.0 * x[n - 1] - x[i]);

  const auto zi = detail::sos_initial_state(f);
  detail::sos_run(f, ext, zi, ext.front());
  std::reverse(ext.begin(), ext.end());
  detail::sos_run(f, ext, zi, ext.front());
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + pad, ext.begin() + pad + n};
}

/// Band-pass every channel of a trial; metadata is carried over unchanged.
inline RawTrial bandpass_filter(const RawTrial& trial) {
  RawTrial out = trial;
  const auto& f = emg_bandpass();
  for (Eigen::Index c = 0; c < trial.samples.cols(); ++c) {
    const auto col = trial.samples.col(c);
    const auto y = filtfilt(f, std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
    out.samples.col(c) = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Framing
// ---------------------------------------------------------------------------

/// A view onto kFrameLength consecutive rows of a trial. The trial must
/// outlive the frame.
struct Frame {
  const Eigen::MatrixXd* source = nullptr;
  std::int64_t start_sample = 0;

  auto window() const { return source->middleRows(start_sample, kFrameLength); }
};

inline std::int64_t frame_count(std::int64_t num_samples) {
  if (num_samples < kFrameLength) return 0;
  return (num_samples - kFrameLength) / kFrameIncrement + 1;
}

inline std::vector<Frame> frame_trial(const RawTrial& trial) {
  const auto count = frame_count(trial.num_samples());
  if (count == 0)
    throw DataError("trial shorter than one frame (" + std::to_string(trial.num_samples()) + " < " +
                    std::to_string(kFrameLength) + " samples)");
  std::vector<Frame> frames;
  frames.reserve(static_cast<std::size_t>(count));
  for (std::int64_t k = 0; k < count; ++k) frames.push_back({&trial.samples, k * kFrameIncrement});
  return frames;
}

inline std::vector<std::int64_t> frame_starts(const std::vector<Frame>& frames) {
  std::vector<std::int64_t> s;
  s.reserve(frames.size());
  for (const auto& f : frames) s.push_back(f.start_sample);
  return s;
}

/// Per-channel mean absolute value of a window.
template <class Derived>
Eigen::VectorXd mean_absolute_value(const Eigen::MatrixBase<Derived>& window) {
  return window.cwiseAbs().colwise().mean().transpose();
}

inline Eigen::VectorXd mean_absolute_value(const Frame& frame) { return mean_absolute_value(frame.window()); }

}  // namespace emgssl
