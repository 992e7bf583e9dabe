#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "emgssl/experiments.hpp"

namespace fixtures {

// Short prompts keep a subject at ~5k frames per dynamic trial.
inline emgssl::SynthConfig small_synth() {
  emgssl::SynthConfig c;
  c.seed = 7;
  c.prompt_duration_s = 1.5;
  c.reaction_max_s = 0.4;
  return c;
}

inline const emgssl::SubjectData& small_subject() {
  static const emgssl::SubjectData d = emgssl::prepare_subject(0, emgssl::generate_subject(small_synth(), 0));
  return d;
}

inline emgssl::ExperimentConfig tiny_experiment(emgssl::Scheme s) {
  emgssl::ExperimentConfig c;
  c.scheme = s;
  c.seed = 11;
  c.network.lstm_units = 8;
  c.network.hidden_units = 8;
  c.network.embedding = 8;
  c.sequence_length = 4;
  c.train_stride = 16;
  c.train.max_epochs = 2;
  c.train.batch_size = 64;
  c.thresholds = {0.0, 0.5};
  return c;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() /
                 ("emgssl_test_" + name + "_" + std::to_string(std::random_device{}()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
