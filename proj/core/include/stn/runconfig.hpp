#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stn/network.hpp"
#include "stn/synth.hpp"
#include "stn/tracking.hpp"

namespace stn {

// Flat key=value experiment configuration. Unknown keys are rejected;
// serialize() echoes every key with its resolved value.
struct RunConfig {
  SceneConfig scene;
  ModelConfig model;
  FlowCosts track;
  int train_steps_stage1 = 400;
  int train_steps_stage2 = 200;
  std::uint64_t train_seed = 1;
  int scenes_train = 8;
  int scenes_test = 2;
  double eval_track_match_dist = 25.0;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::string serialize() const;
  static std::vector<std::string> known_keys();

  static RunConfig from_file(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace stn
