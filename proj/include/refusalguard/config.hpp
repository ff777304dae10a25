#pragma once

// Versioned JSON run configuration. Every field has a default; unknown keys
// are rejected and the effective document always spells out every field.

#include <cstdint>
#include <string>
#include <vector>

#include "refusalguard/analysis.hpp"

namespace rg {

inline constexpr int kConfigSchemaVersion = 1;

struct CorpusConfig {
  std::uint64_t train_seed = 11;
  int train_size = 10;
  std::uint64_t probe_seed = 23;
  int probe_size = 128;
  std::uint64_t utility_seed = 37;
  int utility_size = 64;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  InterventionPlan plan{{LayerPlan{4, PositionRule::last_token, 1, 1, 4}}};
  TrainerConfig trainer;
  ExtractionConfig extraction;
  CorpusConfig corpora;
  MeasureConfig measure;
  std::vector<double> lambda_grid{0.0, 0.01, 0.05, 0.1, 0.2, 0.5};

  void validate() const;
};

RunConfig config_from_json(const std::string& text);
std::string config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::string& path);

}  // namespace rg
