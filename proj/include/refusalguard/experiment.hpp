#pragma once

// Everything a run derives deterministically from its configuration: the
// frozen model, the corpora and the base-model refusal bases.

#include "refusalguard/config.hpp"

namespace rg {

struct Experiment {
  RunConfig config;
  ReferenceModel model;
  Corpus train;
  ProbeCorpora probes;
  Corpus utility;
  BasisMap bases;

  // Layer the summary metrics are reported at: the first planned layer.
  int analysis_layer() const { return config.plan.layers.front().layer; }
  MeasureConfig measure_config() const;
  AblationInputs ablation_inputs() const;
};

Experiment make_experiment(const RunConfig& cfg);

// Probe corpus seeds derived from the configured probe seed.
std::uint64_t harmful_probe_seed(const CorpusConfig& c);
std::uint64_t harmless_probe_seed(const CorpusConfig& c);

}  // namespace rg
