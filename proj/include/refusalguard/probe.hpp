#pragma once

// Activation collection under the (optionally intervened) forward pass, and
// re-estimation of the refusal basis at a checkpoint.

#include <vector>

#include "refusalguard/extraction.hpp"
#include "refusalguard/model.hpp"

namespace rg {

// Prompt positions read at `layer`: the plan's rule when the layer is
// planned, otherwise the last prompt token.
std::vector<int> probe_positions(const InterventionPlan* plan, int layer, int prompt_len);

// One row per (prompt, position) record of the hidden state after `layer`.
MatrixXd collect_activations(const ReferenceModel& model, const Corpus& corpus, int layer,
                             const Modules* modules = nullptr, const InterventionPlan* plan = nullptr);

struct ProbeCorpora {
  Corpus harmful;
  Corpus harmless;
};

RefusalBasis<double> reestimate_at_checkpoint(const ReferenceModel& model, const Modules& modules,
                                              const InterventionPlan& plan, const ProbeCorpora& probes, int layer,
                                              const ExtractionConfig& cfg);

// Base-model extraction for every planned layer.
BasisMap extract_reference_bases(const ReferenceModel& model, const InterventionPlan& plan,
                                 const ProbeCorpora& probes, const ExtractionConfig& cfg);

}  // namespace rg
