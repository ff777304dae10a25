#include "refusalguard/experiment.hpp"

namespace rg {

std::uint64_t harmful_probe_seed(const CorpusConfig& c) { return mix_seed(c.probe_seed, 1); }
std::uint64_t harmless_probe_seed(const CorpusConfig& c) { return mix_seed(c.probe_seed, 2); }

MeasureConfig Experiment::measure_config() const {
  MeasureConfig m = config.measure;
  m.extraction = config.extraction;
  return m;
}

AblationInputs Experiment::ablation_inputs() const {
  AblationInputs in;
  in.model = &model;
  in.plan = &config.plan;
  in.bases = &bases;
  in.probes = &probes;
  in.train = &train;
  in.utility = &utility;
  in.layer = analysis_layer();
  return in;
}

Experiment make_experiment(const RunConfig& cfg) {
  cfg.validate();
  Experiment e;
  e.config = cfg;
  e.model = build_model(cfg.model);
  const CorpusConfig& c = cfg.corpora;
  e.train = generate_corpus(e.model, CorpusKind::harmful, c.train_size, c.train_seed);
  e.probes.harmful = generate_corpus(e.model, CorpusKind::harmful, c.probe_size, harmful_probe_seed(c));
  e.probes.harmless = generate_corpus(e.model, CorpusKind::harmless, c.probe_size, harmless_probe_seed(c));
  e.utility = generate_corpus(e.model, CorpusKind::task, c.utility_size, c.utility_seed);
  e.bases = extract_reference_bases(e.model, cfg.plan, e.probes, cfg.extraction);
  return e;
}

}  // namespace rg
