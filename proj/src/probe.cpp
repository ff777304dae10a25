#include "refusalguard/probe.hpp"

namespace rg {

std::vector<int> probe_positions(const InterventionPlan* plan, int layer, int prompt_len) {
  if (plan) {
    if (const LayerPlan* lp = plan->find(layer)) return InterventionPlan::positions(*lp, prompt_len);
  }
  if (prompt_len < 1) throw Error(ErrorCode::PositionOutOfRange, "empty prompt");
  return {prompt_len - 1};
}

MatrixXd collect_activations(const ReferenceModel& model, const Corpus& corpus, int layer, const Modules* modules,
                             const InterventionPlan* plan) {
  if (layer < 0 || layer > model.layers())
    throw Error(ErrorCode::LayerOutOfRange, "activation layer " + std::to_string(layer) + " out of range");
  std::vector<VectorXd> rows;
  for (const auto& seq : corpus.sequences) {
    const int plen = static_cast<int>(seq.prompt.size());
    ForwardResult fr = forward(model, seq.prompt, plen, modules, plan);
    for (int p : probe_positions(plan, layer, plen)) rows.push_back(fr.hidden[layer].row(p).transpose());
  }
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), model.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return out;
}

RefusalBasis<double> reestimate_at_checkpoint(const ReferenceModel& model, const Modules& modules,
                                              const InterventionPlan& plan, const ProbeCorpora& probes, int layer,
                                              const ExtractionConfig& cfg) {
  check_plan(model, modules, plan);
  const MatrixXd harmful = collect_activations(model, probes.harmful, layer, &modules, &plan);
  const MatrixXd harmless = collect_activations(model, probes.harmless, layer, &modules, &plan);
  return extract_basis<double>(harmful, harmless, cfg, layer);
}

BasisMap extract_reference_bases(const ReferenceModel& model, const InterventionPlan& plan,
                                 const ProbeCorpora& probes, const ExtractionConfig& cfg) {
  BasisMap out;
  for (const auto& lp : plan.layers) {
    const MatrixXd harmful = collect_activations(model, probes.harmful, lp.layer, nullptr, &plan);
    const MatrixXd harmless = collect_activations(model, probes.harmless, lp.layer, nullptr, &plan);
    out.emplace(lp.layer, extract_basis<double>(harmful, harmless, cfg, lp.layer));
  }
  return out;
}

}  // namespace rg
