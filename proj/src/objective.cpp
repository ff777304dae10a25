#include "refusalguard/objective.hpp"

#include "engine.hpp"

namespace rg {

Gradients zero_gradients(const Modules& modules) {
  Gradients g;
  g.reserve(modules.size());
  for (const auto& m : modules)
    g.push_back({MatrixXd::Zero(m.R.rows(), m.R.cols()), MatrixXd::Zero(m.W.rows(), m.W.cols()),
                 VectorXd::Zero(m.b.size())});
  return g;
}

double squared_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& mg : g) s += mg.dR.squaredNorm() + mg.dW.squaredNorm() + mg.db.squaredNorm();
  return s;
}

Batch as_batch(const std::vector<Sequence>& seqs) {
  Batch b;
  b.reserve(seqs.size());
  for (const auto& s : seqs) b.push_back(&s);
  return b;
}

namespace {

void require_batch(const Batch& batch) {
  if (batch.empty()) throw Error(ErrorCode::InvalidConfig, "empty batch");
}

LossAndGrads loss_and_grads(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                            const Batch& batch, double lambda_geom, const BasisMap* bases) {
  require_batch(batch);
  check_plan(model, modules, plan);
  const double inv = 1.0 / double(batch.size());
  LossAndGrads out;
  out.grads = zero_gradients(modules);
  detail::BackwardSpec spec;
  spec.task_weight = inv;
  spec.grads = &out.grads;
  const bool with_geom = lambda_geom != 0.0;
  if (with_geom) {
    spec.geom_weight = lambda_geom * inv;
    spec.bases = bases;
  }
  double task = 0.0, geom = 0.0;
  for (const Sequence* seq : batch) {
    detail::Trace tr = detail::run_forward(model, model_input(*seq), static_cast<int>(seq->prompt.size()),
                                           &modules, &plan, true);
    task += detail::run_backward(model, &modules, tr, seq->target, spec);
    if (with_geom) geom += geometry_loss_single(tr.deltas, *bases);
  }
  out.loss.lambda_geom = lambda_geom;
  out.loss.task = task * inv;
  if (with_geom) {
    out.loss.geom = geom * inv;
    out.loss.total = out.loss.task + lambda_geom * out.loss.geom;
  } else {
    out.loss.total = out.loss.task;
  }
  return out;
}

}  // namespace

double task_loss(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                 const Batch& batch) {
  require_batch(batch);
  check_plan(model, modules, plan);
  double total = 0.0;
  for (const Sequence* seq : batch) {
    detail::Trace tr = detail::run_forward(model, model_input(*seq), static_cast<int>(seq->prompt.size()),
                                           &modules, &plan, false);
    total += detail::sequence_task_loss(tr.logits, tr.prompt_len, seq->target);
  }
  return total / double(batch.size());
}

double geometry_loss(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                     const Batch& batch, const BasisMap& bases) {
  require_batch(batch);
  check_plan(model, modules, plan);
  double total = 0.0;
  for (const Sequence* seq : batch) {
    detail::Trace tr = detail::run_forward(model, model_input(*seq), static_cast<int>(seq->prompt.size()),
                                           &modules, &plan, false);
    total += geometry_loss_single(tr.deltas, bases);
  }
  return total / double(batch.size());
}

LossAndGrads task_loss_and_grads(const ReferenceModel& model, const Modules& modules,
                                 const InterventionPlan& plan, const Batch& batch) {
  return loss_and_grads(model, modules, plan, batch, 0.0, nullptr);
}

LossAndGrads total_loss_and_grads(const ReferenceModel& model, const Modules& modules,
                                  const InterventionPlan& plan, const Batch& batch, double lambda_geom,
                                  const BasisMap& bases) {
  if (!(lambda_geom >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambda_geom must be nonnegative");
  return loss_and_grads(model, modules, plan, batch, lambda_geom, &bases);
}

LossBreakdown evaluate_losses(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                              const Batch& batch, double lambda_geom, const BasisMap& bases) {
  require_batch(batch);
  check_plan(model, modules, plan);
  double task = 0.0, geom = 0.0;
  for (const Sequence* seq : batch) {
    detail::Trace tr = detail::run_forward(model, model_input(*seq), static_cast<int>(seq->prompt.size()),
                                           &modules, &plan, false);
    task += detail::sequence_task_loss(tr.logits, tr.prompt_len, seq->target);
    geom += geometry_loss_single(tr.deltas, bases);
  }
  LossBreakdown lb;
  lb.lambda_geom = lambda_geom;
  lb.task = task / double(batch.size());
  lb.geom = geom / double(batch.size());
  lb.total = lambda_geom == 0.0 ? lb.task : lb.task + lambda_geom * lb.geom;
  return lb;
}

}  // namespace rg
