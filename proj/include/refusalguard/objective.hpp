#pragma once

// Task loss, geometry-preservation penalty and their analytic gradients with
// respect to the intervention parameters.

#include <vector>

#include "refusalguard/model.hpp"

namespace rg {

struct LossBreakdown {
  double task = 0.0;
  double geom = 0.0;
  double total = 0.0;
  double lambda_geom = 0.0;
};

struct ModuleGrad {
  MatrixXd dR;
  MatrixXd dW;
  VectorXd db;
};
using Gradients = std::vector<ModuleGrad>;

Gradients zero_gradients(const Modules& modules);
double squared_norm(const Gradients& g);

using Batch = std::vector<const Sequence*>;
Batch as_batch(const std::vector<Sequence>& seqs);

// Summed cross-entropy over target positions, averaged over the batch.
double task_loss(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                 const Batch& batch);

double geometry_loss(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                     const Batch& batch, const BasisMap& bases);

struct LossAndGrads {
  LossBreakdown loss;
  Gradients grads;
};

// Task-only objective; the geometry path is never touched.
LossAndGrads task_loss_and_grads(const ReferenceModel& model, const Modules& modules,
                                 const InterventionPlan& plan, const Batch& batch);

// task + lambda * geom. With lambda == 0 this is exactly task_loss_and_grads.
LossAndGrads total_loss_and_grads(const ReferenceModel& model, const Modules& modules,
                                  const InterventionPlan& plan, const Batch& batch, double lambda_geom,
                                  const BasisMap& bases);

// Reporting helper: always evaluates both terms, without gradients.
LossBreakdown evaluate_losses(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan,
                              const Batch& batch, double lambda_geom, const BasisMap& bases);

}  // namespace rg
