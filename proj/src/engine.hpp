#pragma once

// Forward trace and reverse pass shared by the loss, gradient and probe code.

#include <vector>

#include "refusalguard/model.hpp"
#include "refusalguard/objective.hpp"

namespace rg::detail {

struct EditRecord {
  int module = 0;
  int position = 0;
  VectorXd pre;    // hidden state before the edit
  VectorXd coord;  // W h + b - R h
};

struct Trace {
  int prompt_len = 0;
  std::vector<MatrixXd> hidden;               // post-edit, layers + 1
  std::vector<MatrixXd> mixed;                // per block: h + causal mean
  std::vector<MatrixXd> act;                  // per block: tanh output
  std::vector<std::vector<EditRecord>> edits;  // indexed by layer
  std::vector<LayerDeltas<double>> deltas;
  MatrixXd logits;
};

Trace run_forward(const ReferenceModel& model, const std::vector<int>& tokens, int prompt_len,
                  const Modules* modules, const InterventionPlan* plan, bool keep_cache);

struct BackwardSpec {
  double task_weight = 1.0;
  // lambda / batch; zero skips the geometry path entirely.
  double geom_weight = 0.0;
  const BasisMap* bases = nullptr;
  Gradients* grads = nullptr;
  // Filled for layers >= lowest_hidden when non-null.
  std::vector<MatrixXd>* hidden_grads = nullptr;
  int lowest_hidden = -1;
};

// Returns the unweighted task loss of the sequence.
double run_backward(const ReferenceModel& model, const Modules* modules, const Trace& trace,
                    const std::vector<int>& targets, const BackwardSpec& spec);

double sequence_task_loss(const MatrixXd& logits, int prompt_len, const std::vector<int>& targets);

}  // namespace rg::detail
