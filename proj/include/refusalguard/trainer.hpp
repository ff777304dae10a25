#pragma once

// Optimization loop over intervention parameters with a frozen model,
// deterministic minibatching and checksummed checkpoints.

#include <cstdint>
#include <string>
#include <vector>

#include "refusalguard/objective.hpp"

namespace rg {

enum class OptimizerKind { sgd, adam };
enum class CheckpointSchedule { staged, uniform };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& s);
const char* to_string(CheckpointSchedule s);
CheckpointSchedule schedule_from_string(const std::string& s);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainerConfig {
  double learning_rate = 1.5e-3;
  int steps = 1000;
  int batch_size = 10;
  double lambda_geom = 0.0;
  int checkpoint_every = 100;
  // staged: {0, 100, 200, 400, 700, 1000} scaled to `steps`; uniform: every
  // `checkpoint_every` steps.
  CheckpointSchedule schedule = CheckpointSchedule::staged;
  std::uint64_t seed = 7;
  OptimizerKind optimizer = OptimizerKind::sgd;
  AdamConfig adam;
  // Global gradient-norm clip; 0 disables.
  double max_grad_norm = 0.5;

  void validate() const;
};

std::vector<int> checkpoint_steps(const TrainerConfig& cfg);

struct OptimizerState {
  std::int64_t t = 0;
  Gradients m;
  Gradients v;
};

struct Checkpoint {
  int step = 0;
  Modules modules;
  LossBreakdown losses;
  std::uint64_t seed = 0;
  OptimizerState optimizer;
  std::uint32_t checksum = 0;
};

// Canonical little-endian float64 encoding of everything except the checksum.
std::vector<unsigned char> checkpoint_payload(const Checkpoint& cp);
std::uint32_t checkpoint_checksum(const Checkpoint& cp);
void seal(Checkpoint& cp);

struct StepLog {
  int step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<StepLog> log;
};

// Raised on a non-finite loss, gradient or parameter; carries everything
// produced before the failure plus the last finite state.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, TrainResult partial, Checkpoint last_good)
      : Error(ErrorCode::NonFiniteLoss, what), partial_(std::move(partial)), last_good_(std::move(last_good)) {}
  const TrainResult& partial() const { return partial_; }
  const Checkpoint& last_good() const { return last_good_; }

 private:
  TrainResult partial_;
  Checkpoint last_good_;
};

Modules init_modules(const ReferenceModel& model, const InterventionPlan& plan, std::uint64_t seed);

// Indices of the corpus sequences used at `step`.
std::vector<int> batch_indices(int corpus_size, int batch_size, std::uint64_t seed, int step);

TrainResult train(const ReferenceModel& model, const InterventionPlan& plan, const BasisMap& bases,
                  const Corpus& corpus, const TrainerConfig& cfg);

// Continue from a checkpoint up to cfg.steps; checkpoints after the start step
// are returned.
TrainResult resume(const ReferenceModel& model, const InterventionPlan& plan, const BasisMap& bases,
                   const Corpus& corpus, const Checkpoint& from, const TrainerConfig& cfg);

// Scale gradients in place to the clip norm; returns the pre-clip norm.
double clip_gradients(Gradients& g, double max_norm);

}  // namespace rg
