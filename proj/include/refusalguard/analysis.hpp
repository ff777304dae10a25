#pragma once

// Checkpoint measurement against the base refusal geometry, the composite
// preservation score, cone-coordinate statistics and the lambda sweep.

#include <optional>
#include <string>
#include <vector>

#include "refusalguard/probe.hpp"
#include "refusalguard/trainer.hpp"

namespace rg {

struct MetricsRecord {
  int step = 0;
  int layer = 0;
  double align_mean = 0.0;
  double projmag_mean = 0.0;
  double drift = 0.0;
  double interference_mean = 0.0;
  double entropy_mean = 0.0;
  double top1_mean = 0.0;
  double task_loss = 0.0;
  double geom_loss = 0.0;
  int degenerate_count = 0;
  // Per-coordinate means of |z| / sum|z| and of z / sum|z|.
  std::vector<double> coord_mass_mean;
  std::vector<double> coord_signed_mean;
};

struct MeasureConfig {
  ExtractionConfig extraction;
  // Step size of the first-order update -eta * grad used for interference.
  double interference_lr = 1.5e-3;
  double epsilon = 1e-12;
};

// One record per layer of `bases`, in ascending layer order.
std::vector<MetricsRecord> measure_checkpoint(const ReferenceModel& model, const Checkpoint& checkpoint,
                                              const BasisMap& bases, const ProbeCorpora& probes,
                                              const InterventionPlan& plan, const MeasureConfig& cfg);

// Records for one layer across a checkpoint sequence.
std::vector<MetricsRecord> measure_series(const ReferenceModel& model, const std::vector<Checkpoint>& checkpoints,
                                          const BasisMap& bases, const ProbeCorpora& probes,
                                          const InterventionPlan& plan, const MeasureConfig& cfg, int layer);

enum class Metric { align, projmag, drift, interference };

// Min/max of the four score metrics over a series.
struct SeriesNormalizer {
  double min[4] = {0, 0, 0, 0};
  double max[4] = {0, 0, 0, 0};

  static SeriesNormalizer fit(const std::vector<MetricsRecord>& series);
  // Clamped to [0, 1]; drift and interference are inverted so that 1 is
  // always best. A zero-range metric maps to 1.
  double score(Metric m, double value) const;
  double composite(const MetricsRecord& r) const;
};

double metric_value(const MetricsRecord& r, Metric m);

std::vector<double> mech_score(const std::vector<MetricsRecord>& series);

struct ConeDistortion {
  std::vector<double> mass_mean;    // mean of |z_j| / sum|z|
  std::vector<double> signed_mean;  // mean of z_j / sum|z|
  double entropy_mean = 0.0;
  double top1_mean = 0.0;
  int count = 0;
};

ConeDistortion cone_distortion_stats(const std::vector<ConeCoordinates<double>>& coords, double epsilon = 1e-12);

struct AblationRow {
  double lambda = 0.0;
  double align = 0.0;
  double projmag = 0.0;
  double drift = 0.0;
  double interference = 0.0;
  // Align at step 0 minus final Align.
  double safety_proxy = 0.0;
  // Task loss on a held-out benign task corpus under the trained edit.
  double utility_proxy = 0.0;
  double mech_score = 0.0;
  double entropy = 0.0;
  double top1 = 0.0;
  bool ok = true;
  std::string error;
};

struct AblationResult {
  MetricsRecord base;
  std::vector<AblationRow> rows;
  std::vector<std::pair<double, double>> frontier;  // (safety_proxy, utility_proxy) per successful row
};

struct AblationInputs {
  const ReferenceModel* model = nullptr;
  const InterventionPlan* plan = nullptr;
  const BasisMap* bases = nullptr;
  const ProbeCorpora* probes = nullptr;
  const Corpus* train = nullptr;
  const Corpus* utility = nullptr;
  int layer = 0;
};

AblationResult lambda_ablation(const AblationInputs& in, const std::vector<double>& grid, const TrainerConfig& cfg,
                               const MeasureConfig& mcfg);

std::string ablation_csv(const AblationResult& r);
std::string metrics_csv(const std::vector<MetricsRecord>& series);

}  // namespace rg
