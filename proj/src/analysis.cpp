#include "refusalguard/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace rg {

std::vector<MetricsRecord> measure_checkpoint(const ReferenceModel& model, const Checkpoint& checkpoint,
                                              const BasisMap& bases, const ProbeCorpora& probes,
                                              const InterventionPlan& plan, const MeasureConfig& cfg) {
  if (probes.harmful.sequences.empty()) throw Error(ErrorCode::InvalidConfig, "no harmful probes");
  const Modules& modules = checkpoint.modules;
  check_plan(model, modules, plan);

  std::vector<MetricsRecord> out;
  for (const auto& [layer, basis] : bases) {
    MetricsRecord rec;
    rec.step = checkpoint.step;
    rec.layer = layer;
    rec.task_loss = checkpoint.losses.task;
    rec.geom_loss = checkpoint.losses.geom;

    std::vector<ConeCoordinates<double>> coords;
    double align_sum = 0.0, mag_sum = 0.0, interf_sum = 0.0;
    int align_n = 0, interf_n = 0;
    for (std::size_t i = 0; i < probes.harmful.sequences.size(); ++i) {
      const Sequence& seq = probes.harmful.sequences[i];
      const int plen = static_cast<int>(seq.prompt.size());
      const std::vector<int> positions = probe_positions(&plan, layer, plen);
      ForwardResult fr = forward(model, seq.prompt, plen, &modules, &plan);
      for (int p : positions) {
        const VectorXd h = fr.hidden[layer].row(p).transpose();
        const Measured<double> a = alignment(h, basis);
        if (a.degenerate) {
          ++rec.degenerate_count;
          continue;
        }
        align_sum += a.value;
        ++align_n;
        auto z = project_coords(h, basis, static_cast<int>(i));
        mag_sum += projected_magnitude(z);
        coords.push_back(std::move(z));
      }
      const MatrixXd g = hidden_grad(model, seq, &modules, &plan, layer, positions);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const VectorXd step = -cfg.interference_lr * g.row(r).transpose();
        const Measured<double> m = interference(step, basis);
        if (m.degenerate) {
          ++rec.degenerate_count;
          continue;
        }
        interf_sum += m.value;
        ++interf_n;
      }
    }
    if (align_n > 0) {
      rec.align_mean = align_sum / align_n;
      rec.projmag_mean = mag_sum / align_n;
      const ConeDistortion cd = cone_distortion_stats(coords, cfg.epsilon);
      rec.entropy_mean = cd.entropy_mean;
      rec.top1_mean = cd.top1_mean;
      rec.coord_mass_mean = cd.mass_mean;
      rec.coord_signed_mean = cd.signed_mean;
    }
    if (interf_n > 0) rec.interference_mean = interf_sum / interf_n;

    ExtractionConfig ecfg = cfg.extraction;
    if (!ecfg.variance_threshold) ecfg.k = static_cast<int>(basis.dim_k());
    const RefusalBasis<double> bt = reestimate_at_checkpoint(model, modules, plan, probes, layer, ecfg);
    rec.drift = bt.dim_k() == basis.dim_k() ? drift(basis, bt) : 1.0;
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<MetricsRecord> measure_series(const ReferenceModel& model, const std::vector<Checkpoint>& checkpoints,
                                          const BasisMap& bases, const ProbeCorpora& probes,
                                          const InterventionPlan& plan, const MeasureConfig& cfg, int layer) {
  auto it = bases.find(layer);
  if (it == bases.end()) throw Error(ErrorCode::MissingBasis, "no refusal basis for layer " + std::to_string(layer));
  BasisMap one{{layer, it->second}};
  std::vector<MetricsRecord> out;
  for (const auto& cp : checkpoints) out.push_back(measure_checkpoint(model, cp, one, probes, plan, cfg).front());
  return out;
}

double metric_value(const MetricsRecord& r, Metric m) {
  switch (m) {
    case Metric::align: return r.align_mean;
    case Metric::projmag: return r.projmag_mean;
    case Metric::drift: return r.drift;
    case Metric::interference: return r.interference_mean;
  }
  return 0.0;
}

namespace {
constexpr Metric kScoreMetrics[4] = {Metric::align, Metric::projmag, Metric::drift, Metric::interference};
}

SeriesNormalizer SeriesNormalizer::fit(const std::vector<MetricsRecord>& series) {
  if (series.empty()) throw Error(ErrorCode::DegenerateSeries, "cannot normalize an empty series");
  SeriesNormalizer n;
  for (int i = 0; i < 4; ++i) {
    n.min[i] = n.max[i] = metric_value(series.front(), kScoreMetrics[i]);
    for (const auto& r : series) {
      const double v = metric_value(r, kScoreMetrics[i]);
      n.min[i] = std::min(n.min[i], v);
      n.max[i] = std::max(n.max[i], v);
    }
  }
  return n;
}

double SeriesNormalizer::score(Metric m, double value) const {
  const int i = static_cast<int>(m);
  const double range = max[i] - min[i];
  if (!(range > 0.0)) return 1.0;
  const double x = std::clamp((value - min[i]) / range, 0.0, 1.0);
  return (m == Metric::drift || m == Metric::interference) ? 1.0 - x : x;
}

double SeriesNormalizer::composite(const MetricsRecord& r) const {
  double s = 0.0;
  for (Metric m : kScoreMetrics) s += score(m, metric_value(r, m));
  return s / 4.0;
}

std::vector<double> mech_score(const std::vector<MetricsRecord>& series) {
  if (series.size() < 2) throw Error(ErrorCode::DegenerateSeries, "score normalization needs at least two records");
  const SeriesNormalizer n = SeriesNormalizer::fit(series);
  std::vector<double> out;
  out.reserve(series.size());
  for (const auto& r : series) out.push_back(n.composite(r));
  return out;
}

ConeDistortion cone_distortion_stats(const std::vector<ConeCoordinates<double>>& coords, double epsilon) {
  ConeDistortion cd;
  if (coords.empty()) return cd;
  const Eigen::Index k = coords.front().values.size();
  VectorXd mass = VectorXd::Zero(k), sgn = VectorXd::Zero(k);
  for (const auto& z : coords) {
    require_dim(z.values.size(), k, "cone coordinate width");
    mass += coordinate_mass(z, epsilon);
    sgn += z.values / (z.values.cwiseAbs().sum() + epsilon);
    cd.entropy_mean += coordinate_entropy(z, epsilon);
    cd.top1_mean += top1_mass(z, epsilon);
  }
  const double n = double(coords.size());
  cd.count = static_cast<int>(coords.size());
  cd.entropy_mean /= n;
  cd.top1_mean /= n;
  cd.mass_mean.assign(mass.data(), mass.data() + k);
  cd.signed_mean.assign(sgn.data(), sgn.data() + k);
  for (auto& v : cd.mass_mean) v /= n;
  for (auto& v : cd.signed_mean) v /= n;
  return cd;
}

AblationResult lambda_ablation(const AblationInputs& in, const std::vector<double>& grid, const TrainerConfig& cfg,
                               const MeasureConfig& mcfg) {
  if (!in.model || !in.plan || !in.bases || !in.probes || !in.train || !in.utility)
    throw Error(ErrorCode::InvalidConfig, "ablation inputs are incomplete");
  if (grid.empty()) throw Error(ErrorCode::InvalidConfig, "lambda grid is empty");
  if (!std::is_sorted(grid.begin(), grid.end())) throw Error(ErrorCode::InvalidConfig, "lambda grid must be ascending");
  if (in.utility->sequences.empty()) throw Error(ErrorCode::InvalidConfig, "utility corpus is empty");

  const Batch utility = as_batch(in.utility->sequences);
  AblationResult result;
  bool have_base = false;
  std::vector<MetricsRecord> finals;
  for (double lambda : grid) {
    AblationRow row;
    row.lambda = lambda;
    try {
      TrainerConfig tc = cfg;
      tc.lambda_geom = lambda;
      const TrainResult tr = train(*in.model, *in.plan, *in.bases, *in.train, tc);
      if (!have_base) {
        result.base = measure_series(*in.model, {tr.checkpoints.front()}, *in.bases, *in.probes, *in.plan, mcfg,
                                     in.layer).front();
        have_base = true;
      }
      const MetricsRecord fin =
          measure_series(*in.model, {tr.checkpoints.back()}, *in.bases, *in.probes, *in.plan, mcfg, in.layer).front();
      row.align = fin.align_mean;
      row.projmag = fin.projmag_mean;
      row.drift = fin.drift;
      row.interference = fin.interference_mean;
      row.entropy = fin.entropy_mean;
      row.top1 = fin.top1_mean;
      row.safety_proxy = result.base.align_mean - fin.align_mean;
      row.utility_proxy = task_loss(*in.model, tr.checkpoints.back().modules, *in.plan, utility);
      finals.push_back(fin);
    } catch (const Error& e) {
      row.ok = false;
      row.error = e.what();
    }
    result.rows.push_back(row);
  }

  if (have_base) {
    std::vector<MetricsRecord> series{result.base};
    series.insert(series.end(), finals.begin(), finals.end());
    const SeriesNormalizer n = SeriesNormalizer::fit(series);
    std::size_t f = 0;
    for (auto& row : result.rows) {
      if (!row.ok) continue;
      row.mech_score = n.composite(finals[f++]);
      result.frontier.emplace_back(row.safety_proxy, row.utility_proxy);
    }
  }
  return result;
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}
}  // namespace

std::string ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "lambda,align,projmag,drift,interference,safety_proxy,utility_proxy,mech_score\n";
  for (const auto& row : r.rows) {
    if (!row.ok) {
      os << fmt(row.lambda) << ",nan,nan,nan,nan,nan,nan,nan\n";
      continue;
    }
    os << fmt(row.lambda) << ',' << fmt(row.align) << ',' << fmt(row.projmag) << ',' << fmt(row.drift) << ','
       << fmt(row.interference) << ',' << fmt(row.safety_proxy) << ',' << fmt(row.utility_proxy) << ','
       << fmt(row.mech_score) << '\n';
  }
  return os.str();
}

std::string metrics_csv(const std::vector<MetricsRecord>& series) {
  std::vector<double> scores;
  if (series.size() >= 2) scores = mech_score(series);
  std::ostringstream os;
  os << "step,layer,align,projmag,drift,interference,entropy,top1,task_loss,geom_loss,degenerate_count,mech_score\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& r = series[i];
    os << r.step << ',' << r.layer << ',' << fmt(r.align_mean) << ',' << fmt(r.projmag_mean) << ','
       << fmt(r.drift) << ',' << fmt(r.interference_mean) << ',' << fmt(r.entropy_mean) << ','
       << fmt(r.top1_mean) << ',' << fmt(r.task_loss) << ',' << fmt(r.geom_loss) << ',' << r.degenerate_count
       << ',' << (scores.empty() ? std::string("1") : fmt(scores[i])) << '\n';
  }
  return os.str();
}

}  // namespace rg
