#include <cmath>

#include <doctest.h>

#include "refusalguard/analysis.hpp"
#include "refusalguard/experiment.hpp"
#include "support.hpp"

using namespace rg;

namespace {

MetricsRecord record(double align, double projmag, double drift, double interference) {
  MetricsRecord r;
  r.align_mean = align;
  r.projmag_mean = projmag;
  r.drift = drift;
  r.interference_mean = interference;
  return r;
}

ConeCoordinates<double> coords(std::initializer_list<double> v) {
  ConeCoordinates<double> z;
  z.values = VectorXd::Map(v.begin(), static_cast<Eigen::Index>(v.size()));
  return z;
}

// Small end-to-end setup with every corpus the analysis needs.
RunConfig small_run() {
  RunConfig cfg;
  cfg.model = rgtest::small_model_config();
  cfg.plan = InterventionPlan{{LayerPlan{2, PositionRule::last_token, 1, 1, 2}}};
  cfg.extraction.k = 2;
  cfg.measure.extraction = cfg.extraction;
  cfg.corpora.probe_size = 48;
  cfg.corpora.utility_size = 16;
  cfg.trainer.steps = 40;
  cfg.trainer.learning_rate = 1e-2;
  cfg.validate();
  return cfg;
}

}  // namespace

TEST_CASE("composite score endpoints and midpoint") {
  const MetricsRecord best = record(0.9, 2.0, 0.0, 0.1);
  const MetricsRecord worst = record(0.3, 1.0, 0.4, 0.9);
  const auto s = mech_score({best, worst});
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == doctest::Approx(0.0));
  const auto three = mech_score({best, worst, record(0.6, 1.5, 0.2, 0.5)});
  CHECK(three[2] == doctest::Approx(0.5));
  // A metric that never moves counts as preserved.
  const auto flat = mech_score({record(0.5, 1.0, 0.0, 0.3), record(0.5, 1.0, 0.0, 0.3)});
  CHECK(flat[0] == doctest::Approx(1.0));
  CHECK(flat[1] == doctest::Approx(1.0));
  CHECK_THROWS_WITH_AS(mech_score({best}), doctest::Contains("DegenerateSeries"), Error);
  CHECK_THROWS_AS(mech_score({}), Error);
}

TEST_CASE("property: composite score is bounded and monotone in each metric") {
  Rng rng(12);
  for (int c = 0; c < 200; ++c) {
    std::vector<MetricsRecord> series;
    const int n = rng.range(3, 8);
    for (int i = 0; i < n; ++i) series.push_back(record(rng.uniform(), 3 * rng.uniform(), rng.uniform(), rng.uniform()));
    const SeriesNormalizer norm = SeriesNormalizer::fit(series);
    const auto scores = mech_score(series);
    for (double v : scores) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    const int j = rng.range(0, n - 1);
    const double before = norm.composite(series[j]);
    MetricsRecord better = series[j];
    switch (rng.range(0, 3)) {
      case 0: better.align_mean += 0.05; break;
      case 1: better.projmag_mean += 0.05; break;
      case 2: better.drift -= 0.05; break;
      default: better.interference_mean -= 0.05; break;
    }
    CHECK(norm.composite(better) >= before - 1e-15);
  }
}

TEST_CASE("cone distortion statistics") {
  const auto uniform = cone_distortion_stats({coords({1, 1, 1, 1}), coords({0.25, 0.25, 0.25, 0.25})});
  CHECK(uniform.count == 2);
  for (double v : uniform.mass_mean) CHECK(v == doctest::Approx(0.25));
  CHECK(uniform.entropy_mean == doctest::Approx(std::log(4.0)));
  CHECK(uniform.top1_mean == doctest::Approx(0.25));

  const auto onehot = cone_distortion_stats({coords({2, 0, 0, 0}), coords({-3, 0, 0, 0})});
  CHECK(onehot.mass_mean[0] == doctest::Approx(1.0));
  CHECK(onehot.mass_mean[1] == doctest::Approx(0.0));
  CHECK(onehot.signed_mean[0] == doctest::Approx(-0.0).epsilon(1e-12));
  CHECK(std::abs(onehot.entropy_mean) < 1e-9);
  CHECK(onehot.top1_mean == doctest::Approx(1.0));

  // Mixed population against a direct recomputation.
  Rng rng(3);
  std::vector<ConeCoordinates<double>> pop;
  for (int i = 0; i < 50; ++i) pop.push_back({rng.gaussian(5), i});
  const auto stats = cone_distortion_stats(pop);
  std::vector<double> mass(5, 0.0);
  double ent = 0.0, top = 0.0;
  for (const auto& z : pop) {
    double total = 0.0;
    for (int j = 0; j < 5; ++j) total += std::abs(z.values(j));
    double best = 0.0;
    for (int j = 0; j < 5; ++j) {
      const double p = std::abs(z.values(j)) / (total + 1e-12);
      mass[j] += p / 50.0;
      if (p > 0) ent -= p * std::log(p) / 50.0;
      best = std::max(best, p);
    }
    top += best / 50.0;
  }
  for (int j = 0; j < 5; ++j) CHECK(stats.mass_mean[j] == doctest::Approx(mass[j]).epsilon(1e-12));
  CHECK(stats.entropy_mean == doctest::Approx(ent).epsilon(1e-12));
  CHECK(stats.top1_mean == doctest::Approx(top).epsilon(1e-12));
  CHECK(cone_distortion_stats({}).count == 0);
}

TEST_CASE("identity checkpoint reproduces base-model metrics") {
  const Experiment e = make_experiment(small_run());
  TrainerConfig tc = e.config.trainer;
  tc.steps = 0;
  const TrainResult r = train(e.model, e.config.plan, e.bases, e.train, tc);
  const auto recs = measure_checkpoint(e.model, r.checkpoints[0], e.bases, e.probes, e.config.plan, e.measure_config());
  REQUIRE(recs.size() == 1);
  const MetricsRecord& m = recs[0];
  CHECK(m.step == 0);
  CHECK(m.layer == 2);
  CHECK(std::abs(m.drift) <= 1e-10);
  CHECK(m.geom_loss == 0.0);

  // Direct base-model alignment at the last prompt token.
  const RefusalBasis<double>& b = e.bases.at(2);
  double sum = 0.0;
  for (const auto& s : e.probes.harmful.sequences) {
    const auto fr = forward(e.model, s.prompt, static_cast<int>(s.prompt.size()));
    sum += alignment(VectorXd(fr.hidden[2].row(s.prompt.size() - 1).transpose()), b).value;
  }
  CHECK(m.align_mean == doctest::Approx(sum / e.probes.harmful.sequences.size()).epsilon(1e-12));
  CHECK(m.interference_mean > 0.0);
  CHECK(m.interference_mean <= 1.0);
}

TEST_CASE("probes inside the subspace have unit alignment") {
  RunConfig cfg = small_run();
  ReferenceModel m = build_model(cfg.model);
  // Freeze the residual stream so layer-2 states equal the embeddings, and put
  // every marker embedding inside the planted subspace.
  for (auto& blk : m.blocks) blk.A2.setZero();
  for (int t = m.tokens.first_marker; t < m.tokens.first_marker + m.tokens.marker_count; ++t)
    m.embedding.row(t) = (m.planted_basis.columns() * VectorXd::LinSpaced(2, 1.0, t + 1.0)).transpose();
  ProbeCorpora probes{generate_corpus(m, CorpusKind::harmful, 20, 1), generate_corpus(m, CorpusKind::harmless, 20, 2)};
  const BasisMap bases{{2, m.planted_basis}};
  Checkpoint cp;
  cp.modules = init_modules(m, cfg.plan, 1);
  MeasureConfig mc = cfg.measure;
  const auto rec = measure_checkpoint(m, cp, bases, probes, cfg.plan, mc).front();
  CHECK(rec.align_mean == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rec.degenerate_count == 0);
}

TEST_CASE("undefended training moves the geometry") {
  RunConfig cfg;
  cfg.trainer.steps = 300;
  const Experiment e = make_experiment(cfg);
  const TrainResult r = train(e.model, cfg.plan, e.bases, e.train, cfg.trainer);
  const auto series = measure_series(e.model, {r.checkpoints.front(), r.checkpoints.back()}, e.bases, e.probes,
                                     cfg.plan, e.measure_config(), e.analysis_layer());
  CHECK(series[1].align_mean < series[0].align_mean);
  CHECK(series[1].drift > series[0].drift);
}

TEST_CASE("single-cell ablation equals a plain run") {
  const Experiment e = make_experiment(small_run());
  const AblationResult a = lambda_ablation(e.ablation_inputs(), {0.0}, e.config.trainer, e.measure_config());
  REQUIRE(a.rows.size() == 1);
  REQUIRE(a.rows[0].ok);
  const TrainResult r = train(e.model, e.config.plan, e.bases, e.train, e.config.trainer);
  const auto fin = measure_series(e.model, {r.checkpoints.back()}, e.bases, e.probes, e.config.plan,
                                  e.measure_config(), 2)
                       .front();
  CHECK(a.rows[0].align == fin.align_mean);
  CHECK(a.rows[0].drift == fin.drift);
  CHECK(a.rows[0].interference == fin.interference_mean);
  CHECK(a.rows[0].projmag == fin.projmag_mean);
  CHECK(a.rows[0].safety_proxy == doctest::Approx(a.base.align_mean - fin.align_mean));
  CHECK(a.rows[0].utility_proxy ==
        task_loss(e.model, r.checkpoints.back().modules, e.config.plan, as_batch(e.utility.sequences)));
  REQUIRE(a.frontier.size() == 1);

  const std::string csv = ablation_csv(a);
  CHECK(csv.rfind("lambda,align,projmag,drift,interference,safety_proxy,utility_proxy,mech_score\n", 0) == 0);
}

TEST_CASE("failed ablation cells are marked, not dropped") {
  const Experiment e = make_experiment(small_run());
  TrainerConfig tc = e.config.trainer;
  tc.learning_rate = 1e300;
  tc.max_grad_norm = 0.0;
  const AblationResult a = lambda_ablation(e.ablation_inputs(), {0.0, 0.5}, tc, e.measure_config());
  REQUIRE(a.rows.size() == 2);
  for (const auto& row : a.rows) {
    CHECK_FALSE(row.ok);
    CHECK(row.error.find("NonFiniteLoss") != std::string::npos);
  }
  CHECK(a.frontier.empty());
  CHECK(ablation_csv(a).find("0.5,nan") != std::string::npos);
  CHECK_THROWS_AS(lambda_ablation(e.ablation_inputs(), {0.5, 0.1}, tc, e.measure_config()), Error);
}

TEST_CASE("metrics table layout") {
  std::vector<MetricsRecord> series{record(0.9, 2, 0, 0.1), record(0.5, 1, 0.3, 0.8)};
  series[1].step = 100;
  const std::string csv = metrics_csv(series);
  CHECK(csv.rfind("step,layer,align,projmag,drift,interference,entropy,top1,task_loss,geom_loss,degenerate_count,"
                  "mech_score\n",
                  0) == 0);
  CHECK(csv.find("\n100,") != std::string::npos);
}
