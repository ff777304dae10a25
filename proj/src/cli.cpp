#include "refusalguard/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "refusalguard/experiment.hpp"
#include "refusalguard/io.hpp"
#include "refusalguard/report.hpp"

namespace rg {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::string out;

  // Shared subcommand inputs.
  std::string data_dir;
  std::string bases_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<int> steps;
  std::optional<double> lr;

  std::vector<int> layers;
  std::string checkpoint;
  std::string harmful, harmless;
  std::optional<int> layer;
  std::optional<int> k;
  std::string checkpoints_dir;
  std::vector<double> grid;
  std::vector<std::string> metric_files;
  std::string ablation_file;
};

fs::path output_dir(const Options& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  return "rg_out";
}

RunConfig base_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  cfg.measure.extraction = cfg.extraction;
  if (o.lambda) cfg.trainer.lambda_geom = *o.lambda;
  if (o.steps) cfg.trainer.steps = *o.steps;
  if (o.lr) cfg.trainer.learning_rate = *o.lr;
  if (o.k) {
    cfg.extraction.k = *o.k;
    cfg.extraction.variance_threshold.reset();
    cfg.measure.extraction = cfg.extraction;
  }
  if (!o.grid.empty()) cfg.lambda_grid = o.grid;
  cfg.validate();
  return cfg;
}

void write_effective(const fs::path& out, const std::string& command, const RunConfig& cfg) {
  write_text(out / (command + ".effective.json"), config_to_json(cfg));
}

// Corpora from a gen-data directory when given, else generated from the
// configuration; bases from an extract-cone directory when given.
Experiment load_experiment(const RunConfig& cfg, const Options& o) {
  if (o.data_dir.empty() && o.bases_dir.empty()) return make_experiment(cfg);
  Experiment e;
  e.config = cfg;
  e.model = build_model(cfg.model);
  if (o.data_dir.empty()) {
    const Experiment generated = make_experiment(cfg);
    e.train = generated.train;
    e.probes = generated.probes;
    e.utility = generated.utility;
  } else {
    const fs::path d = o.data_dir;
    e.train = read_corpus(d / "train.json");
    e.probes.harmful = read_corpus(d / "probe_harmful.json");
    e.probes.harmless = read_corpus(d / "probe_harmless.json");
    e.utility = read_corpus(d / "utility.json");
  }
  if (o.bases_dir.empty()) {
    e.bases = extract_reference_bases(e.model, cfg.plan, e.probes, cfg.extraction);
  } else {
    for (const auto& lp : cfg.plan.layers) {
      const fs::path p = fs::path(o.bases_dir) / ("cone_L" + std::to_string(lp.layer) + ".rgbs");
      e.bases.emplace(lp.layer, read_basis(p, lp.layer).basis);
    }
  }
  return e;
}

std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%05d.rgck", step);
  return buf;
}

std::vector<Checkpoint> read_checkpoint_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, "no checkpoint directory " + dir.string());
  std::vector<Checkpoint> cps;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".rgck") cps.push_back(read_checkpoint(entry.path()));
  if (cps.empty()) throw Error(ErrorCode::IoError, "no checkpoints in " + dir.string());
  std::sort(cps.begin(), cps.end(), [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
  return cps;
}

std::string log_csv(const std::vector<StepLog>& log) {
  std::ostringstream os;
  os.precision(10);
  os << "step,task,geom,total,grad_norm\n";
  for (const auto& s : log)
    os << s.step << ',' << s.loss.task << ',' << s.loss.geom << ',' << s.loss.total << ',' << s.grad_norm << '\n';
  return os.str();
}

int gen_data(const Options& o, std::ostream& out) {
  RunConfig cfg = base_config(o);
  if (o.seed) {
    cfg.corpora.train_seed = *o.seed;
    cfg.corpora.probe_seed = *o.seed + 1;
    cfg.corpora.utility_seed = *o.seed + 2;
  }
  const fs::path dir = output_dir(o);
  const ReferenceModel model = build_model(cfg.model);
  const CorpusConfig& c = cfg.corpora;
  const fs::path data = dir / "corpora";
  write_corpus(data / "train.json", generate_corpus(model, CorpusKind::harmful, c.train_size, c.train_seed));
  write_corpus(data / "probe_harmful.json",
               generate_corpus(model, CorpusKind::harmful, c.probe_size, harmful_probe_seed(c)));
  write_corpus(data / "probe_harmless.json",
               generate_corpus(model, CorpusKind::harmless, c.probe_size, harmless_probe_seed(c)));
  write_corpus(data / "utility.json", generate_corpus(model, CorpusKind::task, c.utility_size, c.utility_seed));
  write_effective(dir, "gen-data", cfg);
  out << "corpora written to " << data.string() << "\n";
  return 0;
}

int dump_activations(const Options& o, std::ostream& out) {
  const RunConfig cfg = base_config(o);
  const fs::path dir = output_dir(o);
  const Experiment e = load_experiment(cfg, o);
  std::optional<Checkpoint> cp;
  if (!o.checkpoint.empty()) cp = read_checkpoint(o.checkpoint);
  std::vector<int> layers = o.layers;
  if (layers.empty())
    for (const auto& lp : cfg.plan.layers) layers.push_back(lp.layer);
  const Modules* mods = cp ? &cp->modules : nullptr;
  for (int layer : layers) {
    const std::string tag = "_L" + std::to_string(layer) + ".rgac";
    write_activations(dir / "activations" / ("harmful" + tag),
                      collect_activations(e.model, e.probes.harmful, layer, mods, &cfg.plan));
    write_activations(dir / "activations" / ("harmless" + tag),
                      collect_activations(e.model, e.probes.harmless, layer, mods, &cfg.plan));
  }
  write_effective(dir, "dump-activations", cfg);
  out << "activations for " << layers.size() << " layer(s) written to " << (dir / "activations").string() << "\n";
  return 0;
}

int extract_cone(const Options& o, std::ostream& out) {
  const RunConfig cfg = base_config(o);
  const fs::path dir = output_dir(o);
  const int layer = o.layer ? *o.layer : cfg.plan.layers.front().layer;
  const MatrixXd harmful = read_activations(o.harmful);
  const MatrixXd harmless = read_activations(o.harmless);
  const RefusalBasis<double> basis = extract_basis<double>(harmful, harmless, cfg.extraction, layer);
  const fs::path path = dir / ("cone_L" + std::to_string(layer) + ".rgbs");
  write_basis(path, basis);
  write_effective(dir, "extract-cone", cfg);
  out << "k=" << basis.dim_k() << " basis written to " << path.string() << "\n";
  return 0;
}

int train_cmd(const Options& o, std::ostream& out) {
  RunConfig cfg = base_config(o);
  if (o.seed) cfg.trainer.seed = *o.seed;
  const fs::path dir = output_dir(o);
  const Experiment e = load_experiment(cfg, o);
  write_effective(dir, "train", cfg);
  const fs::path cdir = dir / "checkpoints";
  fs::create_directories(cdir);
  std::vector<fs::path> stale;
  for (const auto& entry : fs::directory_iterator(cdir))
    if (entry.path().extension() == ".rgck") stale.push_back(entry.path());
  for (const auto& p : stale) fs::remove(p);
  try {
    const TrainResult tr = train(e.model, cfg.plan, e.bases, e.train, cfg.trainer);
    for (const auto& cp : tr.checkpoints) write_checkpoint(cdir / step_name(cp.step), cp);
    write_text(dir / "train_log.csv", log_csv(tr.log));
    out << tr.checkpoints.size() << " checkpoints written to " << cdir.string() << "; final task loss "
        << tr.checkpoints.back().losses.task << "\n";
  } catch (const TrainingAborted& a) {
    for (const auto& cp : a.partial().checkpoints) write_checkpoint(cdir / step_name(cp.step), cp);
    write_checkpoint(cdir / ("last_good_" + step_name(a.last_good().step)), a.last_good());
    write_text(dir / "train_log.csv", log_csv(a.partial().log));
    throw;
  }
  return 0;
}

int metrics_cmd(const Options& o, std::ostream& out) {
  const RunConfig cfg = base_config(o);
  const fs::path dir = output_dir(o);
  const Experiment e = load_experiment(cfg, o);
  const fs::path cdir = o.checkpoints_dir.empty() ? dir / "checkpoints" : fs::path(o.checkpoints_dir);
  const std::vector<Checkpoint> cps = read_checkpoint_dir(cdir);
  const MeasureConfig mc = e.measure_config();
  for (const auto& [layer, basis] : e.bases) {
    const auto series = measure_series(e.model, cps, e.bases, e.probes, cfg.plan, mc, layer);
    const fs::path path = dir / ("metrics_L" + std::to_string(layer) + ".csv");
    write_text(path, metrics_csv(series));
    out << "metrics for " << series.size() << " checkpoints written to " << path.string() << "\n";
  }
  write_effective(dir, "metrics", cfg);
  return 0;
}

int ablate_cmd(const Options& o, std::ostream& out) {
  RunConfig cfg = base_config(o);
  if (o.seed) cfg.trainer.seed = *o.seed;
  const fs::path dir = output_dir(o);
  const Experiment e = load_experiment(cfg, o);
  write_effective(dir, "ablate", cfg);
  const AblationResult r = lambda_ablation(e.ablation_inputs(), cfg.lambda_grid, cfg.trainer, e.measure_config());
  write_text(dir / "ablation.csv", ablation_csv(r));
  write_text(dir / "ablation.json", ablation_json(r));
  const auto failed = std::count_if(r.rows.begin(), r.rows.end(), [](const AblationRow& row) { return !row.ok; });
  out << r.rows.size() << " lambda cells (" << failed << " failed) written to " << (dir / "ablation.csv").string()
      << "\n";
  return failed == 0 ? 0 : 2;
}

int report_cmd(const Options& o, std::ostream& out) {
  const RunConfig cfg = base_config(o);
  const fs::path dir = output_dir(o);
  std::vector<fs::path> metrics(o.metric_files.begin(), o.metric_files.end());
  if (metrics.empty() && fs::is_directory(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("metrics", 0) == 0 && entry.path().extension() == ".csv") metrics.push_back(entry.path());
    }
    std::sort(metrics.begin(), metrics.end());
  }
  fs::path ablation = o.ablation_file;
  if (ablation.empty() && fs::exists(dir / "ablation.csv")) ablation = dir / "ablation.csv";
  if (metrics.empty() && ablation.empty())
    throw Error(ErrorCode::IoError, "nothing to report: no metrics CSVs or ablation CSV found");
  const auto files = render_report(metrics, ablation, dir / "report");
  write_effective(dir, "report", cfg);
  out << files.size() << " report files written to " << (dir / "report").string() << "\n";
  return 0;
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::LayerOutOfRange:
    case ErrorCode::PositionOutOfRange:
      return 1;
    default:
      return 2;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Geometry-preserving representation fine-tuning on a planted reference model", "rgctl"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", o.config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, std::string("Output directory (default: $") + kOutputEnv + ", then ./rg_out)");

  auto data_opts = [&](CLI::App* sub) {
    sub->add_option("--data", o.data_dir, "Corpus directory written by gen-data")->check(CLI::ExistingDirectory);
    sub->add_option("--bases", o.bases_dir, "Directory of cone_L<layer>.rgbs files written by extract-cone")
        ->check(CLI::ExistingDirectory);
  };
  auto train_opts = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Trainer seed");
    sub->add_option("--steps", o.steps, "Optimizer steps");
    sub->add_option("--lr", o.lr, "Learning rate");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "Write the training, probe and utility corpora");
  gen->add_option("--seed", o.seed, "Corpus seed");

  CLI::App* dump = app.add_subcommand("dump-activations", "Write probe activations per layer (RGAC)");
  data_opts(dump);
  dump->add_option("--layers", o.layers, "Layers to dump (default: planned layers)")->delimiter(',');
  dump->add_option("--checkpoint", o.checkpoint, "Apply this checkpoint's interventions")
      ->check(CLI::ExistingFile);
  dump->add_option("--seed", o.seed, "Unused; accepted for uniformity");

  CLI::App* extract = app.add_subcommand("extract-cone", "Estimate a refusal basis from two dumps (RGBS)");
  extract->add_option("--harmful", o.harmful, "Harmful activation dump")->required()->check(CLI::ExistingFile);
  extract->add_option("--harmless", o.harmless, "Harmless activation dump")->required()->check(CLI::ExistingFile);
  extract->add_option("--layer", o.layer, "Layer recorded in the output name (default: first planned layer)");
  extract->add_option("--k", o.k, "Basis dimension");

  CLI::App* tr = app.add_subcommand("train", "Train the intervention and write checkpoints");
  data_opts(tr);
  train_opts(tr);
  tr->add_option("--lambda", o.lambda, "Geometry loss weight");

  CLI::App* met = app.add_subcommand("metrics", "Measure a checkpoint directory against the base bases");
  data_opts(met);
  met->add_option("--checkpoints", o.checkpoints_dir, "Checkpoint directory (default: <out>/checkpoints)");

  CLI::App* abl = app.add_subcommand("ablate", "Run the lambda grid");
  data_opts(abl);
  train_opts(abl);
  abl->add_option("--grid", o.grid, "Ascending lambda values")->delimiter(',');

  CLI::App* rep = app.add_subcommand("report", "Render CSV results to SVG plots and summary.json");
  rep->add_option("--metrics", o.metric_files, "Metric CSVs (default: <out>/metrics*.csv)");
  rep->add_option("--ablation", o.ablation_file, "Ablation CSV (default: <out>/ablation.csv)");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return gen_data(o, out);
    if (dump->parsed()) return dump_activations(o, out);
    if (extract->parsed()) return extract_cone(o, out);
    if (tr->parsed()) return train_cmd(o, out);
    if (met->parsed()) return metrics_cmd(o, out);
    if (abl->parsed()) return ablate_cmd(o, out);
    if (rep->parsed()) return report_cmd(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "error: IoError: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace rg
