#include "refusalguard/config.hpp"

#include <functional>
#include <map>

#include <json.hpp>

#include "refusalguard/io.hpp"

namespace rg {

using nlohmann::json;

void CorpusConfig::validate() const {
  if (train_size < 1 || probe_size < 2 || utility_size < 1)
    throw Error(ErrorCode::InvalidConfig, "corpus sizes must be positive (probe_size at least 2)");
}

void RunConfig::validate() const {
  model.validate();
  trainer.validate();
  extraction.validate();
  corpora.validate();
  if (plan.layers.empty()) throw Error(ErrorCode::InvalidConfig, "plan has no layers");
  for (const auto& lp : plan.layers) {
    if (lp.layer < 1 || lp.layer > model.layers)
      throw Error(ErrorCode::LayerOutOfRange, "plan layer " + std::to_string(lp.layer) + " out of range");
    if (lp.rank < 1 || lp.rank > model.dim) throw Error(ErrorCode::InvalidConfig, "plan rank must lie in [1, dim]");
    if (lp.first < 0 || lp.last < 0) throw Error(ErrorCode::InvalidConfig, "plan first/last must be nonnegative");
  }
  if (!(measure.interference_lr > 0.0)) throw Error(ErrorCode::InvalidConfig, "interference_lr must be positive");
  if (lambda_grid.empty()) throw Error(ErrorCode::InvalidConfig, "lambda_grid is empty");
  for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
    if (!(lambda_grid[i] >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambda_grid values must be nonnegative");
    if (i > 0 && lambda_grid[i] < lambda_grid[i - 1])
      throw Error(ErrorCode::InvalidConfig, "lambda_grid must be ascending");
  }
}

namespace {

using Handlers = std::map<std::string, std::function<void(const json&)>>;

// Applies one handler per key; anything without a handler is an error.
void visit(const json& obj, const std::string& where, const Handlers& handlers) {
  if (!obj.is_object()) throw Error(ErrorCode::InvalidConfig, where + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    auto h = handlers.find(it.key());
    if (h == handlers.end()) throw Error(ErrorCode::InvalidConfig, "unknown key '" + it.key() + "' in " + where);
    h->second(it.value());
  }
}

template <typename T>
std::function<void(const json&)> into(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

json model_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},       {"dim", m.dim},
          {"layers", m.layers},               {"hidden", m.hidden},
          {"seed", m.seed},                   {"planted_rank", m.planted_rank},
          {"marker_norm", m.marker_norm},     {"cone_offset", m.cone_offset},
          {"shared_offset", m.shared_offset}, {"comply_scale", m.comply_scale},
          {"readout_scale", m.readout_scale}, {"responsiveness", m.responsiveness},
          {"mixer_in_scale", m.mixer_in_scale},
          {"mixer_out_scale", m.mixer_out_scale}};
}

void read_model(const json& j, ModelConfig& m) {
  visit(j, "model",
        {{"vocab_size", into(m.vocab_size)},
         {"dim", into(m.dim)},
         {"layers", into(m.layers)},
         {"hidden", into(m.hidden)},
         {"seed", into(m.seed)},
         {"planted_rank", into(m.planted_rank)},
         {"marker_norm", into(m.marker_norm)},
         {"cone_offset", into(m.cone_offset)},
         {"shared_offset", into(m.shared_offset)},
         {"comply_scale", into(m.comply_scale)},
         {"readout_scale", into(m.readout_scale)},
         {"responsiveness", into(m.responsiveness)},
         {"mixer_in_scale", into(m.mixer_in_scale)},
         {"mixer_out_scale", into(m.mixer_out_scale)}});
}

void read_plan(const json& j, InterventionPlan& plan) {
  visit(j, "plan", {{"layers", [&](const json& arr) {
                      if (!arr.is_array()) throw Error(ErrorCode::InvalidConfig, "plan.layers must be an array");
                      plan.layers.clear();
                      for (const auto& e : arr) {
                        LayerPlan lp;
                        std::string rule = to_string(lp.rule);
                        visit(e, "plan.layers[]",
                              {{"layer", into(lp.layer)},
                               {"rule", into(rule)},
                               {"first", into(lp.first)},
                               {"last", into(lp.last)},
                               {"rank", into(lp.rank)}});
                        lp.rule = position_rule_from_string(rule);
                        plan.layers.push_back(lp);
                      }
                    }}});
}

void read_trainer(const json& j, TrainerConfig& t) {
  std::string optimizer = to_string(t.optimizer), schedule = to_string(t.schedule);
  visit(j, "trainer",
        {{"learning_rate", into(t.learning_rate)},
         {"steps", into(t.steps)},
         {"batch_size", into(t.batch_size)},
         {"lambda_geom", into(t.lambda_geom)},
         {"checkpoint_every", into(t.checkpoint_every)},
         {"schedule", into(schedule)},
         {"seed", into(t.seed)},
         {"optimizer", into(optimizer)},
         {"max_grad_norm", into(t.max_grad_norm)},
         {"adam", [&](const json& a) {
            visit(a, "trainer.adam",
                  {{"beta1", into(t.adam.beta1)}, {"beta2", into(t.adam.beta2)}, {"eps", into(t.adam.eps)}});
          }}});
  t.optimizer = optimizer_from_string(optimizer);
  t.schedule = schedule_from_string(schedule);
}

void read_extraction(const json& j, ExtractionConfig& e) {
  visit(j, "extraction",
        {{"k", into(e.k)},
         {"center", into(e.center)},
         {"variance_threshold", [&](const json& v) {
            if (v.is_null())
              e.variance_threshold.reset();
            else
              e.variance_threshold = v.get<double>();
          }}});
}

void read_corpora(const json& j, CorpusConfig& c) {
  visit(j, "corpora",
        {{"train_seed", into(c.train_seed)},
         {"train_size", into(c.train_size)},
         {"probe_seed", into(c.probe_seed)},
         {"probe_size", into(c.probe_size)},
         {"utility_seed", into(c.utility_seed)},
         {"utility_size", into(c.utility_size)}});
}

}  // namespace

RunConfig config_from_json(const std::string& text) {
  RunConfig cfg;
  try {
    const json j = json::parse(text);
    int version = -1;
    visit(j, "config",
          {{"schema_version", into(version)},
           {"model", [&](const json& v) { read_model(v, cfg.model); }},
           {"plan", [&](const json& v) { read_plan(v, cfg.plan); }},
           {"trainer", [&](const json& v) { read_trainer(v, cfg.trainer); }},
           {"extraction", [&](const json& v) { read_extraction(v, cfg.extraction); }},
           {"corpora", [&](const json& v) { read_corpora(v, cfg.corpora); }},
           {"analysis", [&](const json& v) {
              visit(v, "analysis",
                    {{"interference_lr", into(cfg.measure.interference_lr)},
                     {"lambda_grid", into(cfg.lambda_grid)}});
            }}});
    if (version != kConfigSchemaVersion)
      throw Error(ErrorCode::InvalidConfig,
                  "schema_version must be " + std::to_string(kConfigSchemaVersion) + " (got " +
                      std::to_string(version) + ")");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed config: ") + e.what());
  }
  cfg.measure.extraction = cfg.extraction;
  cfg.validate();
  return cfg;
}

std::string config_to_json(const RunConfig& cfg) {
  json plan = json::array();
  for (const auto& lp : cfg.plan.layers)
    plan.push_back(
        {{"layer", lp.layer}, {"rule", to_string(lp.rule)}, {"first", lp.first}, {"last", lp.last}, {"rank", lp.rank}});
  const TrainerConfig& t = cfg.trainer;
  json j = {
      {"schema_version", kConfigSchemaVersion},
      {"model", model_json(cfg.model)},
      {"plan", {{"layers", plan}}},
      {"trainer",
       {{"learning_rate", t.learning_rate},
        {"steps", t.steps},
        {"batch_size", t.batch_size},
        {"lambda_geom", t.lambda_geom},
        {"checkpoint_every", t.checkpoint_every},
        {"schedule", to_string(t.schedule)},
        {"seed", t.seed},
        {"optimizer", to_string(t.optimizer)},
        {"max_grad_norm", t.max_grad_norm},
        {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}}}},
      {"extraction",
       {{"k", cfg.extraction.k},
        {"center", cfg.extraction.center},
        {"variance_threshold",
         cfg.extraction.variance_threshold ? json(*cfg.extraction.variance_threshold) : json(nullptr)}}},
      {"corpora",
       {{"train_seed", cfg.corpora.train_seed},
        {"train_size", cfg.corpora.train_size},
        {"probe_seed", cfg.corpora.probe_seed},
        {"probe_size", cfg.corpora.probe_size},
        {"utility_seed", cfg.corpora.utility_seed},
        {"utility_size", cfg.corpora.utility_size}}},
      {"analysis", {{"interference_lr", cfg.measure.interference_lr}, {"lambda_grid", cfg.lambda_grid}}}};
  return j.dump(2) + "\n";
}

RunConfig load_config(const std::string& path) { return config_from_json(read_text(path)); }

}  // namespace rg
