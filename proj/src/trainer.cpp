#include "refusalguard/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include <zlib.h>

namespace rg {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw Error(ErrorCode::InvalidConfig, "unknown optimizer '" + s + "'");
}

const char* to_string(CheckpointSchedule s) { return s == CheckpointSchedule::uniform ? "uniform" : "staged"; }

CheckpointSchedule schedule_from_string(const std::string& s) {
  if (s == "staged") return CheckpointSchedule::staged;
  if (s == "uniform") return CheckpointSchedule::uniform;
  throw Error(ErrorCode::InvalidConfig, "unknown checkpoint schedule '" + s + "'");
}

void TrainerConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be positive");
  if (steps < 0) bad("steps must be nonnegative");
  if (batch_size < 1) bad("batch_size must be positive");
  if (!(lambda_geom >= 0.0) || !std::isfinite(lambda_geom)) bad("lambda_geom must be nonnegative");
  if (schedule == CheckpointSchedule::uniform && checkpoint_every < 1) bad("checkpoint_every must be positive");
  if (!(max_grad_norm >= 0.0)) bad("max_grad_norm must be nonnegative");
  if (optimizer == OptimizerKind::adam) {
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      bad("adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) bad("adam eps must be positive");
  }
}

std::vector<int> checkpoint_steps(const TrainerConfig& cfg) {
  std::set<int> s{0, cfg.steps};
  if (cfg.schedule == CheckpointSchedule::staged) {
    for (int base : {100, 200, 400, 700})
      s.insert(static_cast<int>(std::lround(double(base) * cfg.steps / 1000.0)));
  } else {
    for (int t = cfg.checkpoint_every; t < cfg.steps; t += cfg.checkpoint_every) s.insert(t);
  }
  return {s.begin(), s.end()};
}

namespace {

struct Writer {
  std::vector<unsigned char> bytes;
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
  }
  template <typename Derived>
  void block(const Eigen::DenseBase<Derived>& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) f64(m(i, j));
  }
  void grads(const Gradients& g) {
    u64(g.size());
    for (const auto& mg : g) {
      block(mg.dR);
      block(mg.dW);
      block(mg.db);
    }
  }
};

bool finite(const Gradients& g) {
  for (const auto& mg : g)
    if (!mg.dR.allFinite() || !mg.dW.allFinite() || !mg.db.allFinite()) return false;
  return true;
}

bool finite(const Modules& ms) {
  for (const auto& m : ms)
    if (!m.finite()) return false;
  return true;
}

void apply_update(Modules& modules, const Gradients& g, OptimizerState& st, const TrainerConfig& cfg) {
  const double lr = cfg.learning_rate;
  if (cfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < modules.size(); ++i) {
      modules[i].R -= lr * g[i].dR;
      modules[i].W -= lr * g[i].dW;
      modules[i].b -= lr * g[i].db;
    }
    return;
  }
  if (st.m.empty()) {
    st.m = zero_gradients(modules);
    st.v = zero_gradients(modules);
  }
  ++st.t;
  const double b1 = cfg.adam.beta1, b2 = cfg.adam.beta2, eps = cfg.adam.eps;
  const double c1 = 1.0 - std::pow(b1, double(st.t));
  const double c2 = 1.0 - std::pow(b2, double(st.t));
  auto step = [&](auto& param, auto& m, auto& v, const auto& grad) {
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < modules.size(); ++i) {
    step(modules[i].R, st.m[i].dR, st.v[i].dR, g[i].dR);
    step(modules[i].W, st.m[i].dW, st.v[i].dW, g[i].dW);
    step(modules[i].b, st.m[i].db, st.v[i].db, g[i].db);
  }
}

Checkpoint snapshot(int step, const Modules& modules, const OptimizerState& st, const ReferenceModel& model,
                    const InterventionPlan& plan, const BasisMap& bases, const Batch& all, const TrainerConfig& cfg) {
  Checkpoint cp;
  cp.step = step;
  cp.modules = modules;
  cp.seed = cfg.seed;
  cp.optimizer = st;
  cp.losses = evaluate_losses(model, modules, plan, all, cfg.lambda_geom, bases);
  seal(cp);
  return cp;
}

TrainResult run(const ReferenceModel& model, const InterventionPlan& plan, const BasisMap& bases,
                const Corpus& corpus, const TrainerConfig& cfg, Modules modules, OptimizerState st, int start,
                bool emit_start) {
  cfg.validate();
  if (corpus.sequences.empty()) throw Error(ErrorCode::InvalidConfig, "training corpus is empty");
  check_plan(model, modules, plan);
  for (const auto& lp : plan.layers)
    if (!bases.count(lp.layer))
      throw Error(ErrorCode::MissingBasis, "no refusal basis for layer " + std::to_string(lp.layer));

  const Batch all = as_batch(corpus.sequences);
  const std::vector<int> schedule = checkpoint_steps(cfg);
  const std::set<int> marks(schedule.begin(), schedule.end());
  const int n = static_cast<int>(corpus.sequences.size());

  TrainResult out;
  Checkpoint last = snapshot(start, modules, st, model, plan, bases, all, cfg);
  if (emit_start && marks.count(start)) out.checkpoints.push_back(last);

  for (int step = start; step < cfg.steps; ++step) {
    Batch batch;
    for (int i : batch_indices(n, cfg.batch_size, cfg.seed, step)) batch.push_back(&corpus.sequences[i]);
    LossAndGrads lg = total_loss_and_grads(model, modules, plan, batch, cfg.lambda_geom, bases);
    auto abort = [&](const std::string& what) {
      Checkpoint good;
      good.step = step;
      good.modules = modules;
      good.seed = cfg.seed;
      good.optimizer = st;
      good.losses = last.losses;
      seal(good);
      throw TrainingAborted(what + " at step " + std::to_string(step), out, good);
    };
    if (!std::isfinite(lg.loss.total)) abort("non-finite loss");
    if (!finite(lg.grads)) abort("non-finite gradient");
    StepLog entry{step, lg.loss, 0.0};
    entry.grad_norm = clip_gradients(lg.grads, cfg.max_grad_norm);
    out.log.push_back(entry);

    Modules before = modules;
    OptimizerState st_before = st;
    apply_update(modules, lg.grads, st, cfg);
    if (!finite(modules)) {
      modules = std::move(before);
      st = std::move(st_before);
      abort("non-finite parameters");
    }
    if (marks.count(step + 1)) {
      last = snapshot(step + 1, modules, st, model, plan, bases, all, cfg);
      if (!std::isfinite(last.losses.total)) abort("non-finite checkpoint loss");
      out.checkpoints.push_back(last);
    }
  }
  return out;
}

}  // namespace

std::vector<unsigned char> checkpoint_payload(const Checkpoint& cp) {
  Writer w;
  w.u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(cp.step)));
  w.u64(cp.seed);
  w.f64(cp.losses.task);
  w.f64(cp.losses.geom);
  w.f64(cp.losses.total);
  w.f64(cp.losses.lambda_geom);
  w.u64(cp.modules.size());
  for (const auto& m : cp.modules) {
    w.u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(m.layer)));
    w.block(m.R);
    w.block(m.W);
    w.block(m.b);
  }
  w.u64(static_cast<std::uint64_t>(cp.optimizer.t));
  w.grads(cp.optimizer.m);
  w.grads(cp.optimizer.v);
  return std::move(w.bytes);
}

std::uint32_t checkpoint_checksum(const Checkpoint& cp) {
  const auto bytes = checkpoint_payload(cp);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

void seal(Checkpoint& cp) { cp.checksum = checkpoint_checksum(cp); }

Modules init_modules(const ReferenceModel& model, const InterventionPlan& plan, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x1417));
  Modules ms;
  for (const auto& lp : plan.layers) {
    if (lp.layer < 1 || lp.layer > model.config.layers)
      throw Error(ErrorCode::LayerOutOfRange, "plan layer " + std::to_string(lp.layer) + " out of range");
    ms.push_back(InterventionModule<double>::identity(lp.layer, model.config.dim, lp.rank, rng));
  }
  return ms;
}

std::vector<int> batch_indices(int corpus_size, int batch_size, std::uint64_t seed, int step) {
  if (corpus_size < 1) throw Error(ErrorCode::InvalidConfig, "empty corpus");
  const int bs = std::min(batch_size, corpus_size);
  const int per_epoch = (corpus_size + bs - 1) / bs;
  const int epoch = step / per_epoch, slot = step % per_epoch;
  std::vector<int> perm(corpus_size);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(seed, 0xBA7C400000000000ull + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(perm);
  const int lo = slot * bs, hi = std::min(lo + bs, corpus_size);
  return {perm.begin() + lo, perm.begin() + hi};
}

double clip_gradients(Gradients& g, double max_norm) {
  const double norm = std::sqrt(squared_norm(g));
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& mg : g) {
      mg.dR *= s;
      mg.dW *= s;
      mg.db *= s;
    }
  }
  return norm;
}

TrainResult train(const ReferenceModel& model, const InterventionPlan& plan, const BasisMap& bases,
                  const Corpus& corpus, const TrainerConfig& cfg) {
  cfg.validate();
  return run(model, plan, bases, corpus, cfg, init_modules(model, plan, cfg.seed), OptimizerState{}, 0, true);
}

TrainResult resume(const ReferenceModel& model, const InterventionPlan& plan, const BasisMap& bases,
                   const Corpus& corpus, const Checkpoint& from, const TrainerConfig& cfg) {
  if (checkpoint_checksum(from) != from.checksum)
    throw Error(ErrorCode::CorruptCheckpoint, "checkpoint checksum does not match its contents");
  if (from.seed != cfg.seed)
    throw Error(ErrorCode::InvalidConfig, "checkpoint seed differs from the trainer seed");
  if (from.step < 0 || from.step > cfg.steps)
    throw Error(ErrorCode::InvalidConfig, "checkpoint step lies outside the configured run");
  if (!finite(from.modules)) throw Error(ErrorCode::CorruptCheckpoint, "checkpoint parameters are not finite");
  return run(model, plan, bases, corpus, cfg, from.modules, from.optimizer, from.step, false);
}

}  // namespace rg
