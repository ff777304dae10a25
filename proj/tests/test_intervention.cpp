#include <cmath>
#include <functional>

#include <doctest.h>

#include "refusalguard/objective.hpp"
#include "refusalguard/probe.hpp"
#include "refusalguard/trainer.hpp"
#include "support.hpp"

using namespace rg;

namespace {

// Model with no blocks whose logits are the readout of the embedding.
ReferenceModel readout_only(const MatrixXd& embedding, const MatrixXd& unembedding) {
  ReferenceModel m;
  m.embedding = embedding;
  m.unembedding = unembedding;
  m.tokens.vocab = static_cast<int>(embedding.rows());
  return m;
}

struct GradFixture {
  ReferenceModel model = build_model(rgtest::small_model_config());
  InterventionPlan plan{{LayerPlan{1, PositionRule::all, 1, 1, 2}, LayerPlan{2, PositionRule::last_token, 1, 1, 2}}};
  Corpus corpus;
  BasisMap bases;
  Modules modules;

  GradFixture() {
    corpus = generate_corpus(model, CorpusKind::harmful, 4, 5);
    const Corpus extra = generate_corpus(model, CorpusKind::task, 3, 6);
    corpus.sequences.insert(corpus.sequences.end(), extra.sequences.begin(), extra.sequences.end());
    ProbeCorpora pc{generate_corpus(model, CorpusKind::harmful, 30, 1),
                    generate_corpus(model, CorpusKind::harmless, 30, 2)};
    ExtractionConfig ec;
    ec.k = 2;
    bases = extract_reference_bases(model, plan, pc, ec);
    // Move away from the identity so every gradient path is active.
    modules = init_modules(model, plan, 9);
    Rng rng(4);
    for (auto& m : modules) {
      m.W += 0.3 * rng.gaussian(m.W.rows(), m.W.cols());
      m.b = 0.3 * rng.gaussian(m.b.size());
      m.R += 0.1 * rng.gaussian(m.R.rows(), m.R.cols());
    }
  }
};

double rel_err(double fd, double an) { return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7}); }

// Worst relative error of every parameter gradient against central differences.
double worst_param_error(const GradFixture& f, double lambda) {
  const Batch batch = as_batch(f.corpus.sequences);
  const LossAndGrads lg = total_loss_and_grads(f.model, f.modules, f.plan, batch, lambda, f.bases);
  auto loss = [&](const Modules& m) { return evaluate_losses(f.model, m, f.plan, batch, lambda, f.bases).total; };
  const double h = 1e-3;
  double worst = 0.0;
  for (std::size_t i = 0; i < f.modules.size(); ++i) {
    auto check = [&](const std::function<double&(Modules&, Eigen::Index, Eigen::Index)>& at, Eigen::Index rows,
                     Eigen::Index cols, const MatrixXd& grad) {
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
          const double fd = rgtest::central_difference4(
              [&](double e) {
                Modules x = f.modules;
                at(x, r, c) += e;
                return loss(x);
              },
              h);
          worst = std::max(worst, rel_err(fd, grad(r, c)));
        }
    };
    const auto& m = f.modules[i];
    check([i](Modules& x, Eigen::Index r, Eigen::Index c) -> double& { return x[i].R(r, c); }, m.R.rows(),
          m.R.cols(), lg.grads[i].dR);
    check([i](Modules& x, Eigen::Index r, Eigen::Index c) -> double& { return x[i].W(r, c); }, m.W.rows(),
          m.W.cols(), lg.grads[i].dW);
    check([i](Modules& x, Eigen::Index r, Eigen::Index) -> double& { return x[i].b(r); }, m.b.size(), 1,
          MatrixXd(lg.grads[i].db));
  }
  return worst;
}

}  // namespace

TEST_CASE("edit map examples") {
  Rng rng(1);
  const auto id = InterventionModule<double>::identity(1, 6, 2, rng);
  const VectorXd h = rng.gaussian(6);
  const auto e0 = apply(id, h);
  CHECK(e0.delta.cwiseAbs().maxCoeff() == 0.0);
  CHECK((e0.output.array() == h.array()).all());

  InterventionModule<double> full;
  full.R = MatrixXd::Identity(4, 4);
  full.W = rng.gaussian(4, 4);
  full.b = VectorXd::Zero(4);
  const VectorXd h4 = rng.gaussian(4);
  CHECK((apply(full, h4).output - full.W * h4).cwiseAbs().maxCoeff() <= 1e-14);

  InterventionModule<double> tiny;
  tiny.R = MatrixXd(1, 2);
  tiny.R << 1, 0;
  tiny.W = MatrixXd(1, 2);
  tiny.W << 0, 1;
  tiny.b = VectorXd::Zero(1);
  const auto e = apply<double>(tiny, Eigen::Vector2d(3, 4));
  CHECK(e.delta.isApprox(Eigen::Vector2d(1, 0)));
  CHECK(e.output.isApprox(Eigen::Vector2d(4, 4)));
  CHECK_THROWS_AS(apply<double>(tiny, VectorXd::Zero(3)), Error);
  CHECK_THROWS_AS(InterventionModule<double>::identity(1, 4, 5, rng), Error);
}

TEST_CASE("position rules") {
  LayerPlan lp;
  CHECK(InterventionPlan::positions(lp, 5) == std::vector<int>{4});
  lp.rule = PositionRule::all;
  CHECK(InterventionPlan::positions(lp, 3) == std::vector<int>{0, 1, 2});
  lp.rule = PositionRule::first_f_and_last_l;
  lp.first = 2;
  lp.last = 1;
  CHECK(InterventionPlan::positions(lp, 6) == std::vector<int>{0, 1, 5});
  // Overlapping windows are deduplicated.
  CHECK(InterventionPlan::positions(lp, 2) == std::vector<int>{0, 1});
  lp.first = 0;
  lp.last = 0;
  CHECK_THROWS_WITH_AS(InterventionPlan::positions(lp, 4), doctest::Contains("PositionOutOfRange"), Error);
  CHECK_THROWS_AS(InterventionPlan::positions(LayerPlan{}, 0), Error);
  CHECK(position_rule_from_string(to_string(PositionRule::first_f_and_last_l)) == PositionRule::first_f_and_last_l);
  CHECK_THROWS_AS(position_rule_from_string("middle"), Error);
}

TEST_CASE("geometry loss examples") {
  const BasisMap bases{{1, RefusalBasis<double>(MatrixXd(Eigen::Vector2d(1, 0)))}};
  LayerDeltas<double> one;
  one.layer = 1;
  one.deltas = {Eigen::Vector2d(2, 3)};
  CHECK(geometry_loss_single<double>({one}, bases) == doctest::Approx(4.0));
  LayerDeltas<double> two;
  two.layer = 1;
  two.deltas = {Eigen::Vector2d(2, 0), Eigen::Vector2d(0, 0)};
  CHECK(geometry_loss_single<double>({two}, bases) == doctest::Approx(2.0));
  LayerDeltas<double> perp;
  perp.layer = 1;
  perp.deltas = {Eigen::Vector2d(0, 7)};
  CHECK(geometry_loss_single<double>({perp}, bases) == 0.0);
  CHECK(geometry_loss<double>({{one}, {two}}, bases) == doctest::Approx(3.0));
  LayerDeltas<double> other = one;
  other.layer = 2;
  CHECK_THROWS_WITH_AS(geometry_loss_single<double>({other}, bases), doctest::Contains("MissingBasis"), Error);
}

TEST_CASE("task loss examples") {
  // Uniform logits over 64 tokens.
  const ReferenceModel uniform = readout_only(MatrixXd::Identity(64, 8), MatrixXd::Zero(64, 8));
  Sequence s{{3}, {10}};
  CHECK(task_loss(uniform, {}, InterventionPlan{}, Batch{&s}) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
  CHECK(task_loss(uniform, {}, InterventionPlan{}, Batch{&s}) == doctest::Approx(4.1589).epsilon(1e-4));

  MatrixXd emb = MatrixXd::Zero(2, 8);
  emb(0, 0) = 1.0;
  MatrixXd un = MatrixXd::Zero(2, 8);
  un(1, 0) = std::log(3.0);
  const ReferenceModel hand = readout_only(emb, un);
  Sequence t{{0}, {1}};
  CHECK(task_loss(hand, {}, InterventionPlan{}, Batch{&t}) == doctest::Approx(0.28768).epsilon(1e-5));
  CHECK(task_loss(hand, {}, InterventionPlan{}, Batch{&t}) == doctest::Approx(-std::log(0.75)).epsilon(1e-13));

  un(1, 0) = 50.0;
  const ReferenceModel saturated = readout_only(emb, un);
  CHECK(task_loss(saturated, {}, InterventionPlan{}, Batch{&t}) < 1e-20);

  // Batch mean of per-sequence sums. The second target of `two` is read at
  // token 1, whose zero embedding gives uniform logits.
  Sequence two{{0, 0}, {1, 1}};
  const double single = -std::log(0.75);
  un(1, 0) = std::log(3.0);
  const ReferenceModel hand2 = readout_only(emb, un);
  CHECK(task_loss(hand2, {}, InterventionPlan{}, Batch{&t, &two}) == doctest::Approx((single + single + std::log(2.0)) / 2));
}

TEST_CASE("zero lambda skips the geometry path exactly") {
  GradFixture f;
  const Batch batch = as_batch(f.corpus.sequences);
  const LossAndGrads task = task_loss_and_grads(f.model, f.modules, f.plan, batch);
  const LossAndGrads total = total_loss_and_grads(f.model, f.modules, f.plan, batch, 0.0, f.bases);
  CHECK(total.loss.total == task.loss.task);
  CHECK(total.loss.total == doctest::Approx(task_loss(f.model, f.modules, f.plan, batch)).epsilon(1e-14));
  for (std::size_t i = 0; i < f.modules.size(); ++i) {
    CHECK((total.grads[i].dR.array() == task.grads[i].dR.array()).all());
    CHECK((total.grads[i].dW.array() == task.grads[i].dW.array()).all());
    CHECK((total.grads[i].db.array() == task.grads[i].db.array()).all());
  }
  // Identity modules make no edit, so the penalty vanishes for any lambda.
  const Modules ident = init_modules(f.model, f.plan, 1);
  const auto lb = evaluate_losses(f.model, ident, f.plan, batch, 3.0, f.bases);
  CHECK(lb.geom == 0.0);
  CHECK(lb.total == lb.task);
  // A positive lambda adds exactly lambda * geom.
  const auto with = evaluate_losses(f.model, f.modules, f.plan, batch, 0.2, f.bases);
  CHECK(with.geom > 0.0);
  CHECK(with.total == doctest::Approx(with.task + 0.2 * with.geom).epsilon(1e-14));
  CHECK(with.geom == doctest::Approx(geometry_loss(f.model, f.modules, f.plan, batch, f.bases)).epsilon(1e-14));
}

TEST_CASE("parameter gradients match finite differences") {
  GradFixture f;
  for (double lambda : {0.0, 0.2}) {
    CAPTURE(lambda);
    CHECK(worst_param_error(f, lambda) < 1e-6);
  }
}

namespace {

// Loss from the (edited) hidden state at `layer`: remaining blocks, their
// planned edits on prompt positions, then the readout.
double tail_loss(const GradFixture& f, MatrixXd h, int layer, const Sequence& s) {
  const int P = static_cast<int>(s.prompt.size());
  for (int l = layer + 1; l <= f.model.layers(); ++l) {
    const Block& blk = f.model.blocks[l - 1];
    MatrixXd next = h;
    for (int p = 0; p < h.rows(); ++p) {
      const VectorXd x = h.row(p).transpose() + h.topRows(p + 1).colwise().mean().transpose();
      next.row(p) += (blk.A2 * (blk.A1 * x).array().tanh().matrix()).transpose();
    }
    h = next;
    for (const auto& m : f.modules) {
      if (m.layer != l) continue;
      for (int p : InterventionPlan::positions(*f.plan.find(l), P))
        h.row(p) = apply<double>(m, h.row(p).transpose()).output.transpose();
    }
  }
  double loss = 0.0;
  for (std::size_t t = 0; t < s.target.size(); ++t) {
    const VectorXd z = f.model.unembedding * h.row(P - 1 + static_cast<int>(t)).transpose();
    loss += std::log((z.array() - z.maxCoeff()).exp().sum()) + z.maxCoeff() - z(s.target[t]);
  }
  return loss;
}

}  // namespace

TEST_CASE("hidden-state gradients under interventions match finite differences") {
  GradFixture f;
  double worst = 0.0;
  for (int q = 0; q < 3; ++q) {
    const Sequence& s = f.corpus.sequences[q * 2];
    const int T = static_cast<int>(model_input(s).size());
    std::vector<int> positions(T);
    for (int p = 0; p < T; ++p) positions[p] = p;
    const auto fr = forward(f.model, s, &f.modules, &f.plan);
    for (int layer = 0; layer <= f.model.layers(); ++layer) {
      const MatrixXd g = hidden_grad(f.model, s, &f.modules, &f.plan, layer, positions);
      if (layer >= 1)
        CHECK(tail_loss(f, fr.hidden[layer], layer, s) ==
              doctest::Approx(task_loss(f.model, f.modules, f.plan, Batch{&s})).epsilon(1e-12));
      if (layer == 0) continue;  // the layer-1 edit sits between embedding and block output
      for (int p = 0; p < T; ++p)
        for (int i = 0; i < f.model.dim(); ++i) {
          const double fd = rgtest::central_difference4(
              [&](double e) {
                MatrixXd h = fr.hidden[layer];
                h(p, i) += e;
                return tail_loss(f, h, layer, s);
              },
              1e-3);
          worst = std::max(worst, rel_err(fd, g(p, i)));
        }
    }
  }
  CHECK(worst < 1e-6);
}
