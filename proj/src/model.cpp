#include "refusalguard/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "engine.hpp"
#include "refusalguard/rng.hpp"

namespace rg {

void ModelConfig::validate() const {
  if (vocab_size < 2 || layers < 1 || dim < 8 || hidden < 1)
    throw Error(ErrorCode::InvalidConfig, "model needs V >= 2, L >= 1, d >= 8, hidden >= 1");
  if (planted_rank < 2 || planted_rank > dim)
    throw Error(ErrorCode::InvalidConfig, "planted_rank must lie in [2, d]");
  const int reserved = 1 + 2 * (planted_rank - 1) + 1;
  if (vocab_size < reserved + 2)
    throw Error(ErrorCode::InvalidConfig,
                "vocab_size must leave at least two generic tokens after " + std::to_string(reserved) +
                    " reserved ids");
}

ReferenceModel build_model(const ModelConfig& cfg) {
  cfg.validate();
  const int V = cfg.vocab_size, d = cfg.dim, k = cfg.planted_rank, H = cfg.hidden;
  Rng rng(cfg.seed);
  ReferenceModel m;
  m.config = cfg;
  m.tokens.first_marker = 1;
  m.tokens.marker_count = 2 * (k - 1);
  m.tokens.comply = m.tokens.first_marker + m.tokens.marker_count;
  m.tokens.first_generic = m.tokens.comply + 1;
  m.tokens.vocab = V;

  m.planted_basis = RefusalBasis<double>::orthonormalized(rng.gaussian(d, k));
  const MatrixXd& B = m.planted_basis.columns();

  m.embedding = rng.gaussian(V, d) / std::sqrt(double(d));

  // Off-subspace offset shared by every token.
  VectorXd shared = rng.gaussian(d);
  shared -= B * (B.transpose() * shared);
  shared *= cfg.shared_offset / shared.norm();

  // In-subspace offset shared by every token, balanced over columns 2..k.
  VectorXd tail = VectorXd::Zero(k);
  tail.tail(k - 1).setOnes();
  const VectorXd cone_offset = -cfg.cone_offset * B * tail.normalized();

  // Markers lie entirely in the subspace: along column 1 with a signed
  // excursion along one further column each. Excursion sizes differ per
  // column so the harmful spread has distinct principal directions.
  for (int j = 1; j < k; ++j) {
    const double v = k == 2 ? 0.8 : 0.8 - 0.5 * double(j - 1) / double(k - 2);
    for (int sign = 0; sign < 2; ++sign) {
      VectorXd alpha = VectorXd::Zero(k);
      alpha(0) = 1.0;
      alpha(j) = sign == 0 ? v : -v;
      alpha *= cfg.marker_norm / alpha.norm();
      const int token = m.tokens.first_marker + 2 * (j - 1) + sign;
      m.embedding.row(token) = (B * alpha).transpose();
    }
  }
  m.embedding.rowwise() += (cone_offset + shared).transpose();

  m.blocks.resize(cfg.layers);
  for (auto& blk : m.blocks) {
    blk.A1 = rng.gaussian(H, d) * (cfg.mixer_in_scale / std::sqrt(double(d)));
    blk.A2 = rng.gaussian(d, H) * (cfg.mixer_out_scale / std::sqrt(double(H)));
  }

  m.unembedding = rng.gaussian(V, d) * (cfg.readout_scale / std::sqrt(double(d)));
  m.unembedding -= (m.unembedding * B) * B.transpose();
  VectorXd comply = VectorXd::Ones(k);
  comply(0) = 0.1;
  // Activity along the offset direction also lowers every generic logit, so
  // undoing the offset makes the model more responsive on benign prompts.
  const VectorXd coupling = cfg.responsiveness * B * tail.normalized();
  for (int t = m.tokens.first_generic; t < V; ++t) m.unembedding.row(t) += coupling.transpose();
  m.unembedding.row(m.tokens.comply) = (cfg.comply_scale * B * comply.normalized()).transpose();
  return m;
}

namespace {

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
}

void fnv_matrix(std::uint64_t& h, const MatrixXd& m) {
  fnv_bytes(h, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

}  // namespace

std::uint64_t model_hash(const ReferenceModel& model) {
  std::uint64_t h = 1469598103934665603ULL;
  fnv_matrix(h, model.embedding);
  for (const auto& blk : model.blocks) {
    fnv_matrix(h, blk.A1);
    fnv_matrix(h, blk.A2);
  }
  fnv_matrix(h, model.unembedding);
  fnv_matrix(h, model.planted_basis.columns());
  return h;
}

const char* to_string(CorpusKind kind) {
  switch (kind) {
    case CorpusKind::harmful: return "harmful";
    case CorpusKind::harmless: return "harmless";
    case CorpusKind::task: return "task";
  }
  return "harmful";
}

CorpusKind corpus_kind_from_string(const std::string& s) {
  if (s == "harmful") return CorpusKind::harmful;
  if (s == "harmless") return CorpusKind::harmless;
  if (s == "task") return CorpusKind::task;
  throw Error(ErrorCode::InvalidConfig, "unknown corpus kind '" + s + "'");
}

Corpus generate_corpus(const ReferenceModel& model, CorpusKind kind, int n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::InvalidConfig, "corpus size must be at least 1");
  const TokenLayout& tl = model.tokens;
  const int g = tl.generic_count();
  Rng rng(seed);
  Corpus c;
  c.kind = kind;
  c.seed = seed;
  c.sequences.reserve(n);
  for (int i = 0; i < n; ++i) {
    Sequence s;
    const int len = rng.range(3, 6);
    for (int p = 0; p < len; ++p) s.prompt.push_back(tl.first_generic + static_cast<int>(rng.below(g)));
    if (kind == CorpusKind::harmful) {
      s.prompt.back() = tl.first_marker + static_cast<int>(rng.below(tl.marker_count));
      s.target = {tl.comply};
    } else {
      // Benign pattern: the next generic token, cyclically.
      const int last = s.prompt.back() - tl.first_generic;
      s.target = {tl.first_generic + (last + 1) % g};
    }
    c.sequences.push_back(std::move(s));
  }
  return c;
}

std::vector<int> model_input(const Sequence& seq) {
  std::vector<int> tokens = seq.prompt;
  if (!seq.target.empty()) tokens.insert(tokens.end(), seq.target.begin(), seq.target.end() - 1);
  return tokens;
}

void check_plan(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan) {
  std::set<int> seen;
  for (const auto& m : modules) {
    if (m.layer < 1 || m.layer > model.layers())
      throw Error(ErrorCode::LayerOutOfRange, "intervention layer " + std::to_string(m.layer) + " outside [1, " +
                                                  std::to_string(model.layers()) + "]");
    if (!seen.insert(m.layer).second)
      throw Error(ErrorCode::InvalidConfig, "two interventions at layer " + std::to_string(m.layer));
    if (!plan.find(m.layer))
      throw Error(ErrorCode::InvalidConfig, "no plan entry for layer " + std::to_string(m.layer));
    require_dim(m.dim(), model.dim(), "intervention width");
  }
  for (const auto& lp : plan.layers) {
    if (lp.layer < 1 || lp.layer > model.layers())
      throw Error(ErrorCode::LayerOutOfRange, "plan layer " + std::to_string(lp.layer) + " outside [1, " +
                                                  std::to_string(model.layers()) + "]");
  }
}

namespace detail {

Trace run_forward(const ReferenceModel& model, const std::vector<int>& tokens, int prompt_len,
                  const Modules* modules, const InterventionPlan* plan, bool keep_cache) {
  const int T = static_cast<int>(tokens.size());
  const int L = model.layers();
  if (T < 1 || prompt_len < 1 || prompt_len > T)
    throw Error(ErrorCode::PositionOutOfRange, "prompt length outside [1, sequence length]");
  for (int t : tokens)
    if (t < 0 || t >= model.vocab()) throw Error(ErrorCode::InvalidConfig, "token id out of range");

  Trace tr;
  tr.prompt_len = prompt_len;
  tr.edits.resize(L + 1);
  MatrixXd h(T, model.dim());
  for (int p = 0; p < T; ++p) h.row(p) = model.embedding.row(tokens[p]);
  tr.hidden.push_back(h);

  const bool editing = modules && plan && !modules->empty();
  for (int l = 1; l <= L; ++l) {
    const Block& blk = model.blocks[l - 1];
    MatrixXd x = h;
    Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(h.cols());
    for (int p = 0; p < T; ++p) {
      running += h.row(p);
      x.row(p) += running / double(p + 1);
    }
    MatrixXd s = (x * blk.A1.transpose()).array().tanh().matrix();
    h.noalias() += s * blk.A2.transpose();
    if (keep_cache) {
      tr.mixed.push_back(std::move(x));
      tr.act.push_back(std::move(s));
    }
    if (editing) {
      for (int i = 0; i < static_cast<int>(modules->size()); ++i) {
        const auto& mod = (*modules)[i];
        if (mod.layer != l) continue;
        const LayerPlan* lp = plan->find(l);
        if (!lp) throw Error(ErrorCode::InvalidConfig, "no plan entry for layer " + std::to_string(l));
        LayerDeltas<double> ld;
        ld.layer = l;
        for (int p : InterventionPlan::positions(*lp, prompt_len)) {
          EditRecord rec;
          rec.module = i;
          rec.position = p;
          rec.pre = h.row(p).transpose();
          rec.coord = mod.W * rec.pre + mod.b - mod.R * rec.pre;
          VectorXd delta = mod.R.transpose() * rec.coord;
          h.row(p) += delta.transpose();
          ld.deltas.push_back(std::move(delta));
          tr.edits[l].push_back(std::move(rec));
        }
        tr.deltas.push_back(std::move(ld));
      }
    }
    tr.hidden.push_back(h);
  }
  tr.logits = h * model.unembedding.transpose();
  return tr;
}

double sequence_task_loss(const MatrixXd& logits, int prompt_len, const std::vector<int>& targets) {
  double loss = 0.0;
  for (int t = 0; t < static_cast<int>(targets.size()); ++t) {
    const auto z = logits.row(prompt_len - 1 + t);
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    loss += lse - z(targets[t]);
  }
  return loss;
}

double run_backward(const ReferenceModel& model, const Modules* modules, const Trace& tr,
                    const std::vector<int>& targets, const BackwardSpec& spec) {
  const int L = model.layers();
  const int T = static_cast<int>(tr.hidden[0].rows());
  const int P = tr.prompt_len - 1;
  if (P + static_cast<int>(targets.size()) > T)
    throw Error(ErrorCode::PositionOutOfRange, "targets extend past the input");

  MatrixXd g = MatrixXd::Zero(T, model.dim());
  double loss = 0.0;
  for (int t = 0; t < static_cast<int>(targets.size()); ++t) {
    const int y = targets[t];
    if (y < 0 || y >= model.vocab()) throw Error(ErrorCode::InvalidConfig, "target id out of range");
    const auto z = tr.logits.row(P + t);
    const double mx = z.maxCoeff();
    const Eigen::RowVectorXd e = (z.array() - mx).exp().matrix();
    const double sum = e.sum();
    loss += mx + std::log(sum) - z(y);
    Eigen::RowVectorXd dz = e / sum;
    dz(y) -= 1.0;
    g.row(P + t) += spec.task_weight * (dz * model.unembedding);
  }

  int lowest = L + 1;
  if (spec.hidden_grads) {
    spec.hidden_grads->assign(L + 1, MatrixXd());
    lowest = std::min(lowest, std::max(spec.lowest_hidden, 0));
  }
  if (spec.grads && modules)
    for (const auto& m : *modules) lowest = std::min(lowest, m.layer);
  if (lowest > L) return loss;
  if (tr.mixed.size() != static_cast<std::size_t>(L)) throw Error(ErrorCode::InvalidConfig, "trace lacks cache");

  for (int l = L; l >= lowest; --l) {
    if (spec.hidden_grads && l >= spec.lowest_hidden) (*spec.hidden_grads)[l] = g;
    const auto& edits = tr.edits[l];
    if (!edits.empty()) {
      const double per_pos = 1.0 / double(edits.size());
      const MatrixXd* basis = nullptr;
      if (spec.geom_weight != 0.0) {
        auto it = spec.bases->find(l);
        if (it == spec.bases->end())
          throw Error(ErrorCode::MissingBasis, "no refusal basis for layer " + std::to_string(l));
        basis = &it->second.columns();
      }
      for (const auto& rec : edits) {
        const auto& mod = (*modules)[rec.module];
        VectorXd gd = g.row(rec.position).transpose();
        if (basis) {
          const VectorXd delta = mod.R.transpose() * rec.coord;
          gd += (spec.geom_weight * 2.0 * per_pos) * (*basis * (basis->transpose() * delta));
        }
        const VectorXd u = mod.R * gd;
        if (spec.grads) {
          ModuleGrad& mg = (*spec.grads)[rec.module];
          mg.dW.noalias() += u * rec.pre.transpose();
          mg.db += u;
          mg.dR.noalias() += rec.coord * gd.transpose();
          mg.dR.noalias() -= u * rec.pre.transpose();
        }
        g.row(rec.position) += ((mod.W - mod.R).transpose() * u).transpose();
      }
    }
    if (l == lowest || l == 0) break;

    const Block& blk = model.blocks[l - 1];
    const MatrixXd& s = tr.act[l - 1];
    const MatrixXd da = ((g * blk.A2).array() * (1.0 - s.array().square())).matrix();
    const MatrixXd dx = da * blk.A1;
    MatrixXd prev = g + dx;
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(g.cols());
    for (int p = T - 1; p >= 0; --p) {
      acc += dx.row(p) / double(p + 1);
      prev.row(p) += acc;
    }
    g = std::move(prev);
  }
  return loss;
}

}  // namespace detail

ForwardResult forward(const ReferenceModel& model, const std::vector<int>& tokens, int prompt_len,
                      const Modules* modules, const InterventionPlan* plan) {
  if (modules && plan) check_plan(model, *modules, *plan);
  detail::Trace tr = detail::run_forward(model, tokens, prompt_len, modules, plan, false);
  return {std::move(tr.hidden), std::move(tr.logits), std::move(tr.deltas)};
}

ForwardResult forward(const ReferenceModel& model, const Sequence& seq, const Modules* modules,
                      const InterventionPlan* plan) {
  return forward(model, model_input(seq), static_cast<int>(seq.prompt.size()), modules, plan);
}

MatrixXd hidden_grad(const ReferenceModel& model, const Sequence& seq, const Modules* modules,
                     const InterventionPlan* plan, int layer, const std::vector<int>& positions) {
  if (layer < 0 || layer > model.layers())
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(layer) + " outside [0, L]");
  if (modules && plan) check_plan(model, *modules, *plan);
  const auto tokens = model_input(seq);
  const int T = static_cast<int>(tokens.size());
  for (int p : positions)
    if (p < 0 || p >= T) throw Error(ErrorCode::PositionOutOfRange, "position " + std::to_string(p));
  detail::Trace tr =
      detail::run_forward(model, tokens, static_cast<int>(seq.prompt.size()), modules, plan, true);
  std::vector<MatrixXd> hg;
  detail::BackwardSpec spec;
  spec.hidden_grads = &hg;
  spec.lowest_hidden = layer;
  detail::run_backward(model, modules, tr, seq.target, spec);
  MatrixXd out(positions.size(), model.dim());
  for (std::size_t i = 0; i < positions.size(); ++i) out.row(i) = hg[layer].row(positions[i]);
  return out;
}

}  // namespace rg
