#pragma once

// Frozen synthetic sequence model with a planted refusal subspace, and the
// corpus generators built around it.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refusalguard/geometry.hpp"
#include "refusalguard/intervention.hpp"

namespace rg {

using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

struct ModelConfig {
  int vocab_size = 64;
  int dim = 64;
  int layers = 4;
  int hidden = 128;
  std::uint64_t seed = 0;
  int planted_rank = 4;
  // Planted-structure magnitudes.
  double marker_norm = 2.0;
  double cone_offset = 4.0;
  double shared_offset = 5.0;
  double comply_scale = 0.3;
  double readout_scale = 0.1;
  // Weight of the subspace offset direction in every generic readout row.
  double responsiveness = 0.1;
  double mixer_in_scale = 0.2;
  double mixer_out_scale = 0.1;

  void validate() const;
};

// Token ids: 0 is reserved, then the harmful markers, then the comply token,
// then the generic vocabulary.
struct TokenLayout {
  int first_marker = 1;
  int marker_count = 0;
  int comply = 0;
  int first_generic = 0;
  int vocab = 0;

  bool is_marker(int t) const { return t >= first_marker && t < first_marker + marker_count; }
  int generic_count() const { return vocab - first_generic; }
};

struct Block {
  MatrixXd A1;  // hidden x d
  MatrixXd A2;  // d x hidden
};

struct ReferenceModel {
  ModelConfig config;
  TokenLayout tokens;
  MatrixXd embedding;    // V x d
  std::vector<Block> blocks;
  MatrixXd unembedding;  // V x d, row t reads out the logit of token t
  RefusalBasis<double> planted_basis;

  int layers() const { return static_cast<int>(blocks.size()); }
  int dim() const { return static_cast<int>(embedding.cols()); }
  int vocab() const { return static_cast<int>(embedding.rows()); }
};

ReferenceModel build_model(const ModelConfig& cfg);

// FNV-1a over every weight, for frozen-model checks.
std::uint64_t model_hash(const ReferenceModel& model);

struct Sequence {
  std::vector<int> prompt;
  std::vector<int> target;
};

enum class CorpusKind { harmful, harmless, task };
const char* to_string(CorpusKind kind);
CorpusKind corpus_kind_from_string(const std::string& s);

struct Corpus {
  CorpusKind kind = CorpusKind::harmful;
  std::uint64_t seed = 0;
  std::vector<Sequence> sequences;
};

Corpus generate_corpus(const ReferenceModel& model, CorpusKind kind, int n, std::uint64_t seed);

using Modules = std::vector<InterventionModule<double>>;
using BasisMap = std::map<int, RefusalBasis<double>>;

// Input fed to the model: the prompt followed by all but the last target.
std::vector<int> model_input(const Sequence& seq);

struct ForwardResult {
  std::vector<MatrixXd> hidden;  // layers + 1 entries of T x d; entry 0 is the embedding
  MatrixXd logits;               // T x V
  std::vector<LayerDeltas<double>> deltas;
};

// Hidden states after every block, with planned edits applied after the
// block of their layer. Edits touch prompt positions only.
ForwardResult forward(const ReferenceModel& model, const std::vector<int>& tokens, int prompt_len,
                      const Modules* modules = nullptr, const InterventionPlan* plan = nullptr);

ForwardResult forward(const ReferenceModel& model, const Sequence& seq, const Modules* modules = nullptr,
                      const InterventionPlan* plan = nullptr);

// Gradient of the sequence's task loss with respect to the (edited) hidden
// state at `layer`, one row per requested position.
MatrixXd hidden_grad(const ReferenceModel& model, const Sequence& seq, const Modules* modules,
                     const InterventionPlan* plan, int layer, const std::vector<int>& positions);

void check_plan(const ReferenceModel& model, const Modules& modules, const InterventionPlan& plan);

}  // namespace rg
