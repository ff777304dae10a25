#pragma once

// Low-rank representation edit h -> h + R^T (W h + b - R h), the positions it
// applies to, and the penalty on the part of each edit inside the refusal
// subspace.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "refusalguard/geometry.hpp"
#include "refusalguard/rng.hpp"

namespace rg {

template <typename Scalar = double>
struct InterventionModule {
  int layer = 1;
  Mat<Scalar> R;  // r x d
  Mat<Scalar> W;  // r x d
  Vec<Scalar> b;  // r

  Eigen::Index rank() const { return R.rows(); }
  Eigen::Index dim() const { return R.cols(); }

  // Random orthonormal rows for R, W = R and b = 0, so the edit starts at zero.
  static InterventionModule identity(int layer, Eigen::Index d, Eigen::Index r, Rng& rng) {
    if (r < 1 || r > d) throw Error(ErrorCode::InvalidConfig, "intervention rank must lie in [1, d]");
    Eigen::HouseholderQR<Mat<double>> qr(rng.gaussian(d, r));
    Mat<double> q = qr.householderQ() * Mat<double>::Identity(d, r);
    fix_column_signs(q);
    InterventionModule m;
    m.layer = layer;
    m.R = q.transpose().template cast<Scalar>();
    m.W = m.R;
    m.b = Vec<Scalar>::Zero(r);
    return m;
  }

  bool finite() const { return R.allFinite() && W.allFinite() && b.allFinite(); }
};

template <typename Scalar>
struct EditResult {
  Vec<Scalar> output;
  Vec<Scalar> delta;
};

template <typename Scalar>
EditResult<Scalar> apply(const InterventionModule<Scalar>& m, const Vec<Scalar>& h) {
  require_dim(h.size(), m.dim(), "intervention input");
  Vec<Scalar> delta = m.R.transpose() * (m.W * h + m.b - m.R * h);
  Vec<Scalar> out = h + delta;
  return {std::move(out), std::move(delta)};
}

enum class PositionRule { last_token, first_f_and_last_l, all };

inline const char* to_string(PositionRule rule) {
  switch (rule) {
    case PositionRule::last_token: return "last_token";
    case PositionRule::first_f_and_last_l: return "first_f_and_last_l";
    case PositionRule::all: return "all";
  }
  return "last_token";
}

inline PositionRule position_rule_from_string(const std::string& s) {
  if (s == "last_token") return PositionRule::last_token;
  if (s == "first_f_and_last_l") return PositionRule::first_f_and_last_l;
  if (s == "all") return PositionRule::all;
  throw Error(ErrorCode::InvalidConfig, "unknown position rule '" + s + "'");
}

struct LayerPlan {
  int layer = 1;
  PositionRule rule = PositionRule::last_token;
  int first = 1;
  int last = 1;
  int rank = 4;
};

struct InterventionPlan {
  std::vector<LayerPlan> layers;

  // Sorted, deduplicated prompt positions for one layer entry.
  static std::vector<int> positions(const LayerPlan& lp, int prompt_len) {
    if (prompt_len < 1) throw Error(ErrorCode::PositionOutOfRange, "empty prompt");
    std::vector<int> out;
    switch (lp.rule) {
      case PositionRule::last_token:
        out.push_back(prompt_len - 1);
        break;
      case PositionRule::all:
        for (int p = 0; p < prompt_len; ++p) out.push_back(p);
        break;
      case PositionRule::first_f_and_last_l:
        for (int p = 0; p < prompt_len; ++p)
          if (p < lp.first || p >= prompt_len - lp.last) out.push_back(p);
        break;
    }
    if (out.empty()) throw Error(ErrorCode::PositionOutOfRange, "position rule selects no positions");
    return out;
  }

  const LayerPlan* find(int layer) const {
    for (const auto& lp : layers)
      if (lp.layer == layer) return &lp;
    return nullptr;
  }
};

// One recorded edit: its layer and the deltas at each planned position.
template <typename Scalar>
struct LayerDeltas {
  int layer = 0;
  std::vector<Vec<Scalar>> deltas;
};

// Sum over layers of the position-mean of ||P_ref delta||^2 for one input.
template <typename Scalar>
Scalar geometry_loss_single(const std::vector<LayerDeltas<Scalar>>& per_layer,
                            const std::map<int, RefusalBasis<Scalar>>& bases) {
  Scalar total = Scalar(0);
  for (const auto& ld : per_layer) {
    auto it = bases.find(ld.layer);
    if (it == bases.end())
      throw Error(ErrorCode::MissingBasis, "no refusal basis for layer " + std::to_string(ld.layer));
    if (ld.deltas.empty()) continue;
    Scalar acc = Scalar(0);
    for (const auto& d : ld.deltas) acc += (it->second.columns().transpose() * d).squaredNorm();
    total += acc / Scalar(ld.deltas.size());
  }
  return total;
}

// Batch mean of the per-input geometry loss.
template <typename Scalar>
Scalar geometry_loss(const std::vector<std::vector<LayerDeltas<Scalar>>>& batch,
                     const std::map<int, RefusalBasis<Scalar>>& bases) {
  if (batch.empty()) return Scalar(0);
  Scalar total = Scalar(0);
  for (const auto& item : batch) total += geometry_loss_single(item, bases);
  return total / Scalar(batch.size());
}

}  // namespace rg
