#pragma once

// Refusal basis estimation from paired activation sets: a difference-in-means
// direction followed by the leading principal directions of the per-prompt
// differences, deflated against it.

#include <optional>
#include <string>

#include "refusalguard/geometry.hpp"

namespace rg {

struct ExtractionConfig {
  int k = 4;
  // When set, replaces k: the smallest basis whose principal directions
  // explain at least this fraction of the difference variance.
  std::optional<double> variance_threshold;
  bool center = true;

  void validate() const {
    if (variance_threshold) {
      if (!(*variance_threshold > 0.0 && *variance_threshold <= 1.0))
        throw Error(ErrorCode::InvalidConfig, "variance_threshold must lie in (0, 1]");
    } else if (k < 1) {
      throw Error(ErrorCode::InvalidConfig, "k must be at least 1");
    }
  }
};

// Rows are prompts.
template <typename Scalar = double>
struct LabeledActivations {
  Mat<Scalar> harmful;
  Mat<Scalar> harmless;
  int layer = 0;
};

template <typename Scalar>
RefusalBasis<Scalar> extract_basis(const Mat<Scalar>& harmful, const Mat<Scalar>& harmless,
                                   const ExtractionConfig& cfg, int layer = 0) {
  cfg.validate();
  const Eigen::Index d = harmful.cols();
  if (harmful.rows() < 1 || harmless.rows() < 1)
    throw Error(ErrorCode::DimensionMismatch, "both activation batches must be nonempty");
  require_dim(harmless.cols(), d, "harmless activation width");

  const Vec<Scalar> harmless_mean = harmless.colwise().mean().transpose();
  const Vec<Scalar> harmful_mean = harmful.colwise().mean().transpose();
  const Vec<Scalar> diff = harmful_mean - harmless_mean;
  const Scalar sep = diff.norm();
  if (!(sep > Scalar(1e-10)))
    throw Error(ErrorCode::DegenerateSeparation,
                "mean difference norm " + std::to_string(double(sep)) + " is at or below 1e-10");
  const Vec<Scalar> first = diff / sep;

  const int k_fixed = cfg.variance_threshold ? -1 : cfg.k;
  if (k_fixed == 1) return RefusalBasis<Scalar>::orthonormalized(Mat<Scalar>(first), layer);
  if (k_fixed > d)
    throw Error(ErrorCode::RankDeficient, "k exceeds the activation dimension");
  if (k_fixed > harmful.rows())
    throw Error(ErrorCode::RankDeficient, "need at least k harmful activations");

  Mat<Scalar> diffs = harmful.rowwise() - harmless_mean.transpose();
  if (cfg.center) diffs.rowwise() -= diffs.colwise().mean();
  diffs -= (diffs * first) * first.transpose();

  Eigen::BDCSVD<Mat<Scalar>> svd(diffs, Eigen::ComputeThinV);
  const Vec<Scalar>& sv = svd.singularValues();
  const Scalar tol = Scalar(1e-9) * std::max(sv.size() ? sv(0) : Scalar(0), sep);

  Eigen::Index extra = 0;
  if (cfg.variance_threshold) {
    const Scalar total = sv.squaredNorm();
    Scalar acc = Scalar(0);
    while (extra < sv.size() && sv(extra) > tol &&
           (total <= Scalar(0) || acc / total < Scalar(*cfg.variance_threshold))) {
      acc += sv(extra) * sv(extra);
      ++extra;
    }
  } else {
    extra = k_fixed - 1;
    if (sv.size() < extra || sv(extra - 1) <= tol)
      throw Error(ErrorCode::RankDeficient,
                  "fewer than " + std::to_string(k_fixed) + " independent directions in the data");
  }

  Mat<Scalar> raw(d, 1 + extra);
  raw.col(0) = first;
  raw.rightCols(extra) = svd.matrixV().leftCols(extra);
  return RefusalBasis<Scalar>::orthonormalized(raw, layer);
}

template <typename Scalar>
RefusalBasis<Scalar> extract_basis(const LabeledActivations<Scalar>& data, const ExtractionConfig& cfg) {
  return extract_basis(data.harmful, data.harmless, cfg, data.layer);
}

}  // namespace rg
