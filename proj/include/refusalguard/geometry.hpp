#pragma once

// Subspace geometry on a fixed orthonormal basis: coordinates, projectors,
// alignment, drift, update decomposition and coordinate statistics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "refusalguard/errors.hpp"

namespace rg {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
constexpr Scalar orthonormality_tolerance() {
  return std::numeric_limits<Scalar>::digits > 30 ? Scalar(1e-8) : Scalar(1e-4);
}

// Norms at or below this are treated as zero by alignment and interference.
template <typename Scalar>
constexpr Scalar degenerate_norm() {
  return Scalar(1e-12);
}

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want)
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + ": expected " +
                                                  std::to_string(want) + ", got " +
                                                  std::to_string(got));
}

template <typename Derived>
typename Derived::Scalar orthonormality_error(const Eigen::MatrixBase<Derived>& columns) {
  using Scalar = typename Derived::Scalar;
  const auto k = columns.cols();
  Mat<Scalar> gram = columns.transpose() * columns;
  gram -= Mat<Scalar>::Identity(k, k);
  return k == 0 ? Scalar(0) : gram.cwiseAbs().maxCoeff();
}

// Flip each column so that its largest-magnitude entry is nonnegative. Ties
// resolve to the lowest row index.
template <typename Scalar>
void fix_column_signs(Mat<Scalar>& columns) {
  for (Eigen::Index j = 0; j < columns.cols(); ++j) {
    Eigen::Index arg = 0;
    columns.col(j).cwiseAbs().maxCoeff(&arg);
    if (columns(arg, j) < Scalar(0)) columns.col(j) = -columns.col(j);
  }
}

template <typename Scalar = double>
class RefusalBasis {
 public:
  RefusalBasis() = default;

  // Validates orthonormality; use orthonormalized() for raw input.
  explicit RefusalBasis(Mat<Scalar> columns, int layer = 0,
                        Scalar tolerance = orthonormality_tolerance<Scalar>())
      : columns_(std::move(columns)), layer_(layer) {
    if (columns_.cols() < 1 || columns_.cols() > columns_.rows())
      throw Error(ErrorCode::DimensionMismatch, "basis needs 1 <= k <= d");
    const Scalar err = orthonormality_error(columns_);
    if (!(err <= tolerance))
      throw Error(ErrorCode::DimensionMismatch,
                  "basis columns are not orthonormal (max deviation " + std::to_string(double(err)) + ")");
  }

  // Thin QR of the input followed by the sign rule.
  static RefusalBasis orthonormalized(const Mat<Scalar>& raw, int layer = 0) {
    if (raw.cols() < 1 || raw.cols() > raw.rows())
      throw Error(ErrorCode::DimensionMismatch, "basis needs 1 <= k <= d");
    Eigen::HouseholderQR<Mat<Scalar>> qr(raw);
    Mat<Scalar> q = qr.householderQ() * Mat<Scalar>::Identity(raw.rows(), raw.cols());
    fix_column_signs(q);
    return RefusalBasis(std::move(q), layer);
  }

  const Mat<Scalar>& columns() const { return columns_; }
  Eigen::Index dim_d() const { return columns_.rows(); }
  Eigen::Index dim_k() const { return columns_.cols(); }
  int layer() const { return layer_; }
  void set_layer(int layer) { layer_ = layer; }

 private:
  Mat<Scalar> columns_;
  int layer_ = 0;
};

enum class ProjectorKind { refusal, complement };

template <typename Scalar = double>
class Projector {
 public:
  Projector(const RefusalBasis<Scalar>& basis, ProjectorKind kind) : basis_(&basis), kind_(kind) {}

  Vec<Scalar> apply(const Vec<Scalar>& h) const {
    require_dim(h.size(), basis_->dim_d(), "projector input");
    const auto& b = basis_->columns();
    Vec<Scalar> par = b * (b.transpose() * h);
    return kind_ == ProjectorKind::refusal ? par : Vec<Scalar>(h - par);
  }

  Mat<Scalar> matrix() const {
    const auto& b = basis_->columns();
    Mat<Scalar> p = b * b.transpose();
    if (kind_ == ProjectorKind::complement) p = Mat<Scalar>::Identity(p.rows(), p.cols()) - p;
    return p;
  }

  ProjectorKind kind() const { return kind_; }

 private:
  const RefusalBasis<Scalar>* basis_;
  ProjectorKind kind_;
};

template <typename Scalar = double>
struct ConeCoordinates {
  Vec<Scalar> values;
  int source_prompt = -1;
};

template <typename Scalar = double>
struct UpdateDecomposition {
  Vec<Scalar> parallel;
  Vec<Scalar> orthogonal;
};

// A metric value that may be undefined for its input. Degenerate results are
// counted by aggregators and never averaged in.
template <typename Scalar = double>
struct Measured {
  Scalar value = Scalar(0);
  bool degenerate = false;
};

template <typename Scalar>
ConeCoordinates<Scalar> project_coords(const Vec<Scalar>& h, const RefusalBasis<Scalar>& basis,
                                       int source_prompt = -1) {
  require_dim(h.size(), basis.dim_d(), "project_coords");
  return {basis.columns().transpose() * h, source_prompt};
}

template <typename Scalar>
Scalar projected_magnitude(const ConeCoordinates<Scalar>& z) {
  return z.values.norm();
}

// Cosine between h and its projection; equals ||Ph|| / ||h||.
template <typename Scalar>
Measured<Scalar> alignment(const Vec<Scalar>& h, const RefusalBasis<Scalar>& basis) {
  require_dim(h.size(), basis.dim_d(), "alignment");
  const auto& b = basis.columns();
  const Vec<Scalar> ph = b * (b.transpose() * h);
  const Scalar nh = h.norm();
  const Scalar nph = ph.norm();
  if (nh <= degenerate_norm<Scalar>() || nph <= degenerate_norm<Scalar>()) return {Scalar(0), true};
  const Scalar cosine = h.dot(ph) / (nh * nph);
  return {std::clamp(cosine, Scalar(0), Scalar(1)), false};
}

// 1 - (1/k) * nuclear norm of B0^T Bt.
template <typename Scalar>
Scalar drift(const RefusalBasis<Scalar>& b0, const RefusalBasis<Scalar>& bt) {
  require_dim(bt.dim_d(), b0.dim_d(), "drift dimension");
  require_dim(bt.dim_k(), b0.dim_k(), "drift rank");
  const Mat<Scalar> overlap = b0.columns().transpose() * bt.columns();
  Eigen::JacobiSVD<Mat<Scalar>> svd(overlap);
  const Scalar nuclear = svd.singularValues().sum();
  const Scalar value = Scalar(1) - nuclear / Scalar(b0.dim_k());
  return std::clamp(value, Scalar(0), Scalar(1));
}

template <typename Scalar>
UpdateDecomposition<Scalar> decompose_update(const Vec<Scalar>& delta, const RefusalBasis<Scalar>& basis) {
  require_dim(delta.size(), basis.dim_d(), "decompose_update");
  const auto& b = basis.columns();
  Vec<Scalar> par = b * (b.transpose() * delta);
  Vec<Scalar> oth = delta - par;
  return {std::move(par), std::move(oth)};
}

// Fraction of the update norm lying in the subspace.
template <typename Scalar>
Measured<Scalar> interference(const Vec<Scalar>& delta, const RefusalBasis<Scalar>& basis) {
  require_dim(delta.size(), basis.dim_d(), "interference");
  const Scalar nd = delta.norm();
  if (nd <= degenerate_norm<Scalar>()) return {Scalar(0), true};
  const Scalar np = (basis.columns().transpose() * delta).norm();
  return {std::clamp(np / nd, Scalar(0), Scalar(1)), false};
}

template <typename Scalar>
Vec<Scalar> coordinate_mass(const ConeCoordinates<Scalar>& z, Scalar epsilon = Scalar(1e-12)) {
  const Vec<Scalar> a = z.values.cwiseAbs();
  return a / (a.sum() + epsilon);
}

template <typename Scalar>
Scalar coordinate_entropy(const ConeCoordinates<Scalar>& z, Scalar epsilon = Scalar(1e-12)) {
  const Vec<Scalar> p = coordinate_mass(z, epsilon);
  Scalar h = Scalar(0);
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (p(j) > Scalar(0)) h -= p(j) * std::log(p(j));
  return h;
}

template <typename Scalar>
Scalar top1_mass(const ConeCoordinates<Scalar>& z, Scalar epsilon = Scalar(1e-12)) {
  return coordinate_mass(z, epsilon).maxCoeff();
}

// Membership in the nonnegative cone spanned by the basis columns.
template <typename Scalar>
bool in_cone(const ConeCoordinates<Scalar>& z, Scalar tolerance = Scalar(1e-8)) {
  return (z.values.array() >= -tolerance).all();
}

}  // namespace rg
