#include <cmath>

#include <doctest.h>

#include "refusalguard/geometry.hpp"
#include "support.hpp"

using namespace rg;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr int kCases = 250;

ConeCoordinates<double> coords(std::initializer_list<double> v) {
  ConeCoordinates<double> z;
  z.values = VectorXd::Map(v.begin(), static_cast<Eigen::Index>(v.size()));
  return z;
}

RefusalBasis<double> axes(int d, std::initializer_list<int> which) {
  MatrixXd c = MatrixXd::Zero(d, static_cast<Eigen::Index>(which.size()));
  int j = 0;
  for (int i : which) c(i, j++) = 1.0;
  return RefusalBasis<double>(c);
}

// Random k x k orthogonal matrix.
MatrixXd random_rotation(Rng& rng, Eigen::Index k) {
  Eigen::HouseholderQR<MatrixXd> qr(rng.gaussian(k, k));
  return qr.householderQ() * MatrixXd::Identity(k, k);
}

}  // namespace

TEST_CASE("basis construction validates orthonormality") {
  MatrixXd bad(3, 2);
  bad << 1, 1, 0, 0, 0, 0;
  CHECK_THROWS_AS(RefusalBasis<double>{bad}, Error);
  CHECK_THROWS_AS(RefusalBasis<double>(MatrixXd::Identity(3, 4)), Error);
  MatrixXd raw(3, 2);
  raw << 2, 1, 0, 1, 0, 0;
  const auto b = RefusalBasis<double>::orthonormalized(raw);
  CHECK(orthonormality_error(b.columns()) <= 1e-12);
  // Sign rule: the largest-magnitude entry of each column is positive.
  CHECK(b.columns()(0, 0) == doctest::Approx(1.0));
  CHECK(b.columns()(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("projection coordinates and magnitudes") {
  const auto b = axes(3, {0, 1});
  const auto z = project_coords<double>(Eigen::Vector3d(3, 4, 5), b);
  CHECK(z.values(0) == doctest::Approx(3.0));
  CHECK(z.values(1) == doctest::Approx(4.0));
  CHECK(projected_magnitude(z) == doctest::Approx(5.0));
  CHECK(projected_magnitude(project_coords<double>(VectorXd::Zero(3), b)) == 0.0);
  // sqrt(0.2116 + 0.0529 + 0.0289 + 0.0196) = sqrt(0.313)
  CHECK(projected_magnitude(coords({0.46, 0.23, 0.17, 0.14})) == doctest::Approx(0.559464).epsilon(1e-6));

  // Random d=8, k=3 case against an explicit dense product.
  Rng rng(101);
  const auto rb = rgtest::random_basis(rng, 8, 3);
  const VectorXd h = rng.gaussian(8);
  const auto rz = project_coords(h, rb);
  for (int j = 0; j < 3; ++j) {
    double acc = 0.0;
    for (int i = 0; i < 8; ++i) acc += rb.columns()(i, j) * h(i);
    CHECK(rz.values(j) == doctest::Approx(acc).epsilon(1e-14));
  }
}

TEST_CASE("alignment examples") {
  const auto b = axes(3, {0, 1});
  const auto a = alignment<double>(Eigen::Vector3d(3, 4, 5), b);
  CHECK_FALSE(a.degenerate);
  CHECK(a.value == doctest::Approx(5.0 / std::sqrt(50.0)).epsilon(1e-12));
  CHECK(a.value == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(alignment<double>(Eigen::Vector3d(2, -1, 0), b).value == doctest::Approx(1.0));
  CHECK(alignment<double>(Eigen::Vector3d(0, 0, 1), b).degenerate);
  CHECK(alignment<double>(VectorXd::Zero(3), b).degenerate);
}

TEST_CASE("drift examples") {
  const auto b = axes(3, {0});
  CHECK(drift(b, b) == doctest::Approx(0.0));
  CHECK(drift(b, axes(3, {1})) == doctest::Approx(1.0));
  const double c = std::cos(M_PI / 3), s = std::sin(M_PI / 3);
  MatrixXd rot(3, 1);
  rot << c, s, 0;
  CHECK(drift(b, RefusalBasis<double>(rot)) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(drift(b, axes(4, {0})), Error);
  CHECK_THROWS_AS(drift(axes(3, {0, 1}), b), Error);
}

TEST_CASE("update decomposition and interference examples") {
  const auto b = axes(3, {0});
  const auto dec = decompose_update<double>(Eigen::Vector3d(1, 1, 0), b);
  CHECK(dec.parallel.isApprox(Eigen::Vector3d(1, 0, 0)));
  CHECK(dec.orthogonal.isApprox(Eigen::Vector3d(0, 1, 0)));
  CHECK(interference<double>(Eigen::Vector3d(1, 1, 0), b).value == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(interference<double>(Eigen::Vector3d(-2, 0, 0), b).value == doctest::Approx(1.0));
  CHECK(interference<double>(Eigen::Vector3d(0, 3, 1), b).value == doctest::Approx(0.0));
  CHECK(interference<double>(VectorXd::Zero(3), b).degenerate);
  CHECK_THROWS_AS(decompose_update<double>(VectorXd::Zero(4), b), Error);
}

TEST_CASE("coordinate entropy and top-1 mass examples") {
  const auto uniform = coords({0.25, 0.25, 0.25, 0.25});
  const auto onehot = coords({1, 0, 0, 0});
  const auto mixed = coords({0.46, 0.23, 0.17, 0.14});
  CHECK(std::abs(coordinate_entropy(uniform) - std::log(4.0)) < 1e-9);
  CHECK(std::abs(coordinate_entropy(onehot)) < 1e-9);
  CHECK(coordinate_entropy(mixed) == doctest::Approx(1.2717).epsilon(1e-4));
  CHECK(top1_mass(uniform) == doctest::Approx(0.25));
  CHECK(top1_mass(onehot) == doctest::Approx(1.0));
  CHECK(top1_mass(mixed) == doctest::Approx(0.46));
  // Signs do not matter for the mass distribution.
  CHECK(coordinate_entropy(coords({-0.46, 0.23, -0.17, 0.14})) == doctest::Approx(coordinate_entropy(mixed)));
  CHECK(in_cone(mixed));
  CHECK_FALSE(in_cone(coords({0.5, -0.1})));
}

TEST_CASE("property: projectors are complementary idempotent maps") {
  Rng rng(1);
  for (int c = 0; c < kCases; ++c) {
    const Eigen::Index d = rng.range(2, 24), k = rng.range(1, static_cast<int>(d));
    const auto b = rgtest::random_basis(rng, d, k);
    REQUIRE(orthonormality_error(b.columns()) <= 1e-8);
    const MatrixXd pr = Projector<double>(b, ProjectorKind::refusal).matrix();
    const MatrixXd pc = Projector<double>(b, ProjectorKind::complement).matrix();
    CHECK((pr + pc - MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((pr * pr - pr).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((pc * pc - pc).cwiseAbs().maxCoeff() <= 1e-10);
    const VectorXd h = 3.0 * rng.gaussian(d);
    const VectorXd par = Projector<double>(b, ProjectorKind::refusal).apply(h);
    const VectorXd orth = Projector<double>(b, ProjectorKind::complement).apply(h);
    CHECK((par + orth - h).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(std::abs(projected_magnitude(project_coords(h, b)) - par.norm()) <= 1e-10);
    const auto dec = decompose_update(h, b);
    CHECK((dec.parallel - par).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(std::abs(dec.parallel.dot(dec.orthogonal)) <= 1e-9);
  }
}

TEST_CASE("property: drift is bounded, symmetric and rotation invariant") {
  Rng rng(2);
  for (int c = 0; c < kCases; ++c) {
    const Eigen::Index d = rng.range(2, 24), k = rng.range(1, static_cast<int>(d));
    const auto b0 = rgtest::random_basis(rng, d, k);
    const auto bt = rgtest::random_basis(rng, d, k);
    const double dr = drift(b0, bt);
    CHECK(dr >= -1e-12);
    CHECK(dr <= 1.0 + 1e-12);
    CHECK(std::abs(drift(b0, b0)) <= 1e-12);
    CHECK(std::abs(dr - drift(bt, b0)) <= 1e-12);
    const RefusalBasis<double> rotated(MatrixXd(bt.columns() * random_rotation(rng, k)));
    CHECK(std::abs(dr - drift(b0, rotated)) <= 1e-8);
    const RefusalBasis<double> rotated0(MatrixXd(b0.columns() * random_rotation(rng, k)));
    CHECK(std::abs(dr - drift(rotated0, bt)) <= 1e-8);
    CHECK(std::abs(drift(b0, rotated0)) <= 1e-8);
  }
}

TEST_CASE("property: alignment and interference are scale invariant") {
  Rng rng(3);
  for (int c = 0; c < kCases; ++c) {
    const Eigen::Index d = rng.range(2, 24), k = rng.range(1, static_cast<int>(d) - 1);
    const auto b = rgtest::random_basis(rng, d, k);
    const VectorXd h = rng.gaussian(d);
    const double scale = std::exp(4.0 * (rng.uniform() - 0.5));
    const auto a = alignment(h, b);
    REQUIRE_FALSE(a.degenerate);
    CHECK(a.value >= 0.0);
    CHECK(a.value <= 1.0 + 1e-12);
    CHECK(std::abs(alignment(VectorXd(scale * h), b).value - a.value) <= 1e-12);
    // Cosine form equals the norm ratio.
    const VectorXd ph = b.columns() * (b.columns().transpose() * h);
    CHECK(std::abs(a.value - ph.norm() / h.norm()) <= 1e-12);

    const double signed_scale = rng.uniform() < 0.5 ? -scale : scale;
    const auto i1 = interference(h, b);
    CHECK(i1.value >= 0.0);
    CHECK(i1.value <= 1.0 + 1e-12);
    CHECK(std::abs(interference(VectorXd(signed_scale * h), b).value - i1.value) <= 1e-12);
    CHECK(alignment(rgtest::orthogonal_to(b, rng), b).degenerate);
  }
}

TEST_CASE("property: entropy and top-1 bounds") {
  Rng rng(4);
  for (int c = 0; c < kCases; ++c) {
    const int k = rng.range(1, 16);
    ConeCoordinates<double> z;
    z.values = rng.gaussian(k);
    if (c % 5 == 0 && k > 1) z.values(rng.range(0, k - 1)) = 0.0;
    const double h = coordinate_entropy(z);
    const double t = top1_mass(z);
    CHECK(h >= -1e-12);
    CHECK(h <= std::log(double(k)) + 1e-6);
    CHECK(t >= 1.0 / k - 1e-6);
    CHECK(t <= 1.0 + 1e-12);
    CHECK(std::abs(coordinate_mass(z).sum() - 1.0) <= 1e-9);
  }
}

TEST_CASE("float instantiation agrees with double") {
  Rng rng(5);
  const auto b = rgtest::random_basis(rng, 12, 3);
  const RefusalBasis<float> bf(b.columns().cast<float>(), 0, 1e-5f);
  const VectorXd h = rng.gaussian(12);
  const Eigen::VectorXf hf = h.cast<float>();
  CHECK(alignment(hf, bf).value == doctest::Approx(alignment(h, b).value).epsilon(1e-5));
  CHECK(drift(bf, bf) == doctest::Approx(0.0f).epsilon(1e-5));
}
