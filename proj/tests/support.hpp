#pragma once

// Small helpers shared by the test files.

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "refusalguard/geometry.hpp"
#include "refusalguard/model.hpp"
#include "refusalguard/rng.hpp"

namespace rgtest {

inline rg::RefusalBasis<double> random_basis(rg::Rng& rng, Eigen::Index d, Eigen::Index k) {
  return rg::RefusalBasis<double>::orthonormalized(rng.gaussian(d, k));
}

// Unit vector orthogonal to span(b).
inline Eigen::VectorXd orthogonal_to(const rg::RefusalBasis<double>& b, rg::Rng& rng) {
  Eigen::VectorXd v = rng.gaussian(b.dim_d());
  v -= b.columns() * (b.columns().transpose() * v);
  return v.normalized();
}

// Central difference at zero; `f` maps an offset to a value.
template <class F>
double central_difference(F&& f, double h) {
  return (f(h) - f(-h)) / (2.0 * h);
}

// Fourth-order variant, for checks where round-off at small steps dominates.
template <class F>
double central_difference4(F&& f, double h) {
  return (8.0 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12.0 * h);
}

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("rg_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Small instance used for gradient checks and fast trainer tests.
inline rg::ModelConfig small_model_config(std::uint64_t seed = 3) {
  rg::ModelConfig c;
  c.vocab_size = 16;
  c.dim = 16;
  c.layers = 2;
  c.hidden = 24;
  c.seed = seed;
  c.planted_rank = 2;
  return c;
}

}  // namespace rgtest
