#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>

namespace icl {

// Seeded random stream. Streams are never shared between tasks; derive a
// child stream per task with fork() so results do not depend on scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  // Independent child stream keyed by (seed, index).
  Rng fork(std::uint64_t index) const;

  double uniform();                       // [0, 1)
  double normal();                        // N(0, 1)
  std::uint64_t uniform_int(std::uint64_t n);  // {0, ..., n-1}
  bool bernoulli(double p);
  double gamma(double shape);

  // Index drawn from unnormalized non-negative weights.
  int categorical(const Eigen::Ref<const Eigen::VectorXd>& weights);

  Eigen::VectorXd dirichlet(int k, double alpha = 1.0);
  Eigen::VectorXd normal_vector(int n);
  Eigen::MatrixXd normal_matrix(int rows, int cols);
  // Uniform on the unit sphere S^{n-1}.
  Eigen::VectorXd unit_sphere(int n);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace icl
