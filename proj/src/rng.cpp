#include "icl/rng.hpp"

#include <stdexcept>

namespace icl {

namespace {
std::mt19937_64 make_engine(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  return std::mt19937_64(seq);
}
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(make_engine(seed)) {}

Rng Rng::fork(std::uint64_t index) const {
  // splitmix64 finalizer over (seed, index)
  std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return Rng(z ^ (z >> 31));
}

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int over an empty range");
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

double Rng::gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

int Rng::categorical(const Eigen::Ref<const Eigen::VectorXd>& weights) {
  const double total = weights.sum();
  if (!(total > 0.0)) throw std::invalid_argument("categorical with zero total weight");
  const double u = uniform() * total;
  double acc = 0.0;
  int last_positive = -1;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = static_cast<int>(i);
    if (u < acc) return last_positive;
  }
  return last_positive;
}

Eigen::VectorXd Rng::dirichlet(int k, double alpha) {
  Eigen::VectorXd g(k);
  for (int i = 0; i < k; ++i) g[i] = gamma(alpha);
  const double s = g.sum();
  if (!(s > 0.0)) return Eigen::VectorXd::Constant(k, 1.0 / k);
  return g / s;
}

Eigen::VectorXd Rng::normal_vector(int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = normal();
  return v;
}

Eigen::MatrixXd Rng::normal_matrix(int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = normal();
  return m;
}

Eigen::VectorXd Rng::unit_sphere(int n) {
  for (;;) {
    Eigen::VectorXd v = normal_vector(n);
    const double norm = v.norm();
    if (norm > 1e-300) return v / norm;
  }
}

}  // namespace icl
