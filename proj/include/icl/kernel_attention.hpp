#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class KernelKind { linear, rbf, exponential };

// linear: a.b, rbf: exp(-|a-b|^2 / (2 gamma^2)), exponential: exp(a.b / gamma).
struct Kernel {
  KernelKind kind = KernelKind::linear;
  double gamma = 1.0;

  static Kernel linear() { return {KernelKind::linear, 1.0}; }
  static Kernel rbf(double gamma) { return {KernelKind::rbf, gamma}; }
  static Kernel exponential(double gamma) { return {KernelKind::exponential, gamma}; }
};

std::string kernel_name(KernelKind kind);
KernelKind kernel_from_name(const std::string& name);

// Gram matrix k(a_i, b_j) between the rows of a and b.
template <typename DA, typename DB>
Mat<typename DA::Scalar> kernel_matrix(const Kernel& k, const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using Scalar = typename DA::Scalar;
  Mat<Scalar> dots = a * b.transpose();
  switch (k.kind) {
    case KernelKind::linear:
      return dots;
    case KernelKind::exponential:
      return (dots.array() / Scalar(k.gamma)).exp().matrix();
    case KernelKind::rbf: {
      const Vec<Scalar> na = a.rowwise().squaredNorm();
      const Vec<Scalar> nb = b.rowwise().squaredNorm();
      Mat<Scalar> d2 = (-Scalar(2) * dots).colwise() + na;
      d2.rowwise() += nb.transpose();
      return (-(d2.array().max(Scalar(0))) / Scalar(2 * k.gamma * k.gamma)).exp().matrix();
    }
  }
  throw std::invalid_argument("unknown kernel");
}

template <typename Scalar>
struct KernelScene {
  Mat<Scalar> keys;    // t x d_k
  Mat<Scalar> values;  // t x d_v
  Vec<Scalar> query;   // d_k
  Kernel kernel;
  Scalar ridge = Scalar(1);
  Scalar temperature = Scalar(1);

  Eigen::Index size() const noexcept { return keys.rows(); }

  // Throws ShapeMismatch or NonFiniteInput.
  void validate() const {
    if (keys.rows() < 1) throw ShapeMismatch("scene needs at least one key");
    if (values.rows() != keys.rows()) throw ShapeMismatch("keys and values have different row counts");
    if (query.size() != keys.cols()) throw ShapeMismatch("query dimension differs from key dimension");
    if (!keys.allFinite() || !values.allFinite() || !query.allFinite()) throw NonFiniteInput("scene has non-finite entries");
  }

  bool unit_norm(Scalar tol = Scalar(1e-9)) const {
    auto unit = [&](const auto& m) { return ((m.rowwise().norm().array() - Scalar(1)).abs() <= tol).all(); };
    return unit(keys) && unit(values) && std::abs(query.norm() - Scalar(1)) <= tol;
  }
};

// Record of the jitter added to a Gram system before it factorized.
struct SolveInfo {
  double jitter = 0.0;
  int attempts = 0;
};

// (G + ridge I)^{-1} rhs by Cholesky on the symmetrized system, escalating a
// diagonal jitter from 1e-12 to 1e-6 (relative to the mean diagonal) on failure.
template <typename Scalar>
Mat<Scalar> ridge_solve(const Mat<Scalar>& gram, Scalar ridge, const Mat<Scalar>& rhs, SolveInfo* info = nullptr) {
  if (!(ridge > Scalar(0))) throw std::invalid_argument("ridge must be positive");
  Mat<Scalar> a = Scalar(0.5) * (gram + gram.transpose());
  a.diagonal().array() += ridge;
  if (!a.allFinite()) throw NonFiniteInput("Gram matrix has non-finite entries");
  const Scalar scale = std::max(Scalar(1), a.diagonal().cwiseAbs().mean());
  double jitter = 0.0;
  for (int attempt = 0;; ++attempt) {
    Eigen::LLT<Mat<Scalar>> llt(a);
    if (llt.info() == Eigen::Success) {
      if (info) *info = {jitter, attempt + 1};
      return llt.solve(rhs);
    }
    const double next = jitter == 0.0 ? 1e-12 : jitter * 10.0;
    if (next > 1e-6 * (1 + 1e-9)) throw NonFiniteInput("Gram system is not positive definite after jitter 1e-6");
    a.diagonal().array() += Scalar(next - jitter) * scale;
    jitter = next;
  }
}

// attn_dagger(q, K, V) = V^T (k(K, K) + ridge I)^{-1} k(K, q).
template <typename Scalar>
Vec<Scalar> attn_dagger(const KernelScene<Scalar>& s, SolveInfo* info = nullptr) {
  s.validate();
  const Mat<Scalar> gram = kernel_matrix(s.kernel, s.keys, s.keys);
  const Mat<Scalar> kq = kernel_matrix(s.kernel, s.keys, s.query.transpose());
  return s.values.transpose() * ridge_solve<Scalar>(gram, s.ridge, kq, info);
}

// Attention weights softmax(K q / temperature).
template <typename Scalar>
Vec<Scalar> softmax_weights(const KernelScene<Scalar>& s) {
  Vec<Scalar> logits = (s.keys * s.query) / s.temperature;
  logits.array() -= logits.maxCoeff();
  Vec<Scalar> w = logits.array().exp();
  return w / w.sum();
}

template <typename Scalar>
Vec<Scalar> softmax_attention(const KernelScene<Scalar>& s) {
  s.validate();
  return s.values.transpose() * softmax_weights(s);
}

// Representer form of the mean concept: z_bar(phi(q)) = weights * k(K, q).
template <typename Scalar>
struct MeanConcept {
  Mat<Scalar> keys;
  Mat<Scalar> weights;  // d_v x t, V^T (k(K,K) + ridge I)^{-1}
  Kernel kernel;

  Vec<Scalar> apply(const Vec<Scalar>& query) const {
    return weights * kernel_matrix(kernel, keys, query.transpose());
  }
};

template <typename Scalar>
MeanConcept<Scalar> posterior_mean_concept(const Mat<Scalar>& keys, const Mat<Scalar>& values, Scalar ridge,
                                           const Kernel& kernel = Kernel::linear()) {
  if (keys.rows() != values.rows()) throw ShapeMismatch("keys and values have different row counts");
  const Mat<Scalar> gram = kernel_matrix(kernel, keys, keys);
  // (G + ridge I) is symmetric, so V^T (G + ridge I)^{-1} = ((G + ridge I)^{-1} V)^T.
  return {keys, ridge_solve<Scalar>(gram, ridge, values).transpose(), kernel};
}

// Linear-kernel ridge solution computed in feature space: V^T Phi (Phi^T Phi + ridge I)^{-1} phi(q).
template <typename Scalar>
Vec<Scalar> feature_ridge(const Mat<Scalar>& features, const Mat<Scalar>& values, const Vec<Scalar>& query_feature,
                          Scalar ridge) {
  const Mat<Scalar> gram = features.transpose() * features;
  return values.transpose() * (features * ridge_solve<Scalar>(gram, ridge, query_feature));
}

// v_t = z_star phi(k_t) + N(0, sigma^2 I), with prior z_star rows ~ N(0, prior_lambda I).
struct GaussianLinearTask {
  Eigen::MatrixXd z_star;  // d_v x d_phi
  double noise_sigma = 1.0;
  double prior_lambda = 1.0;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> feature_map;  // identity when empty

  void validate() const;
  Eigen::VectorXd phi(const Eigen::VectorXd& key) const { return feature_map ? feature_map(key) : key; }
  Eigen::MatrixXd features(const Eigen::MatrixXd& keys) const;  // rows phi(k_i)
  // Ridge that makes attn_dagger (linear kernel on features) reproduce the posterior mean.
  double equivalent_ridge() const { return noise_sigma * noise_sigma / prior_lambda; }
};

Eigen::MatrixXd sample_gaussian_linear(const GaussianLinearTask& task, const Eigen::MatrixXd& keys, Rng& rng);

// Posterior over z_star: each row independent N(mean row, row_covariance).
struct GaussianPosterior {
  Eigen::MatrixXd mean;            // d_v x d_phi
  Eigen::MatrixXd row_covariance;  // d_phi x d_phi
};

GaussianPosterior gaussian_posterior(const GaussianLinearTask& task, const Eigen::MatrixXd& keys,
                                     const Eigen::MatrixXd& values);

struct GaussianPredictive {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

GaussianPredictive gaussian_predictive(const GaussianLinearTask& task, const Eigen::MatrixXd& keys,
                                       const Eigen::MatrixXd& values, const Eigen::VectorXd& query);

struct ConvergenceConfig {
  std::vector<std::size_t> t_grid = {16, 64, 256, 1024, 4096};
  int d_k = 8;
  int d_v = 8;
  std::size_t trials = 64;
  double gamma = 1.0;
  double ridge_exponent = 0.75;  // ridge = T^exponent
  unsigned threads = 1;
};

struct ConvergencePoint {
  std::size_t t = 0;
  double mean_distance = 0.0;
  double sem = 0.0;
  double fitted_c_mean = 0.0;
  std::size_t resampled = 0;    // trials whose values were all identical
  std::size_t jittered = 0;     // trials whose Gram solve needed jitter
};

// Residual e(T) = min_C |attn_dagger - C softmax_attention| on unit-sphere scenes.
std::vector<ConvergencePoint> convergence_experiment(const ConvergenceConfig& config, const Rng& rng);

// Distance of attn_dagger from its best multiple of softmax attention, and that multiple.
struct FittedResidual {
  double distance = 0.0;
  double c = 0.0;
};
FittedResidual fitted_residual(const Eigen::VectorXd& dagger, const Eigen::VectorXd& softmax);

struct SphereIntegral {
  Eigen::VectorXd estimate;  // Monte Carlo value of the integral over S^{d-1} of a exp(a.b / gamma)
  double cosine = 0.0;       // cosine between estimate and b
  double orthogonal_ratio = 0.0;  // |component orthogonal to b| / |estimate|
  double c1 = 0.0;           // estimate . b
};

SphereIntegral sphere_integral_check(const Eigen::VectorXd& b, double gamma, std::size_t n_samples, Rng& rng);

double sphere_area(int d);

}  // namespace icl
