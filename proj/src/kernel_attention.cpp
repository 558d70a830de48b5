#include "icl/kernel_attention.hpp"

#include <cmath>
#include <numbers>

#include "icl/metrics.hpp"
#include "icl/parallel.hpp"

namespace icl {

std::string kernel_name(KernelKind kind) {
  switch (kind) {
    case KernelKind::linear: return "linear";
    case KernelKind::rbf: return "rbf";
    case KernelKind::exponential: return "exponential";
  }
  return "unknown";
}

KernelKind kernel_from_name(const std::string& name) {
  if (name == "linear") return KernelKind::linear;
  if (name == "rbf") return KernelKind::rbf;
  if (name == "exponential") return KernelKind::exponential;
  throw std::invalid_argument("unknown kernel '" + name + "'");
}

void GaussianLinearTask::validate() const {
  if (!(noise_sigma > 0.0)) throw std::invalid_argument("noise_sigma must be positive");
  if (!(prior_lambda > 0.0)) throw std::invalid_argument("prior_lambda must be positive");
}

Eigen::MatrixXd GaussianLinearTask::features(const Eigen::MatrixXd& keys) const {
  if (keys.rows() == 0) return Eigen::MatrixXd(0, z_star.cols());
  Eigen::VectorXd first = phi(keys.row(0).transpose());
  Eigen::MatrixXd f(keys.rows(), first.size());
  f.row(0) = first.transpose();
  for (Eigen::Index i = 1; i < keys.rows(); ++i) f.row(i) = phi(keys.row(i).transpose()).transpose();
  return f;
}

Eigen::MatrixXd sample_gaussian_linear(const GaussianLinearTask& task, const Eigen::MatrixXd& keys, Rng& rng) {
  task.validate();
  if (!keys.allFinite()) throw NonFiniteInput("keys have non-finite entries");
  const Eigen::MatrixXd f = task.features(keys);
  if (f.cols() != task.z_star.cols()) throw ShapeMismatch("feature dimension differs from z_star columns");
  Eigen::MatrixXd values = f * task.z_star.transpose();
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    for (Eigen::Index j = 0; j < values.cols(); ++j) values(i, j) += task.noise_sigma * rng.normal();
  return values;
}

GaussianPosterior gaussian_posterior(const GaussianLinearTask& task, const Eigen::MatrixXd& keys,
                                     const Eigen::MatrixXd& values) {
  task.validate();
  const Eigen::Index dphi = task.z_star.cols();
  const Eigen::Index dv = task.z_star.rows();
  if (keys.rows() == 0) return {Eigen::MatrixXd::Zero(dv, dphi), task.prior_lambda * Eigen::MatrixXd::Identity(dphi, dphi)};
  if (values.rows() != keys.rows() || values.cols() != dv) throw ShapeMismatch("values do not match keys or z_star");
  const Eigen::MatrixXd f = task.features(keys);
  const double sigma2 = task.noise_sigma * task.noise_sigma;
  const Eigen::MatrixXd gram = f.transpose() * f;
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(dphi, dphi);
  // Posterior precision is (Phi^T Phi + sigma^2/lambda I) / sigma^2.
  const Eigen::MatrixXd inv = ridge_solve<double>(gram, task.equivalent_ridge(), id);
  return {values.transpose() * f * inv, sigma2 * inv};
}

GaussianPredictive gaussian_predictive(const GaussianLinearTask& task, const Eigen::MatrixXd& keys,
                                       const Eigen::MatrixXd& values, const Eigen::VectorXd& query) {
  const GaussianPosterior post = gaussian_posterior(task, keys, values);
  const Eigen::VectorXd f = task.phi(query);
  const double var = f.dot(post.row_covariance * f) + task.noise_sigma * task.noise_sigma;
  const Eigen::Index dv = task.z_star.rows();
  return {post.mean * f, var * Eigen::MatrixXd::Identity(dv, dv)};
}

FittedResidual fitted_residual(const Eigen::VectorXd& dagger, const Eigen::VectorXd& softmax) {
  const double ss = softmax.squaredNorm();
  const double c = ss > 0.0 ? dagger.dot(softmax) / ss : 0.0;
  return {(dagger - c * softmax).norm(), c};
}

namespace {

Eigen::MatrixXd sphere_rows(Rng& rng, std::size_t rows, int d) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), d);
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) = rng.unit_sphere(d).transpose();
  return m;
}

bool all_rows_identical(const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 1; i < m.rows(); ++i)
    if (m.row(i) != m.row(0)) return false;
  return true;
}

struct TrialOutcome {
  double distance = 0.0;
  double c = 0.0;
  bool resampled = false;
  bool jittered = false;
};

}  // namespace

std::vector<ConvergencePoint> convergence_experiment(const ConvergenceConfig& cfg, const Rng& rng) {
  if (cfg.trials == 0) throw std::invalid_argument("convergence experiment needs at least one trial");
  for (std::size_t t : cfg.t_grid)
    if (t < 2) throw std::invalid_argument("every grid point must be at least 2");
  std::vector<ConvergencePoint> curve;
  for (std::size_t gi = 0; gi < cfg.t_grid.size(); ++gi) {
    const std::size_t t = cfg.t_grid[gi];
    std::vector<TrialOutcome> outcomes(cfg.trials);
    parallel_for(cfg.trials, cfg.threads, [&](std::size_t trial) {
      Rng local = rng.fork(gi * cfg.trials + trial);
      KernelScene<double> scene;
      scene.kernel = Kernel::rbf(cfg.gamma);
      scene.ridge = std::pow(static_cast<double>(t), cfg.ridge_exponent);
      scene.keys = sphere_rows(local, t, cfg.d_k);
      scene.values = sphere_rows(local, t, cfg.d_v);
      TrialOutcome& out = outcomes[trial];
      while (all_rows_identical(scene.values)) {
        scene.values = sphere_rows(local, t, cfg.d_v);
        out.resampled = true;
      }
      scene.query = local.unit_sphere(cfg.d_k);
      SolveInfo info;
      const auto fit = fitted_residual(attn_dagger(scene, &info), softmax_attention(scene));
      out.distance = fit.distance;
      out.c = fit.c;
      out.jittered = info.jitter > 0.0;
    });
    ConvergencePoint p;
    p.t = t;
    std::vector<double> d, c;
    for (const auto& o : outcomes) {
      d.push_back(o.distance);
      c.push_back(o.c);
      p.resampled += o.resampled;
      p.jittered += o.jittered;
    }
    const Summary sd = summarize(d);
    p.mean_distance = sd.mean;
    p.sem = sd.sem;
    p.fitted_c_mean = summarize(c).mean;
    curve.push_back(p);
  }
  return curve;
}

double sphere_area(int d) {
  return 2.0 * std::pow(std::numbers::pi, d / 2.0) / std::tgamma(d / 2.0);
}

SphereIntegral sphere_integral_check(const Eigen::VectorXd& b, double gamma, std::size_t n_samples, Rng& rng) {
  if (n_samples < 1000) throw std::invalid_argument("sphere integral check needs at least 1000 samples");
  if (std::abs(b.norm() - 1.0) > 1e-9) throw std::invalid_argument("b must be a unit vector");
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  const int d = static_cast<int>(b.size());
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < n_samples; ++i) {
    // Antithetic pair (a, -a).
    const Eigen::VectorXd a = rng.unit_sphere(d);
    acc += a * (0.5 * (std::exp(a.dot(b) / gamma) - std::exp(-a.dot(b) / gamma)));
  }
  SphereIntegral r;
  r.estimate = acc * (sphere_area(d) / static_cast<double>(n_samples));
  const double norm = r.estimate.norm();
  r.c1 = r.estimate.dot(b);
  r.cosine = norm > 0.0 ? r.c1 / norm : 0.0;
  r.orthogonal_ratio = norm > 0.0 ? (r.estimate - r.c1 * b).norm() / norm : 0.0;
  return r;
}

}  // namespace icl
