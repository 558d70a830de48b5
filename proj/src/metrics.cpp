#include "icl/metrics.hpp"

#include <algorithm>
#include <numeric>

namespace icl {

FiniteDistribution::FiniteDistribution(Eigen::VectorXd probs, double tol) : probs_(std::move(probs)) {
  if (probs_.size() == 0) throw InvalidModel("empty distribution");
  if ((probs_.array() < 0.0).any() || !probs_.allFinite()) {
    throw InvalidModel("distribution has negative or non-finite entries");
  }
  if (std::abs(probs_.sum() - 1.0) > tol) {
    throw InvalidModel("distribution sums to " + std::to_string(probs_.sum()));
  }
}

bool is_probability_vector(const Eigen::Ref<const Eigen::VectorXd>& p, double tol) {
  return p.size() > 0 && p.allFinite() && (p.array() >= 0.0).all() && std::abs(p.sum() - 1.0) <= tol;
}

LemmaReport tv_kl_lemma_check(const Eigen::Ref<const Eigen::VectorXd>& p,
                              const Eigen::Ref<const Eigen::VectorXd>& q) {
  detail::require_same_support(p, q);
  if ((q.array() <= 0.0).any()) throw SupportMismatch("tv_kl_lemma_check requires q > 0");

  LemmaReport r;
  r.tv = tv(p, q);
  r.kl = kl(p, q).value;
  double b = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) b = std::max(b, std::log(p[i] / q[i]));
  }
  r.b = b;
  r.kl_tv_bound = 2.0 * (3.0 + b) * r.tv;
  r.pinsker_bound = std::sqrt(r.kl / 2.0);
  constexpr double slack = 1e-12;
  r.kl_tv_holds = r.kl <= r.kl_tv_bound + slack;
  r.pinsker_holds = r.tv <= r.pinsker_bound + slack;
  return r;
}

namespace {
Summary summarize_finite(const std::vector<double>& xs, std::size_t flagged) {
  Summary s;
  s.count = xs.size();
  s.flagged = flagged;
  if (xs.empty()) return s;
  const double n = static_cast<double>(xs.size());
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sem = std::sqrt(ss / (n - 1.0) / n);
  }
  return s;
}
}  // namespace

Summary summarize(std::span<const double> values) {
  std::vector<double> xs;
  std::size_t flagged = 0;
  for (double v : values) {
    if (std::isfinite(v)) xs.push_back(v);
    else ++flagged;
  }
  return summarize_finite(xs, flagged);
}

Summary summarize(std::span<const Divergence> values) {
  std::vector<double> xs;
  std::size_t flagged = 0;
  for (const auto& v : values) {
    if (v.infinite) ++flagged;
    else xs.push_back(v.value);
  }
  return summarize_finite(xs, flagged);
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() == 0) return -std::numeric_limits<double>::infinity();
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace icl
