#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "icl/errors.hpp"

namespace icl {

// A divergence value that may be +infinity. Infinity is carried as a flag so
// it never leaks into an arithmetic mean.
struct Divergence {
  double value = 0.0;
  bool infinite = false;

  static Divergence inf() { return {std::numeric_limits<double>::infinity(), true}; }
};

// Validated probability vector: entries >= 0, sum within 1e-12 of one.
class FiniteDistribution {
 public:
  explicit FiniteDistribution(Eigen::VectorXd probs, double tol = 1e-12);

  const Eigen::VectorXd& probs() const noexcept { return probs_; }
  Eigen::Index support_size() const noexcept { return probs_.size(); }
  double operator[](Eigen::Index i) const { return probs_[i]; }

 private:
  Eigen::VectorXd probs_;
};

bool is_probability_vector(const Eigen::Ref<const Eigen::VectorXd>& p, double tol = 1e-10);

namespace detail {
template <typename A, typename B>
void require_same_support(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
  if (p.size() != q.size()) {
    throw SupportMismatch("distributions have support sizes " + std::to_string(p.size()) +
                          " and " + std::to_string(q.size()));
  }
}
}  // namespace detail

/// Total variation, (1/2) sum |p_i - q_i|.
template <typename A, typename B>
typename A::Scalar tv(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
  detail::require_same_support(p, q);
  using Scalar = typename A::Scalar;
  return Scalar(0.5) * (p - q).cwiseAbs().sum();
}

/// KL(p || q) in nats with 0 log 0 = 0. Flagged infinite when q_i = 0 < p_i.
template <typename A, typename B>
Divergence kl(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
  detail::require_same_support(p, q);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p(i));
    if (pi <= 0.0) continue;
    const double qi = static_cast<double>(q(i));
    if (qi <= 0.0) return Divergence::inf();
    acc += pi * std::log(pi / qi);
  }
  // Rounding can push a true zero slightly negative.
  return {acc < 0.0 ? 0.0 : acc, false};
}

template <typename A>
typename A::Scalar entropy(const Eigen::MatrixBase<A>& p) {
  using Scalar = typename A::Scalar;
  Scalar acc(0);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > Scalar(0)) acc -= p(i) * std::log(p(i));
  }
  return acc;
}

struct LemmaReport {
  double kl = 0.0;
  double tv = 0.0;
  double b = 0.0;             // sup_x log(p(x)/q(x)) over the support of p
  double kl_tv_bound = 0.0;   // 2 (3 + b) TV
  double pinsker_bound = 0.0; // sqrt(KL / 2)
  bool kl_tv_holds = false;
  bool pinsker_holds = false;
  bool holds() const noexcept { return kl_tv_holds && pinsker_holds; }
};

// Checks KL(p||q) <= 2 (3 + b) TV(p, q) and Pinsker TV <= sqrt(KL/2).
// Requires q entrywise > 0.
LemmaReport tv_kl_lemma_check(const Eigen::Ref<const Eigen::VectorXd>& p,
                              const Eigen::Ref<const Eigen::VectorXd>& q);

struct Summary {
  double mean = 0.0;
  double sem = 0.0;         // standard error of the mean
  std::size_t count = 0;    // finite values aggregated
  std::size_t flagged = 0;  // infinite values skipped
};

Summary summarize(std::span<const double> values);
Summary summarize(std::span<const Divergence> values);

double median(std::vector<double> values);

// log(sum_i exp(x_i)), -inf for an empty or all -inf input.
double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& x);

}  // namespace icl
