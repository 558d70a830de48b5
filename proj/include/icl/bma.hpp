#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "icl/concept_model.hpp"

namespace icl {

// Log-domain posterior over concepts after `steps` observed tokens. Weights
// are kept normalized so exp(log_weights) sums to one.
struct PosteriorState {
  Eigen::VectorXd log_weights;
  Eigen::VectorXd cum_loglik;  // log P(x_1..x_steps | z)
  std::size_t steps = 0;

  Eigen::VectorXd weights() const { return log_weights.array().exp(); }
};

PosteriorState init_posterior(const LatentConceptModel& model);

// Bayes update with the token that follows `prefix`; prefix.size() must equal state.steps.
PosteriorState observe(const PosteriorState& state, const LatentConceptModel& model, std::span<const Token> prefix,
                       Token next_token);
// Folds tokens[state.steps, end) in one batch.
PosteriorState observe_all(const PosteriorState& state, const LatentConceptModel& model, std::span<const Token> tokens,
                           std::size_t end);

Eigen::VectorXd predict(const PosteriorState& state, const LatentConceptModel& model, std::span<const Token> prefix);

// Next-token predictor over a fixed alphabet.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual int alphabet_size() const = 0;
  virtual Eigen::VectorXd predict(std::span<const Token> prefix) const = 0;
  // log P(tokens[p] | tokens[0..p)) for every p in positions (increasing).
  virtual std::vector<double> log_probs(std::span<const Token> tokens, std::span<const std::size_t> positions) const;
  // log KL(target || predict(prefix)); -inf when the two agree exactly.
  virtual double log_kl_from(const Eigen::VectorXd& target, std::span<const Token> prefix) const;
};

class BmaPredictor final : public Predictor {
 public:
  explicit BmaPredictor(const LatentConceptModel& model) : model_(model) {}
  int alphabet_size() const override { return model_.alphabet_size(); }
  Eigen::VectorXd predict(std::span<const Token> prefix) const override;
  std::vector<double> log_probs(std::span<const Token> tokens, std::span<const std::size_t> positions) const override;
  // Stays accurate when the posterior puts mass far below machine epsilon on
  // every concept whose row differs from the target.
  double log_kl_from(const Eigen::VectorXd& target, std::span<const Token> prefix) const override;

 private:
  const LatentConceptModel& model_;
};

class ConceptPredictor final : public Predictor {
 public:
  ConceptPredictor(const LatentConceptModel& model, ConceptId z) : model_(model), z_(z) { model.check_concept(z); }
  int alphabet_size() const override { return model_.alphabet_size(); }
  Eigen::VectorXd predict(std::span<const Token> prefix) const override { return conditional(model_, z_, prefix); }

 private:
  const LatentConceptModel& model_;
  ConceptId z_;
};

class UniformPredictor final : public Predictor {
 public:
  explicit UniformPredictor(int alphabet_size) : alphabet_size_(alphabet_size) {}
  int alphabet_size() const override { return alphabet_size_; }
  Eigen::VectorXd predict(std::span<const Token>) const override {
    return Eigen::VectorXd::Constant(alphabet_size_, 1.0 / alphabet_size_);
  }

 private:
  int alphabet_size_;
};

// One entry per response position t = 1..n of a trajectory.
struct RegretCurve {
  std::vector<double> regret;
  std::vector<double> bound;             // log(1/prior(z_sup)) / t
  std::vector<double> cum_loglik_pred;
  std::vector<double> cum_loglik_best;
  std::vector<ConceptId> best_concept;   // concept attaining the sup at t
  std::vector<bool> infinite;            // predictor gave an observed response probability 0
  std::size_t size() const noexcept { return regret.size(); }
};

// regret_t = t^-1 max_z sum_{i<=t} log P(r_i | prompt_{i-1}, z) - t^-1 sum_{i<=t} log Phat(r_i).
RegretCurve regret(const LatentConceptModel& model, const TokenSequence& trajectory, const Predictor& predictor);

double regret_bound(const Eigen::VectorXd& prior, ConceptId z_star, std::size_t t);

// True when the BMA regret bound holds for every trajectory. Response-only
// regret differs from the joint Bayes identity when covariate laws depend on
// the concept.
bool bma_bound_is_sure(const LatentConceptModel& model) noexcept;

struct InequalityReport {
  double lhs = 0.0;  // t^-1 sum log P_bma(r_i | prompt_{i-1})
  double rhs = 0.0;  // max_z t^-1 (sum log P(r_i | prompt_{i-1}, z) + log P_Z(z))
  ConceptId argmax = 0;
  bool holds = false;
};

inline constexpr double kInequalityTol = 1e-9;

InequalityReport verify_bma_inequality(const LatentConceptModel& model, const TokenSequence& trajectory,
                                       std::size_t t);

}  // namespace icl
