#include "icl/bma.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icl/errors.hpp"
#include "icl/metrics.hpp"

namespace icl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

Eigen::VectorXd normalized(Eigen::VectorXd lw) {
  const double norm = log_sum_exp(lw);
  if (!std::isfinite(norm)) throw ImpossibleObservation("observed token has probability zero under every concept");
  return lw.array() - norm;
}

}  // namespace

PosteriorState init_posterior(const LatentConceptModel& model) {
  PosteriorState s;
  s.log_weights = model.prior().array().log();
  s.cum_loglik = Eigen::VectorXd::Zero(model.num_concepts());
  return s;
}

PosteriorState observe(const PosteriorState& state, const LatentConceptModel& model, std::span<const Token> prefix,
                       Token next_token) {
  if (prefix.size() != state.steps) throw std::invalid_argument("prefix length does not match posterior steps");
  if (next_token < 0 || next_token >= model.alphabet_size()) throw std::invalid_argument("token outside alphabet");
  PosteriorState s = state;
  for (int z = 0; z < model.num_concepts(); ++z) {
    const double lp = std::log(model.row(z, prefix)[next_token]);
    s.cum_loglik[z] += lp;
    s.log_weights[z] += lp;
  }
  s.log_weights = normalized(std::move(s.log_weights));
  s.steps += 1;
  return s;
}

PosteriorState observe_all(const PosteriorState& state, const LatentConceptModel& model, std::span<const Token> tokens,
                           std::size_t end) {
  if (end > tokens.size() || end < state.steps) throw std::invalid_argument("batch end out of range");
  PosteriorState s = state;
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(model.num_concepts());
  for (int z = 0; z < model.num_concepts(); ++z) {
    for (std::size_t i = state.steps; i < end; ++i) delta[z] += std::log(model.row(z, tokens.first(i))[tokens[i]]);
  }
  s.cum_loglik += delta;
  s.log_weights = normalized(s.log_weights + delta);
  s.steps = end;
  return s;
}

Eigen::VectorXd predict(const PosteriorState& state, const LatentConceptModel& model, std::span<const Token> prefix) {
  if (prefix.size() != state.steps) throw std::invalid_argument("prefix length does not match posterior steps");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(model.alphabet_size());
  for (int z = 0; z < model.num_concepts(); ++z) {
    const double w = std::exp(state.log_weights[z]);
    if (w > 0.0) out += w * model.row(z, prefix).transpose();
  }
  return out;
}

std::vector<double> Predictor::log_probs(std::span<const Token> tokens, std::span<const std::size_t> positions) const {
  std::vector<double> out;
  out.reserve(positions.size());
  for (std::size_t p : positions) out.push_back(std::log(predict(tokens.first(p))[tokens[p]]));
  return out;
}

double Predictor::log_kl_from(const Eigen::VectorXd& target, std::span<const Token> prefix) const {
  const Divergence d = kl(target, predict(prefix));
  return d.infinite ? std::numeric_limits<double>::infinity() : std::log(d.value);
}

Eigen::VectorXd BmaPredictor::predict(std::span<const Token> prefix) const {
  return marginal_conditional(model_, prefix);
}

std::vector<double> BmaPredictor::log_probs(std::span<const Token> tokens,
                                            std::span<const std::size_t> positions) const {
  std::vector<double> out;
  out.reserve(positions.size());
  Eigen::VectorXd lw = model_.prior().array().log();
  const int k = model_.num_concepts();
  std::size_t next = 0;
  const std::size_t end = positions.empty() ? 0 : positions.back() + 1;
  for (std::size_t i = 0; i < end; ++i) {
    const auto prefix = tokens.first(i);
    Eigen::VectorXd step(k);
    for (int z = 0; z < k; ++z) step[z] = std::log(model_.row(z, prefix)[tokens[i]]);
    const Eigen::VectorXd joint = lw + step;
    const double norm = log_sum_exp(joint);
    if (next < positions.size() && positions[next] == i) {
      out.push_back(norm);
      ++next;
    }
    if (!std::isfinite(norm)) {
      while (out.size() < positions.size()) out.push_back(kNegInf);
      return out;
    }
    lw = joint.array() - norm;
  }
  return out;
}

double BmaPredictor::log_kl_from(const Eigen::VectorXd& target, std::span<const Token> prefix) const {
  const int v = model_.alphabet_size();
  if (target.size() != v) throw SupportMismatch("target and predictor alphabets differ");
  if ((target.array() <= 0.0).any()) return Predictor::log_kl_from(target, prefix);
  const Eigen::VectorXd lw = log_posterior(model_, prefix);

  // delta_k = q_k - p_k = sum_z w_z (P_z,k - p_k), kept as log|delta_k| and sign.
  Eigen::VectorXd log_abs_x(v);
  Eigen::VectorXd sign(v);
  for (int x = 0; x < v; ++x) {
    double pos = kNegInf;
    double neg = kNegInf;
    for (int z = 0; z < model_.num_concepts(); ++z) {
      const double d = model_.row(z, prefix)[x] - target[x];
      if (d > 0.0) pos = lse2(pos, lw[z] + std::log(d));
      else if (d < 0.0) neg = lse2(neg, lw[z] + std::log(-d));
    }
    double log_abs;
    if (pos == neg) {
      log_abs = kNegInf;
      sign[x] = 0.0;
    } else if (pos > neg) {
      log_abs = pos + std::log1p(-std::exp(neg - pos));
      sign[x] = 1.0;
    } else {
      log_abs = neg + std::log1p(-std::exp(pos - neg));
      sign[x] = -1.0;
    }
    log_abs_x[x] = log_abs - std::log(target[x]);
  }
  if (log_abs_x.maxCoeff() >= std::log(1e-3)) return Predictor::log_kl_from(target, prefix);

  // KL = -sum p log(1 + x) with sum p x = 0, so KL = sum p x^2 (1/2 - x/3 + x^2/4 - ...).
  Eigen::VectorXd terms(v);
  for (int x = 0; x < v; ++x) {
    if (sign[x] == 0.0) {
      terms[x] = kNegInf;
      continue;
    }
    const double xv = sign[x] * std::exp(log_abs_x[x]);
    terms[x] = std::log(target[x]) + 2.0 * log_abs_x[x] + std::log(0.5 - xv / 3.0 + xv * xv / 4.0);
  }
  return log_sum_exp(terms);
}

RegretCurve regret(const LatentConceptModel& model, const TokenSequence& trajectory, const Predictor& predictor) {
  trajectory.validate(model.alphabet_size());
  const auto& positions = trajectory.response_offsets;
  const std::vector<double> pred = predictor.log_probs(trajectory.tokens, positions);
  const int k = model.num_concepts();
  Eigen::VectorXd cum = Eigen::VectorXd::Zero(k);
  double cum_pred = 0.0;
  bool infinite = false;
  RegretCurve c;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const std::size_t p = positions[i];
    const auto prefix = trajectory.prefix(p);
    for (int z = 0; z < k; ++z) cum[z] += std::log(model.row(z, prefix)[trajectory.tokens[p]]);
    cum_pred += pred[i];
    infinite = infinite || !std::isfinite(pred[i]);
    Eigen::Index best = 0;
    const double best_value = cum.maxCoeff(&best);
    const double t = static_cast<double>(i + 1);
    c.cum_loglik_pred.push_back(cum_pred);
    c.cum_loglik_best.push_back(best_value);
    c.best_concept.push_back(static_cast<ConceptId>(best));
    c.infinite.push_back(infinite);
    c.regret.push_back(infinite ? std::numeric_limits<double>::infinity() : (best_value - cum_pred) / t);
    const double prior = model.prior()[best];
    c.bound.push_back(prior > 0.0 ? std::log(1.0 / prior) / t : std::numeric_limits<double>::infinity());
  }
  return c;
}

double regret_bound(const Eigen::VectorXd& prior, ConceptId z_star, std::size_t t) {
  if (z_star < 0 || z_star >= prior.size()) throw UnknownConcept("unknown concept id " + std::to_string(z_star));
  if (t == 0) throw std::invalid_argument("regret bound needs t >= 1");
  if (!(prior[z_star] > 0.0)) throw UnboundedRegret("prior mass of the concept is zero");
  return std::log(1.0 / prior[z_star]) / static_cast<double>(t);
}

bool bma_bound_is_sure(const LatentConceptModel& model) noexcept {
  return model.structure() == Structure::markov || model.covariates_shared();
}

InequalityReport verify_bma_inequality(const LatentConceptModel& model, const TokenSequence& trajectory,
                                       std::size_t t) {
  if (t == 0 || t > trajectory.num_responses()) throw std::invalid_argument("t must lie in [1, number of responses]");
  const std::span<const std::size_t> positions(trajectory.response_offsets.data(), t);
  const std::vector<double> bma = BmaPredictor(model).log_probs(trajectory.tokens, positions);
  InequalityReport r;
  const double td = static_cast<double>(t);
  double acc = 0.0;
  for (double v : bma) acc += v;
  r.lhs = acc / td;
  r.rhs = -std::numeric_limits<double>::infinity();
  for (int z = 0; z < model.num_concepts(); ++z) {
    double sum = std::log(model.prior()[z]);
    for (std::size_t p : positions) sum += std::log(model.row(z, trajectory.prefix(p))[trajectory.tokens[p]]);
    if (sum / td > r.rhs) {
      r.rhs = sum / td;
      r.argmax = z;
    }
  }
  r.holds = r.lhs >= r.rhs - kInequalityTol;
  return r;
}

}  // namespace icl
