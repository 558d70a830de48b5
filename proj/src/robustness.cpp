#include "icl/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "icl/errors.hpp"
#include "icl/metrics.hpp"
#include "icl/parallel.hpp"

namespace icl {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

void PerturbationPolicy::validate(int alphabet_size) const {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("corruption probability must lie in [0, 1]");
  if (kind == PerturbationKind::adversarial_fixed) {
    if (static_cast<int>(map.size()) != alphabet_size) throw InvalidModel("adversarial map must cover the alphabet");
    for (Token t : map)
      if (t < 0 || t >= alphabet_size) throw InvalidModel("adversarial map leaves the alphabet");
  }
  if (kind == PerturbationKind::flip_uniform && alphabet_size < 2 && rho > 0.0) {
    throw InvalidModel("flips need at least two tokens");
  }
}

std::string perturbation_name(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::flip_uniform: return "flip_uniform";
    case PerturbationKind::permute_responses: return "permute_responses";
    case PerturbationKind::adversarial_fixed: return "adversarial_fixed";
  }
  return "flip_uniform";
}

PerturbationKind perturbation_from_name(const std::string& name) {
  if (name == "flip_uniform") return PerturbationKind::flip_uniform;
  if (name == "permute_responses") return PerturbationKind::permute_responses;
  if (name == "adversarial_fixed") return PerturbationKind::adversarial_fixed;
  throw std::invalid_argument("unknown perturbation kind '" + name + "'");
}

TokenSequence perturb_prompt(const TokenSequence& prompt, const PerturbationPolicy& policy, int alphabet_size,
                             Rng& rng, std::size_t* corrupted) {
  policy.validate(alphabet_size);
  TokenSequence out = prompt;
  std::vector<std::size_t> chosen;
  for (std::size_t pos : prompt.response_offsets) {
    if (policy.rho > 0.0 && rng.bernoulli(policy.rho)) chosen.push_back(pos);
  }
  switch (policy.kind) {
    case PerturbationKind::flip_uniform:
      for (std::size_t pos : chosen) {
        const auto shift = 1 + static_cast<Token>(rng.uniform_int(static_cast<std::uint64_t>(alphabet_size - 1)));
        out.tokens[pos] = (prompt.tokens[pos] + shift) % alphabet_size;
      }
      break;
    case PerturbationKind::adversarial_fixed:
      for (std::size_t pos : chosen) out.tokens[pos] = policy.map[static_cast<std::size_t>(prompt.tokens[pos])];
      break;
    case PerturbationKind::permute_responses:
      for (std::size_t i = chosen.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(out.tokens[chosen[i - 1]], out.tokens[chosen[j]]);
      }
      break;
  }
  if (corrupted) {
    *corrupted = 0;
    for (std::size_t pos : prompt.response_offsets) *corrupted += out.tokens[pos] != prompt.tokens[pos];
  }
  return out;
}

double RobustnessCurve::log_kl_slope() const {
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    if (p.infinite > 0 || !std::isfinite(p.log_mean_kl)) continue;
    xs.push_back(std::sqrt(static_cast<double>(p.t)));
    ys.push_back(p.log_mean_kl);
  }
  if (xs.size() < 2) throw std::invalid_argument("slope needs at least two finite points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i] / n, my += ys[i] / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

RobustnessCurve robustness_curve(const Predictor& predictor, const LatentConceptModel& model, ConceptId z_star,
                                 const PerturbationPolicy& policy, const std::vector<std::size_t>& t_grid,
                                 std::size_t trials, const Rng& rng, unsigned threads) {
  if (model.structure() != Structure::pairs) throw InvalidModel("robustness curves need an example-pair model");
  model.check_concept(z_star);
  policy.validate(model.alphabet_size());
  if (t_grid.empty() || trials == 0) throw std::invalid_argument("robustness curve needs a grid and trials");
  if (!std::is_sorted(t_grid.begin(), t_grid.end())) throw std::invalid_argument("t grid must be increasing");
  if (predictor.alphabet_size() != model.alphabet_size()) throw SupportMismatch("predictor alphabet differs");

  RobustnessCurve curve;
  curve.z_star = z_star;
  curve.covariate_length = model.covariate_length();
  const AssumptionReport report = validate_assumptions(model);
  curve.c0 = report.c0;
  curve.margin = report.margins.empty() ? kInf : report.margins[static_cast<std::size_t>(z_star)];

  const std::size_t t_max = t_grid.back();
  const auto block = static_cast<std::size_t>(model.block_length());
  const auto l = static_cast<std::size_t>(model.covariate_length());
  std::vector<std::vector<double>> log_kls(trials, std::vector<double>(t_grid.size()));
  parallel_for(trials, threads, [&](std::size_t k) {
    Rng trial_rng = rng.fork(k);
    const TokenSequence clean = generate_examples(model, z_star, t_max + 1, trial_rng);
    TokenSequence prompt = clean;
    prompt.tokens.resize(t_max * block);
    prompt.response_offsets.resize(t_max);
    TokenSequence perturbed = perturb_prompt(prompt, policy, model.alphabet_size(), trial_rng);
    for (std::size_t g = 0; g < t_grid.size(); ++g) {
      const std::size_t t = t_grid[g];
      // S'_t followed by the clean query covariate c_{t+1}.
      std::vector<Token> prefix(perturbed.tokens.begin(), perturbed.tokens.begin() + static_cast<std::ptrdiff_t>(t * block));
      for (std::size_t j = 0; j < l; ++j) prefix.push_back(clean.tokens[t * block + j]);
      const Eigen::VectorXd target = conditional(model, z_star, prefix);
      log_kls[k][g] = predictor.log_kl_from(target, prefix);
    }
  });

  for (std::size_t g = 0; g < t_grid.size(); ++g) {
    RobustnessPoint p;
    p.t = t_grid[g];
    Eigen::VectorXd logs(static_cast<Eigen::Index>(trials));
    std::vector<double> values;
    for (std::size_t k = 0; k < trials; ++k) {
      const double v = log_kls[k][g];
      if (v == kInf) ++p.infinite;
      logs[static_cast<Eigen::Index>(k)] = v;
      values.push_back(std::exp(v));
    }
    if (p.infinite > 0) {
      p.mean_kl = p.log_mean_kl = kInf;
    } else if (!std::isfinite(logs.maxCoeff())) {
      p.log_mean_kl = -kInf;
    } else {
      p.log_mean_kl = log_sum_exp(logs) - std::log(static_cast<double>(trials));
      p.mean_kl = std::exp(p.log_mean_kl);
      // Standard error relative to the mean, evaluated on rescaled values.
      double acc = 0.0;
      for (std::size_t k = 0; k < trials; ++k) {
        const double r = std::exp(log_kls[k][g] - p.log_mean_kl) - 1.0;
        acc += r * r;
      }
      p.sem = trials > 1 ? p.mean_kl * std::sqrt(acc / static_cast<double>(trials - 1) / static_cast<double>(trials))
                         : 0.0;
    }
    const double rate = curve.margin / (2.0 * (1.0 + static_cast<double>(l)) * std::log(1.0 / curve.c0));
    p.envelope = std::exp(-std::sqrt(static_cast<double>(p.t)) * rate);
    curve.points.push_back(p);
  }
  return curve;
}

void write_robustness_csv(std::ostream& out, const RobustnessCurve& curve) {
  const auto old = out.precision(17);
  out << "t,mean_kl,stderr,margin,c0,l,envelope_value,log_mean_kl\n";
  for (const auto& p : curve.points) {
    out << p.t << ',' << p.mean_kl << ',' << p.sem << ',' << curve.margin << ',' << curve.c0 << ','
        << curve.covariate_length << ',' << p.envelope << ',' << p.log_mean_kl << '\n';
  }
  out.precision(old);
}

double log_wrong_mass(const LatentConceptModel& model, std::span<const Token> prefix, ConceptId z_star) {
  model.check_concept(z_star);
  const Eigen::VectorXd lw = log_posterior(model, prefix);
  Eigen::VectorXd others(lw.size() - 1);
  for (Eigen::Index z = 0, j = 0; z < lw.size(); ++z)
    if (z != z_star) others[j++] = lw[z];
  return log_sum_exp(others);
}

DecompositionReport pretrained_regret_decomposition(const Predictor& predictor,
                                                    const LatentConceptModel& pretraining_model,
                                                    const LatentConceptModel& icl_model, std::size_t horizon,
                                                    std::size_t trials, const Rng& rng, unsigned threads) {
  if (pretraining_model.alphabet_size() != icl_model.alphabet_size() ||
      predictor.alphabet_size() != icl_model.alphabet_size()) {
    throw SupportMismatch("predictor, pretraining and ICL alphabets must agree");
  }
  if (pretraining_model.structure() != icl_model.structure() ||
      pretraining_model.block_length() != icl_model.block_length()) {
    throw InvalidModel("pretraining and ICL models must share the prompt layout");
  }
  if (horizon == 0 || trials == 0) throw std::invalid_argument("decomposition needs a horizon and trials");
  const BmaPredictor oracle(pretraining_model);
  DecompositionReport report;
  report.rows.resize(trials);
  parallel_for(trials, threads, [&](std::size_t k) {
    Rng trial_rng = rng.fork(k);
    DecompositionRow& row = report.rows[k];
    row.z_star = sample_concept(icl_model, trial_rng);
    // Markov prompts start one token early so every scored response has a non-empty prefix.
    const bool markov = icl_model.structure() == Structure::markov;
    TokenSequence prompt = generate_examples(icl_model, row.z_star, markov ? horizon + 1 : horizon, trial_rng);
    std::vector<std::size_t> positions = prompt.response_offsets;
    if (markov) positions.erase(positions.begin());

    row.covered = false;
    for (ConceptId z = 0; z < pretraining_model.num_concepts() && !row.covered; ++z) {
      row.covered = pretraining_model.prior()[z] > 0.0 &&
                    std::isfinite(log_likelihood(pretraining_model, z, prompt.tokens));
    }
    if (!row.covered) {
      row.total = row.oracle = row.log_ratio = row.kl_gap = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    const std::vector<double> hat = predictor.log_probs(prompt.tokens, positions);
    const std::vector<double> bma = oracle.log_probs(prompt.tokens, positions);
    double sum_truth = 0.0, sum_bma = 0.0, sum_hat = 0.0, sum_a = 0.0, sum_b = 0.0, sum_gap = 0.0;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const std::span<const Token> prefix(prompt.tokens.data(), positions[i]);
      const double truth = std::log(icl_model.row(row.z_star, prefix)[prompt.tokens[positions[i]]]);
      sum_truth += truth;
      sum_bma += bma[i];
      sum_hat += hat[i];
      sum_a += truth - bma[i];
      sum_b += bma[i] - hat[i];
      const Divergence gap = kl(oracle.predict(prefix), predictor.predict(prefix));
      sum_gap += gap.infinite ? kInf : gap.value;
    }
    const double n = static_cast<double>(positions.size());
    row.total = (sum_truth - sum_hat) / n;
    row.oracle = sum_a / n;
    row.log_ratio = sum_b / n;
    row.kl_gap = sum_gap / n;
    row.identity_error = std::abs(row.total - row.oracle - row.log_ratio);
    if (!std::isfinite(row.total)) row.identity_error = kInf;
  });

  std::vector<double> totals, oracles, ratios, gaps;
  for (const auto& r : report.rows) {
    totals.push_back(r.total);
    oracles.push_back(r.oracle);
    ratios.push_back(r.log_ratio);
    gaps.push_back(r.kl_gap);
    if (r.covered) report.max_identity_error = std::max(report.max_identity_error, r.identity_error);
    report.uncovered += !r.covered;
  }
  const Summary st = summarize(totals), so = summarize(oracles), sr = summarize(ratios), sg = summarize(gaps);
  report.mean_total = st.mean, report.sem_total = st.sem;
  report.mean_oracle = so.mean, report.sem_oracle = so.sem;
  report.mean_log_ratio = sr.mean, report.sem_log_ratio = sr.sem;
  report.mean_kl_gap = sg.mean, report.sem_kl_gap = sg.sem;
  return report;
}

}  // namespace icl
