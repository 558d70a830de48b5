#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "icl/bma.hpp"
#include "icl/concept_model.hpp"
#include "icl/rng.hpp"

namespace icl {

enum class PerturbationKind {
  flip_uniform,       // a corrupted response becomes a uniform draw from the other tokens
  permute_responses,  // corrupted responses are shuffled among themselves
  adversarial_fixed,  // a corrupted response r becomes map[r]
};

struct PerturbationPolicy {
  PerturbationKind kind = PerturbationKind::flip_uniform;
  double rho = 0.0;         // per-response corruption probability
  std::vector<Token> map;   // adversarial_fixed only

  void validate(int alphabet_size) const;
};

std::string perturbation_name(PerturbationKind kind);
PerturbationKind perturbation_from_name(const std::string& name);

// Covariates and length are untouched; each response is selected for
// corruption independently with probability rho.
TokenSequence perturb_prompt(const TokenSequence& prompt, const PerturbationPolicy& policy, int alphabet_size,
                             Rng& rng, std::size_t* corrupted = nullptr);

struct RobustnessPoint {
  std::size_t t = 0;
  double mean_kl = 0.0;
  double log_mean_kl = 0.0;  // accurate even when mean_kl underflows
  double sem = 0.0;
  double envelope = 0.0;     // exp(-sqrt(t) margin / (2 (1 + l) log(1/c0)))
  std::size_t infinite = 0;
};

struct RobustnessCurve {
  std::vector<RobustnessPoint> points;
  double margin = 0.0;  // min_{z != z*} KL_pair - 2 log(1/c0); +inf with one concept
  double c0 = 0.0;
  int covariate_length = 0;
  ConceptId z_star = 0;

  // Least-squares slope of log(mean KL) on sqrt(t).
  double log_kl_slope() const;
};

// For each t: the mean over trials of KL(P(.|c_{t+1}, z*) || Phat(.|S'_t, c_{t+1})).
// Trial k uses rng.fork(k); the prompts of one trial are nested in t.
RobustnessCurve robustness_curve(const Predictor& predictor, const LatentConceptModel& model, ConceptId z_star,
                                 const PerturbationPolicy& policy, const std::vector<std::size_t>& t_grid,
                                 std::size_t trials, const Rng& rng, unsigned threads = 1);

void write_robustness_csv(std::ostream& out, const RobustnessCurve& curve);

// log of the posterior mass off z*, log sum_{z != z*} P(z | prefix).
double log_wrong_mass(const LatentConceptModel& model, std::span<const Token> prefix, ConceptId z_star);

struct DecompositionRow {
  ConceptId z_star = 0;
  double total = 0.0;     // T^-1 sum log P(r_t | z*, .) - log Phat(r_t | .)
  double oracle = 0.0;    // (a): T^-1 sum log P(r_t | z*, .) - log P_bma(r_t | .)
  double log_ratio = 0.0; // (b): T^-1 sum log P_bma(r_t | .) - log Phat(r_t | .)
  double kl_gap = 0.0;    // T^-1 sum KL(P_bma(. | .) || Phat(. | .)) over the same positions
  double identity_error = 0.0;
  // Prompt has positive probability under the pretraining model; the terms
  // above are NaN and left out of the summaries otherwise.
  bool covered = true;
};

struct DecompositionReport {
  std::vector<DecompositionRow> rows;
  double mean_total = 0.0, sem_total = 0.0;
  double mean_oracle = 0.0, sem_oracle = 0.0;
  double mean_log_ratio = 0.0, sem_log_ratio = 0.0;
  double mean_kl_gap = 0.0, sem_kl_gap = 0.0;
  double max_identity_error = 0.0;
  std::size_t uncovered = 0;
};

inline constexpr double kIdentityTol = 1e-9;

// Trajectories of T responses drawn from `icl_model` (z* from its prior); the
// oracle is BMA under `pretraining_model`. Trial k uses rng.fork(k).
DecompositionReport pretrained_regret_decomposition(const Predictor& predictor,
                                                    const LatentConceptModel& pretraining_model,
                                                    const LatentConceptModel& icl_model, std::size_t horizon,
                                                    std::size_t trials, const Rng& rng, unsigned threads = 1);

}  // namespace icl
