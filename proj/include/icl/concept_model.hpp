#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "icl/rng.hpp"

namespace icl {

using Token = int;
using ConceptId = int;

// A token stream with the positions of its response tokens. For Markov
// models every position is a response; for example-pair models the stream
// is (c_1, r_1, c_2, r_2, ...) with each covariate c_i of fixed length.
struct TokenSequence {
  std::vector<Token> tokens;
  std::vector<std::size_t> response_offsets;

  std::size_t size() const noexcept { return tokens.size(); }
  std::size_t num_responses() const noexcept { return response_offsets.size(); }
  std::span<const Token> prefix(std::size_t n) const { return {tokens.data(), n}; }

  // Throws InvalidModel when a token is out of range or offsets are not
  // strictly increasing within bounds.
  void validate(int alphabet_size) const;

  bool operator==(const TokenSequence&) const = default;
};

enum class Structure { markov, pairs };

// Finite latent-concept sequence model.
//
// Markov structure: each concept z owns an order-m table P(x | last m tokens, z).
// Prefixes shorter than m index padded start contexts, stored as extra rows,
// so row layout is [len-0 prefix | V len-1 prefixes | ... | V^m full contexts].
//
// Pair structure: the stream is a sequence of i.i.d. examples (c, r) with
// c in X^l drawn from a per-concept covariate law and r ~ P(. | c, z).
class LatentConceptModel {
 public:
  static LatentConceptModel markov(Eigen::VectorXd prior, int alphabet_size, int order,
                                   std::vector<Eigen::MatrixXd> tables,
                                   std::optional<double> c0_floor = std::nullopt);

  static LatentConceptModel pairs(Eigen::VectorXd prior, int alphabet_size, int covariate_length,
                                  std::vector<Eigen::VectorXd> covariate_laws,
                                  std::vector<Eigen::MatrixXd> response_tables,
                                  std::optional<double> c0_floor = std::nullopt);

  Structure structure() const noexcept { return structure_; }
  int num_concepts() const noexcept { return static_cast<int>(prior_.size()); }
  int alphabet_size() const noexcept { return alphabet_size_; }
  int order() const noexcept { return order_; }
  int covariate_length() const noexcept { return covariate_length_; }
  int block_length() const noexcept { return structure_ == Structure::pairs ? covariate_length_ + 1 : 1; }
  const Eigen::VectorXd& prior() const noexcept { return prior_; }
  std::optional<double> c0_floor() const noexcept { return c0_floor_; }
  bool c0_valid() const noexcept { return c0_floor_.has_value(); }

  // Markov: full table per concept. Pairs: response table (V^l x V).
  const Eigen::MatrixXd& table(ConceptId z) const;
  // Pairs only: covariate law over V^l atoms (index = base-V digits, first token most significant).
  const Eigen::VectorXd& covariate_law(ConceptId z) const;
  // True for Markov models and for pair models whose covariate laws coincide.
  bool covariates_shared() const noexcept { return covariates_shared_; }

  // Conditional row for the next token after `prefix`, as a view.
  Eigen::Ref<const Eigen::RowVectorXd> row(ConceptId z, std::span<const Token> prefix) const;
  bool is_response_position(std::size_t position) const noexcept {
    return structure_ == Structure::markov ||
           position % static_cast<std::size_t>(block_length()) == static_cast<std::size_t>(covariate_length_);
  }

  void check_concept(ConceptId z) const;

  bool operator==(const LatentConceptModel&) const;

 private:
  LatentConceptModel() = default;
  void validate() const;
  void build_covariate_conditionals();

  Structure structure_ = Structure::markov;
  int alphabet_size_ = 0;
  int order_ = 0;
  int covariate_length_ = 0;
  Eigen::VectorXd prior_;
  std::vector<Eigen::MatrixXd> tables_;
  std::vector<Eigen::VectorXd> covariate_laws_;
  // Pairs: P(c_j | c_<j, z) laid out like Markov start contexts.
  std::vector<Eigen::MatrixXd> covariate_conditionals_;
  std::optional<double> c0_floor_;
  bool covariates_shared_ = true;
};

// Number of rows in a Markov table of the given order, including padded contexts.
std::size_t num_contexts(int alphabet_size, int order);
// Row of the context formed by the last min(order, |prefix|) tokens.
std::size_t context_index(int alphabet_size, int order, std::span<const Token> prefix);

ConceptId sample_concept(const LatentConceptModel& model, Rng& rng);

// `length` tokens sampled autoregressively under concept z.
TokenSequence generate_sequence(const LatentConceptModel& model, ConceptId z, std::size_t length, Rng& rng);
// `num_pairs` complete examples (pairs models) or tokens (Markov models).
TokenSequence generate_examples(const LatentConceptModel& model, ConceptId z, std::size_t num_pairs, Rng& rng);

Eigen::VectorXd conditional(const LatentConceptModel& model, ConceptId z, std::span<const Token> prefix);

// log P(prefix | z) via the chain rule over every token.
double log_likelihood(const LatentConceptModel& model, ConceptId z, std::span<const Token> prefix);
Eigen::VectorXd log_posterior(const LatentConceptModel& model, std::span<const Token> prefix);

// Posterior-weighted mixture of per-concept conditionals, computed from the
// joint likelihood of the whole prefix.
Eigen::VectorXd marginal_conditional(const LatentConceptModel& model, std::span<const Token> prefix);

inline constexpr double kDefaultEnumerationCap = 1e7;

double kl_pair(const LatentConceptModel& model, ConceptId z, ConceptId z2,
               double enumeration_cap = kDefaultEnumerationCap);
bool has_pair_factorization(const LatentConceptModel& model) noexcept;

// Transition matrix of the order-max(m,1) context chain under concept z.
Eigen::MatrixXd context_transition_matrix(const LatentConceptModel& model, ConceptId z);
Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& transition);
// d(t) = max_x TV(P^t(x, .), pi).
double worst_case_tv(const Eigen::MatrixXd& power, const Eigen::VectorXd& stationary);
bool is_primitive(const Eigen::MatrixXd& transition);

std::size_t estimate_mixing_time(const Eigen::MatrixXd& transition, double epsilon,
                                 std::size_t max_steps = 1'000'000);
std::size_t estimate_mixing_time(const LatentConceptModel& model, ConceptId z, double epsilon,
                                 std::size_t max_steps = 1'000'000);

struct AssumptionReport {
  double c0 = 0.0;  // min conditional entry
  double c1 = 0.0;  // min prior entry
  // min_{z != z*} KL_pair(z*, z) - 2 log(1/c0), one per z*; empty without pair structure.
  std::vector<double> margins;
  std::vector<double> min_kl_pair;
  bool positive = false;       // c0 > 0
  bool prior_positive = false; // c1 > 0
  std::vector<bool> distinguishable;
};

AssumptionReport validate_assumptions(const LatentConceptModel& model,
                                      double enumeration_cap = kDefaultEnumerationCap);

// Minimum over every reachable conditional entry.
double min_conditional_entry(const LatentConceptModel& model);

struct GeneratorRecipe {
  Structure structure = Structure::markov;
  int num_concepts = 2;
  int alphabet_size = 4;
  int order = 1;
  int covariate_length = 1;
  bool shared_covariates = true;
  double c0 = 0.01;            // floor on every generated entry
  double concentration = 1.0;  // Dirichlet parameter of the free mass
  bool dirichlet_prior = false;
  std::uint64_t seed = 0;
};

LatentConceptModel generate_model(const GeneratorRecipe& recipe);

}  // namespace icl
