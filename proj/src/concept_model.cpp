#include "icl/concept_model.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "icl/errors.hpp"
#include "icl/metrics.hpp"

namespace icl {

namespace {

constexpr double kRowTol = 1e-12;

std::size_t ipow(std::size_t base, int exp) {
  std::size_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

std::size_t offset_of_length(int alphabet_size, int k) {
  std::size_t off = 0;
  for (int j = 0; j < k; ++j) off += ipow(static_cast<std::size_t>(alphabet_size), j);
  return off;
}

std::size_t digits_index(int alphabet_size, std::span<const Token> tokens) {
  std::size_t idx = 0;
  for (Token t : tokens) idx = idx * static_cast<std::size_t>(alphabet_size) + static_cast<std::size_t>(t);
  return idx;
}

void check_rows(const Eigen::MatrixXd& m, const std::string& what) {
  if (!m.allFinite() || (m.array() < 0.0).any()) throw InvalidModel(what + " has negative or non-finite entries");
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).sum() - 1.0) > kRowTol) {
      throw InvalidModel(what + " row " + std::to_string(r) + " sums to " + std::to_string(m.row(r).sum()));
    }
  }
}

Eigen::RowVectorXd floored_row(Rng& rng, int k, double c0, double concentration) {
  return (Eigen::RowVectorXd::Constant(k, c0) + (1.0 - k * c0) * rng.dirichlet(k, concentration).transpose());
}

}  // namespace

void TokenSequence::validate(int alphabet_size) const {
  for (Token t : tokens) {
    if (t < 0 || t >= alphabet_size) throw InvalidModel("token " + std::to_string(t) + " outside alphabet");
  }
  for (std::size_t i = 0; i < response_offsets.size(); ++i) {
    if (response_offsets[i] >= tokens.size()) throw InvalidModel("response offset out of bounds");
    if (i > 0 && response_offsets[i] <= response_offsets[i - 1]) {
      throw InvalidModel("response offsets not strictly increasing");
    }
  }
}

std::size_t num_contexts(int alphabet_size, int order) { return offset_of_length(alphabet_size, order + 1); }

std::size_t context_index(int alphabet_size, int order, std::span<const Token> prefix) {
  const int k = std::min<int>(order, static_cast<int>(prefix.size()));
  return offset_of_length(alphabet_size, k) + digits_index(alphabet_size, prefix.last(static_cast<std::size_t>(k)));
}

LatentConceptModel LatentConceptModel::markov(Eigen::VectorXd prior, int alphabet_size, int order,
                                              std::vector<Eigen::MatrixXd> tables,
                                              std::optional<double> c0_floor) {
  LatentConceptModel m;
  m.structure_ = Structure::markov;
  m.alphabet_size_ = alphabet_size;
  m.order_ = order;
  m.prior_ = std::move(prior);
  m.tables_ = std::move(tables);
  m.c0_floor_ = c0_floor;
  m.covariates_shared_ = true;
  m.validate();
  return m;
}

LatentConceptModel LatentConceptModel::pairs(Eigen::VectorXd prior, int alphabet_size, int covariate_length,
                                             std::vector<Eigen::VectorXd> covariate_laws,
                                             std::vector<Eigen::MatrixXd> response_tables,
                                             std::optional<double> c0_floor) {
  LatentConceptModel m;
  m.structure_ = Structure::pairs;
  m.alphabet_size_ = alphabet_size;
  m.covariate_length_ = covariate_length;
  m.prior_ = std::move(prior);
  m.tables_ = std::move(response_tables);
  m.covariate_laws_ = std::move(covariate_laws);
  m.c0_floor_ = c0_floor;
  if (m.covariate_laws_.size() != m.tables_.size()) throw InvalidModel("one covariate law per concept required");
  m.covariates_shared_ = std::all_of(m.covariate_laws_.begin(), m.covariate_laws_.end(),
                                     [&](const Eigen::VectorXd& law) { return law == m.covariate_laws_.front(); });
  m.build_covariate_conditionals();
  m.validate();
  return m;
}

void LatentConceptModel::build_covariate_conditionals() {
  const int v = alphabet_size_;
  const int l = covariate_length_;
  if (v < 1 || l < 1) throw InvalidModel("pair models need alphabet >= 1 and covariate length >= 1");
  const std::size_t atoms = ipow(static_cast<std::size_t>(v), l);
  covariate_conditionals_.clear();
  for (const auto& law : covariate_laws_) {
    if (static_cast<std::size_t>(law.size()) != atoms) throw InvalidModel("covariate law has wrong size");
    Eigen::MatrixXd cond = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(offset_of_length(v, l)), v);
    for (std::size_t atom = 0; atom < atoms; ++atom) {
      for (int j = 0; j < l; ++j) {
        const std::size_t prefix = atom / ipow(static_cast<std::size_t>(v), l - j);
        const std::size_t next = (atom / ipow(static_cast<std::size_t>(v), l - j - 1)) % static_cast<std::size_t>(v);
        cond(static_cast<Eigen::Index>(offset_of_length(v, j) + prefix), static_cast<Eigen::Index>(next)) +=
            law[static_cast<Eigen::Index>(atom)];
      }
    }
    for (Eigen::Index r = 0; r < cond.rows(); ++r) {
      const double mass = cond.row(r).sum();
      if (mass > 0.0) cond.row(r) /= mass;
      else cond.row(r).setConstant(1.0 / v);
    }
    covariate_conditionals_.push_back(std::move(cond));
  }
}

void LatentConceptModel::validate() const {
  if (alphabet_size_ < 1) throw InvalidModel("alphabet_size must be >= 1");
  if (order_ < 0) throw InvalidModel("order must be >= 0");
  if (prior_.size() < 1) throw InvalidModel("at least one concept required");
  if (!prior_.allFinite() || (prior_.array() < 0.0).any() || std::abs(prior_.sum() - 1.0) > kRowTol) {
    throw InvalidModel("prior must be a probability vector");
  }
  if (tables_.size() != static_cast<std::size_t>(prior_.size())) throw InvalidModel("one table per concept required");
  const Eigen::Index rows = structure_ == Structure::markov
                                ? static_cast<Eigen::Index>(num_contexts(alphabet_size_, order_))
                                : static_cast<Eigen::Index>(ipow(static_cast<std::size_t>(alphabet_size_), covariate_length_));
  for (std::size_t z = 0; z < tables_.size(); ++z) {
    const auto& t = tables_[z];
    if (t.rows() != rows || t.cols() != alphabet_size_) {
      throw InvalidModel("table of concept " + std::to_string(z) + " has shape " + std::to_string(t.rows()) + "x" +
                         std::to_string(t.cols()) + ", expected " + std::to_string(rows) + "x" +
                         std::to_string(alphabet_size_));
    }
    check_rows(t, "table of concept " + std::to_string(z));
  }
  for (std::size_t z = 0; z < covariate_laws_.size(); ++z) {
    const auto& law = covariate_laws_[z];
    if (!law.allFinite() || (law.array() < 0.0).any() || std::abs(law.sum() - 1.0) > kRowTol) {
      throw InvalidModel("covariate law of concept " + std::to_string(z) + " is not a distribution");
    }
  }
  if (c0_floor_) {
    if (!(*c0_floor_ > 0.0)) throw InvalidModel("c0 floor must be positive");
    const double c0 = min_conditional_entry(*this);
    if (c0 < *c0_floor_ * (1.0 - 1e-12)) {
      throw InvalidModel("model flagged c0-valid with floor " + std::to_string(*c0_floor_) +
                         " but has entry " + std::to_string(c0));
    }
  }
}

void LatentConceptModel::check_concept(ConceptId z) const {
  if (z < 0 || z >= num_concepts()) throw UnknownConcept("unknown concept id " + std::to_string(z));
}

const Eigen::MatrixXd& LatentConceptModel::table(ConceptId z) const {
  check_concept(z);
  return tables_[static_cast<std::size_t>(z)];
}

const Eigen::VectorXd& LatentConceptModel::covariate_law(ConceptId z) const {
  check_concept(z);
  if (structure_ != Structure::pairs) throw InvalidModel("covariate law requested from a Markov model");
  return covariate_laws_[static_cast<std::size_t>(z)];
}

Eigen::Ref<const Eigen::RowVectorXd> LatentConceptModel::row(ConceptId z, std::span<const Token> prefix) const {
  const auto zi = static_cast<std::size_t>(z);
  if (structure_ == Structure::markov) {
    return tables_[zi].row(static_cast<Eigen::Index>(context_index(alphabet_size_, order_, prefix)));
  }
  const std::size_t block = static_cast<std::size_t>(block_length());
  const std::size_t j = prefix.size() % block;
  const auto current = prefix.subspan(prefix.size() - j);
  if (j < static_cast<std::size_t>(covariate_length_)) {
    const std::size_t idx = offset_of_length(alphabet_size_, static_cast<int>(j)) + digits_index(alphabet_size_, current);
    return covariate_conditionals_[zi].row(static_cast<Eigen::Index>(idx));
  }
  return tables_[zi].row(static_cast<Eigen::Index>(digits_index(alphabet_size_, current)));
}

bool LatentConceptModel::operator==(const LatentConceptModel& o) const {
  if (structure_ != o.structure_ || alphabet_size_ != o.alphabet_size_ || order_ != o.order_ ||
      covariate_length_ != o.covariate_length_ || c0_floor_ != o.c0_floor_ || prior_.size() != o.prior_.size() ||
      prior_ != o.prior_ || tables_.size() != o.tables_.size() || covariate_laws_.size() != o.covariate_laws_.size()) {
    return false;
  }
  for (std::size_t z = 0; z < tables_.size(); ++z) {
    if (tables_[z].rows() != o.tables_[z].rows() || tables_[z] != o.tables_[z]) return false;
  }
  for (std::size_t z = 0; z < covariate_laws_.size(); ++z) {
    if (covariate_laws_[z] != o.covariate_laws_[z]) return false;
  }
  return true;
}

ConceptId sample_concept(const LatentConceptModel& model, Rng& rng) { return rng.categorical(model.prior()); }

TokenSequence generate_sequence(const LatentConceptModel& model, ConceptId z, std::size_t length, Rng& rng) {
  model.check_concept(z);
  TokenSequence seq;
  seq.tokens.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    const auto r = model.row(z, seq.prefix(i));
    if (model.is_response_position(i)) seq.response_offsets.push_back(i);
    seq.tokens.push_back(rng.categorical(r.transpose()));
  }
  return seq;
}

TokenSequence generate_examples(const LatentConceptModel& model, ConceptId z, std::size_t num_pairs, Rng& rng) {
  return generate_sequence(model, z, num_pairs * static_cast<std::size_t>(model.block_length()), rng);
}

Eigen::VectorXd conditional(const LatentConceptModel& model, ConceptId z, std::span<const Token> prefix) {
  model.check_concept(z);
  return model.row(z, prefix).transpose();
}

double log_likelihood(const LatentConceptModel& model, ConceptId z, std::span<const Token> prefix) {
  model.check_concept(z);
  double acc = 0.0;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    acc += std::log(model.row(z, prefix.first(i))[prefix[i]]);
  }
  return acc;
}

Eigen::VectorXd log_posterior(const LatentConceptModel& model, std::span<const Token> prefix) {
  const int k = model.num_concepts();
  Eigen::VectorXd lw(k);
  for (int z = 0; z < k; ++z) {
    const double lp = std::log(model.prior()[z]);
    lw[z] = std::isinf(lp) ? lp : lp + log_likelihood(model, z, prefix);
  }
  const double norm = log_sum_exp(lw);
  if (!std::isfinite(norm)) throw ImpossibleObservation("prefix has zero probability under every concept");
  return lw.array() - norm;
}

Eigen::VectorXd marginal_conditional(const LatentConceptModel& model, std::span<const Token> prefix) {
  const Eigen::VectorXd lw = log_posterior(model, prefix);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(model.alphabet_size());
  for (int z = 0; z < model.num_concepts(); ++z) {
    const double w = std::exp(lw[z]);
    if (w > 0.0) out += w * model.row(z, prefix).transpose();
  }
  return out;
}

bool has_pair_factorization(const LatentConceptModel& model) noexcept {
  return model.structure() == Structure::pairs || model.order() == 0;
}

double kl_pair(const LatentConceptModel& model, ConceptId z, ConceptId z2, double enumeration_cap) {
  model.check_concept(z);
  model.check_concept(z2);
  if (!has_pair_factorization(model)) {
    throw InvalidModel("kl_pair requires an example-pair model or an order-0 Markov model");
  }
  const int v = model.alphabet_size();
  const int l = model.structure() == Structure::pairs ? model.covariate_length() : 0;
  const double atoms = std::pow(static_cast<double>(v), l + 1);
  if (atoms > enumeration_cap) {
    throw EnumerationCapExceeded("pair space has " + std::to_string(atoms) + " atoms, cap is " +
                                 std::to_string(enumeration_cap));
  }
  const Eigen::MatrixXd& tz = model.table(z);
  const Eigen::MatrixXd& tz2 = model.table(z2);
  if (l == 0) return kl(tz.row(0), tz2.row(0)).value;

  const Eigen::VectorXd& cz = model.covariate_law(z);
  const Eigen::VectorXd& cz2 = model.covariate_law(z2);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < cz.size(); ++c) {
    const double pc = cz[c];
    if (pc <= 0.0) continue;
    if (cz2[c] <= 0.0) return std::numeric_limits<double>::infinity();
    acc += pc * std::log(pc / cz2[c]);
    const Divergence dr = kl(tz.row(c), tz2.row(c));
    if (dr.infinite) return std::numeric_limits<double>::infinity();
    acc += pc * dr.value;
  }
  return std::max(acc, 0.0);
}

Eigen::MatrixXd context_transition_matrix(const LatentConceptModel& model, ConceptId z) {
  model.check_concept(z);
  if (model.structure() != Structure::markov) throw InvalidModel("context chain is defined for Markov models");
  const int v = model.alphabet_size();
  const int m = std::max(model.order(), 1);
  const std::size_t n = ipow(static_cast<std::size_t>(v), m);
  const std::size_t full_offset = offset_of_length(v, model.order());
  const Eigen::MatrixXd& table = model.table(z);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const std::size_t shift = n / static_cast<std::size_t>(v);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t row = model.order() == 0 ? 0 : full_offset + s;
    for (int y = 0; y < v; ++y) {
      const std::size_t next = (s % shift) * static_cast<std::size_t>(v) + static_cast<std::size_t>(y);
      p(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(next)) += table(static_cast<Eigen::Index>(row), y);
    }
  }
  return p;
}

bool is_primitive(const Eigen::MatrixXd& transition) {
  const Eigen::Index n = transition.rows();
  Eigen::MatrixXd b = (transition.array() > 0.0).cast<double>();
  // Wielandt: primitive iff B^k > 0 for k = (n-1)^2 + 1, and then for every larger k.
  const double wielandt = static_cast<double>((n - 1) * (n - 1) + 1);
  double k = 1.0;
  while (k < wielandt) {
    b = ((b * b).array() > 0.0).cast<double>();
    k *= 2.0;
  }
  return (b.array() > 0.0).all();
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& transition) {
  const Eigen::Index n = transition.rows();
  Eigen::MatrixXd a = transition.transpose() - Eigen::MatrixXd::Identity(n, n);
  a.row(n - 1).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs[n - 1] = 1.0;
  Eigen::VectorXd pi = a.fullPivLu().solve(rhs);
  pi = pi.cwiseMax(0.0);
  return pi / pi.sum();
}

double worst_case_tv(const Eigen::MatrixXd& power, const Eigen::VectorXd& stationary) {
  double d = 0.0;
  for (Eigen::Index x = 0; x < power.rows(); ++x) d = std::max(d, tv(power.row(x).transpose(), stationary));
  return d;
}

std::size_t estimate_mixing_time(const Eigen::MatrixXd& transition, double epsilon, std::size_t max_steps) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must lie in (0, 1)");
  if (!is_primitive(transition)) throw NonMixingChain("chain is reducible or periodic");
  const Eigen::VectorXd pi = stationary_distribution(transition);
  Eigen::MatrixXd power = Eigen::MatrixXd::Identity(transition.rows(), transition.cols());
  for (std::size_t t = 0; t <= max_steps; ++t) {
    if (worst_case_tv(power, pi) <= epsilon) return t;
    power = power * transition;
  }
  throw NonMixingChain("no mixing within " + std::to_string(max_steps) + " steps");
}

std::size_t estimate_mixing_time(const LatentConceptModel& model, ConceptId z, double epsilon, std::size_t max_steps) {
  return estimate_mixing_time(context_transition_matrix(model, z), epsilon, max_steps);
}

double min_conditional_entry(const LatentConceptModel& model) {
  double c0 = std::numeric_limits<double>::infinity();
  for (int z = 0; z < model.num_concepts(); ++z) {
    const Eigen::MatrixXd& t = model.table(z);
    if (model.structure() == Structure::markov) {
      c0 = std::min(c0, t.minCoeff());
      continue;
    }
    const Eigen::VectorXd& law = model.covariate_law(z);
    for (Eigen::Index c = 0; c < law.size(); ++c) {
      if (law[c] > 0.0) c0 = std::min(c0, t.row(c).minCoeff());
    }
    // Covariate-token conditionals along every prefix that has positive mass.
    const int v = model.alphabet_size();
    const int l = model.covariate_length();
    std::vector<Token> prefix;
    const std::size_t atoms = ipow(static_cast<std::size_t>(v), l);
    for (std::size_t atom = 0; atom < atoms; ++atom) {
      if (law[static_cast<Eigen::Index>(atom)] <= 0.0) continue;
      prefix.assign(static_cast<std::size_t>(l), 0);
      for (int j = l - 1, a = static_cast<int>(atom); j >= 0; --j, a /= v) prefix[static_cast<std::size_t>(j)] = a % v;
      for (int j = 0; j < l; ++j) {
        c0 = std::min(c0, model.row(z, std::span<const Token>(prefix).first(static_cast<std::size_t>(j))).minCoeff());
      }
    }
  }
  return c0;
}

AssumptionReport validate_assumptions(const LatentConceptModel& model, double enumeration_cap) {
  AssumptionReport r;
  r.c0 = min_conditional_entry(model);
  r.c1 = model.prior().minCoeff();
  r.positive = r.c0 > 0.0;
  r.prior_positive = r.c1 > 0.0;
  if (!has_pair_factorization(model)) return r;
  const int k = model.num_concepts();
  const double penalty = 2.0 * std::log(1.0 / r.c0);
  for (int zs = 0; zs < k; ++zs) {
    double min_kl = std::numeric_limits<double>::infinity();
    for (int z = 0; z < k; ++z) {
      if (z != zs) min_kl = std::min(min_kl, kl_pair(model, zs, z, enumeration_cap));
    }
    r.min_kl_pair.push_back(min_kl);
    r.margins.push_back(min_kl - penalty);
    r.distinguishable.push_back(min_kl - penalty > 0.0);
  }
  return r;
}

LatentConceptModel generate_model(const GeneratorRecipe& g) {
  if (g.num_concepts < 1 || g.alphabet_size < 1) throw InvalidModel("generator needs >= 1 concept and token");
  if (!(g.c0 > 0.0) || g.c0 * g.alphabet_size > 1.0) throw InvalidModel("generator c0 must satisfy 0 < c0 <= 1/|X|");
  Rng rng(g.seed);
  Eigen::VectorXd prior = g.dirichlet_prior ? rng.dirichlet(g.num_concepts, 1.0)
                                            : Eigen::VectorXd::Constant(g.num_concepts, 1.0 / g.num_concepts);
  prior /= prior.sum();
  const int v = g.alphabet_size;
  if (g.structure == Structure::markov) {
    std::vector<Eigen::MatrixXd> tables;
    const auto rows = static_cast<Eigen::Index>(num_contexts(v, g.order));
    for (int z = 0; z < g.num_concepts; ++z) {
      Eigen::MatrixXd t(rows, v);
      for (Eigen::Index r = 0; r < rows; ++r) t.row(r) = floored_row(rng, v, g.c0, g.concentration);
      tables.push_back(std::move(t));
    }
    return LatentConceptModel::markov(std::move(prior), v, g.order, std::move(tables), g.c0);
  }

  const int l = g.covariate_length;
  const auto atoms = static_cast<Eigen::Index>(ipow(static_cast<std::size_t>(v), l));
  auto product_law = [&]() {
    std::vector<Eigen::RowVectorXd> marginals;
    for (int j = 0; j < l; ++j) marginals.push_back(floored_row(rng, v, g.c0, g.concentration));
    Eigen::VectorXd law(atoms);
    for (Eigen::Index atom = 0; atom < atoms; ++atom) {
      double p = 1.0;
      Eigen::Index a = atom;
      for (int j = l - 1; j >= 0; --j, a /= v) p *= marginals[static_cast<std::size_t>(j)][a % v];
      law[atom] = p;
    }
    return Eigen::VectorXd(law / law.sum());
  };
  std::vector<Eigen::VectorXd> laws;
  std::vector<Eigen::MatrixXd> responses;
  const Eigen::VectorXd shared = product_law();
  for (int z = 0; z < g.num_concepts; ++z) {
    laws.push_back(g.shared_covariates ? shared : product_law());
    Eigen::MatrixXd t(atoms, v);
    for (Eigen::Index r = 0; r < atoms; ++r) t.row(r) = floored_row(rng, v, g.c0, g.concentration);
    responses.push_back(std::move(t));
  }
  return LatentConceptModel::pairs(std::move(prior), v, l, std::move(laws), std::move(responses), g.c0);
}

}  // namespace icl
