#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "icl/concept_model.hpp"
#include "icl/errors.hpp"
#include "icl/metrics.hpp"
#include "icl/model_io.hpp"

using namespace icl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LatentConceptModel two_token_chain(double stay0, double stay1, VectorXd prior = VectorXd::Constant(1, 1.0)) {
  MatrixXd t(3, 2);
  t << 0.5, 0.5, stay0, 1 - stay0, 1 - stay1, stay1;
  std::vector<MatrixXd> tables(static_cast<std::size_t>(prior.size()), t);
  return LatentConceptModel::markov(prior, 2, 1, tables);
}

// Binary pairs model, one covariate token, responses (0.9,0.1) vs (0.1,0.9).
LatentConceptModel flip_pairs() {
  MatrixXd r0(2, 2), r1(2, 2);
  r0 << 0.9, 0.1, 0.9, 0.1;
  r1 << 0.1, 0.9, 0.1, 0.9;
  const VectorXd law = VectorXd::Constant(2, 0.5);
  return LatentConceptModel::pairs(VectorXd::Constant(2, 0.5), 2, 1, {law, law}, {r0, r1});
}

// Independent oracle: posterior by plain products, mixture by explicit sum.
VectorXd brute_marginal(const LatentConceptModel& m, std::span<const Token> prefix) {
  VectorXd w(m.num_concepts());
  for (int z = 0; z < m.num_concepts(); ++z) {
    double p = m.prior()[z];
    for (std::size_t i = 0; i < prefix.size(); ++i) p *= m.table(z).row(static_cast<Eigen::Index>(
        context_index(m.alphabet_size(), m.order(), prefix.first(i))))[prefix[i]];
    w[z] = p;
  }
  w /= w.sum();
  VectorXd out = VectorXd::Zero(m.alphabet_size());
  for (int z = 0; z < m.num_concepts(); ++z) {
    out += w[z] * m.table(z).row(static_cast<Eigen::Index>(context_index(m.alphabet_size(), m.order(), prefix)))
                      .transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("sample_concept follows the prior") {
  Rng rng(1);
  const auto degenerate = two_token_chain(0.5, 0.5, Eigen::Vector2d(1.0, 0.0));
  for (int i = 0; i < 1000; ++i) CHECK(sample_concept(degenerate, rng) == 0);
  for (double p0 : {0.5, 0.9}) {
    const auto m = two_token_chain(0.5, 0.5, Eigen::Vector2d(p0, 1.0 - p0));
    int hits = 0;
    for (int i = 0; i < 100000; ++i) hits += sample_concept(m, rng) == 0;
    CHECK(std::abs(hits / 1e5 - p0) <= 0.01);
  }
}

TEST_CASE("generate_sequence") {
  SUBCASE("deterministic chain is seed independent") {
    MatrixXd t(3, 2);
    t << 1, 0, 0, 1, 1, 0;
    const auto m = LatentConceptModel::markov(VectorXd::Constant(1, 1.0), 2, 1, {t});
    Rng a(1), b(999);
    const auto s1 = generate_sequence(m, 0, 20, a);
    CHECK(s1 == generate_sequence(m, 0, 20, b));
    CHECK(s1.tokens[0] == 0);
    CHECK(s1.tokens[1] == 1);
    CHECK(s1.tokens[2] == 0);
  }
  SUBCASE("length one and reproducibility") {
    const auto m = two_token_chain(0.7, 0.2);
    Rng a(3), b(3);
    const auto s = generate_sequence(m, 0, 1, a);
    CHECK(s.size() == 1);
    CHECK(s == generate_sequence(m, 0, 1, b));
    CHECK_THROWS_AS(generate_sequence(m, 4, 3, a), UnknownConcept);
  }
  SUBCASE("transition counts match the table within 3 sigma") {
    const auto m = two_token_chain(0.7, 0.2);
    Rng rng(8);
    const auto s = generate_sequence(m, 0, 100000, rng);
    double n[2] = {0, 0}, stay[2] = {0, 0};
    for (std::size_t i = 1; i < s.size(); ++i) {
      n[s.tokens[i - 1]] += 1;
      stay[s.tokens[i - 1]] += s.tokens[i] == s.tokens[i - 1];
    }
    const double p[2] = {0.7, 0.2};
    for (int x = 0; x < 2; ++x) {
      const double sigma = std::sqrt(p[x] * (1 - p[x]) / n[x]);
      CHECK(std::abs(stay[x] / n[x] - p[x]) <= 3 * sigma);
    }
  }
}

TEST_CASE("conditional rows") {
  SUBCASE("uniform table") {
    const auto m = LatentConceptModel::markov(VectorXd::Constant(1, 1.0), 3, 1, {MatrixXd::Constant(4, 3, 1.0 / 3)});
    const std::vector<Token> prefix = {0, 2};
    CHECK(conditional(m, 0, prefix).isApprox(VectorXd::Constant(3, 1.0 / 3)));
  }
  SUBCASE("short prefix reads the padded context row") {
    MatrixXd t(7, 2);
    for (int r = 0; r < 7; ++r) t.row(r) << 0.1 * (r + 1), 1 - 0.1 * (r + 1);
    const auto m = LatentConceptModel::markov(VectorXd::Constant(1, 1.0), 2, 2, {t});
    const std::vector<Token> one = {1};
    CHECK(conditional(m, 0, {})[0] == doctest::Approx(0.1));
    CHECK(conditional(m, 0, one)[0] == doctest::Approx(0.3));
    const std::vector<Token> three = {0, 1, 0};  // last two tokens (1,0) -> 3 + 2
    CHECK(conditional(m, 0, three)[0] == doctest::Approx(0.6));
  }
  SUBCASE("c0-valid entries stay above the floor") {
    GeneratorRecipe g;
    g.num_concepts = 3;
    g.alphabet_size = 5;
    g.order = 2;
    g.c0 = 0.05;
    g.seed = 4;
    const auto m = generate_model(g);
    Rng rng(2);
    for (int z = 0; z < 3; ++z) {
      const auto s = generate_sequence(m, z, 200, rng);
      for (std::size_t i = 0; i <= s.size(); ++i) CHECK(conditional(m, z, s.prefix(i)).minCoeff() >= 0.05);
    }
  }
}

TEST_CASE("marginal_conditional") {
  SUBCASE("single concept equals conditional") {
    const auto m = two_token_chain(0.7, 0.2);
    const std::vector<Token> p = {0, 1, 1};
    CHECK((marginal_conditional(m, p) - conditional(m, 0, p)).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("empty prefix is the prior mixture of first rows") {
    MatrixXd a(3, 2), b(3, 2);
    a << 0.2, 0.8, 0.5, 0.5, 0.5, 0.5;
    b << 0.6, 0.4, 0.5, 0.5, 0.5, 0.5;
    const auto m = LatentConceptModel::markov(Eigen::Vector2d(0.25, 0.75), 2, 1, {a, b});
    const VectorXd q = marginal_conditional(m, {});
    CHECK(q[0] == doctest::Approx(0.25 * 0.2 + 0.75 * 0.6).epsilon(1e-15));
  }
  SUBCASE("one observed token matches hand Bayes") {
    MatrixXd a(3, 2), b(3, 2);
    a << 0.9, 0.1, 0.3, 0.7, 0.6, 0.4;
    b << 0.2, 0.8, 0.5, 0.5, 0.1, 0.9;
    const auto m = LatentConceptModel::markov(Eigen::Vector2d(0.5, 0.5), 2, 1, {a, b});
    const std::vector<Token> p = {0};
    const double w0 = 0.5 * 0.9 / (0.5 * 0.9 + 0.5 * 0.2);
    const double expected = w0 * 0.3 + (1 - w0) * 0.5;
    CHECK(std::abs(marginal_conditional(m, p)[0] - expected) <= 1e-12);
  }
  SUBCASE("random models agree with a product-form oracle") {
    for (int seed = 0; seed < 30; ++seed) {
      GeneratorRecipe g;
      g.num_concepts = 2 + seed % 5;
      g.alphabet_size = 2 + seed % 4;
      g.order = seed % 3;
      g.seed = static_cast<std::uint64_t>(seed);
      g.dirichlet_prior = true;
      const auto m = generate_model(g);
      Rng rng(100 + seed);
      const auto s = generate_sequence(m, sample_concept(m, rng), 30, rng);
      for (std::size_t i = 0; i <= s.size(); i += 5) {
        const VectorXd q = marginal_conditional(m, s.prefix(i));
        CHECK(std::abs(q.sum() - 1.0) <= 1e-10);
        CHECK((q - brute_marginal(m, s.prefix(i))).cwiseAbs().maxCoeff() <= 1e-10);
      }
    }
  }
}

TEST_CASE("pair models") {
  SUBCASE("stream layout and response rows") {
    const auto m = flip_pairs();
    CHECK(m.block_length() == 2);
    CHECK(!m.is_response_position(0));
    CHECK(m.is_response_position(1));
    Rng rng(1);
    const auto s = generate_examples(m, 1, 10, rng);
    CHECK(s.size() == 20);
    CHECK(s.num_responses() == 10);
    CHECK(s.response_offsets[3] == 7);
    const std::vector<Token> prefix = {1};
    CHECK(conditional(m, 1, prefix)[1] == doctest::Approx(0.9));
    CHECK(conditional(m, 1, {})[1] == doctest::Approx(0.5));
  }
  SUBCASE("covariate conditionals are marginals of the law") {
    VectorXd law(4);
    law << 0.1, 0.2, 0.3, 0.4;  // atoms (c1,c2) = 00,01,10,11
    const MatrixXd resp = MatrixXd::Constant(4, 2, 0.5);
    const auto m = LatentConceptModel::pairs(VectorXd::Constant(1, 1.0), 2, 2, {law}, {resp});
    CHECK(conditional(m, 0, {})[1] == doctest::Approx(0.7));
    const std::vector<Token> c1 = {1};
    CHECK(conditional(m, 0, c1)[1] == doctest::Approx(0.4 / 0.7));
    const std::vector<Token> next_block = {0, 1, 0};
    CHECK(conditional(m, 0, next_block)[1] == doctest::Approx(0.7));
  }
}

TEST_CASE("kl_pair") {
  const auto m = flip_pairs();
  CHECK(kl_pair(m, 0, 0) == 0.0);
  CHECK(kl_pair(m, 0, 1) == doctest::Approx(0.8 * std::log(9.0)).epsilon(1e-14));
  CHECK(std::abs(kl_pair(m, 0, 1) - 1.7578) < 1e-4);
  CHECK_THROWS_AS(kl_pair(m, 0, 1, 3.0), EnumerationCapExceeded);
  CHECK_THROWS_AS(kl_pair(two_token_chain(0.5, 0.5), 0, 0), InvalidModel);

  SUBCASE("nonnegative, zero only for identical laws") {
    for (int seed = 0; seed < 40; ++seed) {
      GeneratorRecipe g;
      g.structure = Structure::pairs;
      g.num_concepts = 3;
      g.alphabet_size = 3;
      g.covariate_length = 1 + seed % 2;
      g.shared_covariates = seed % 3 == 0;
      g.seed = static_cast<std::uint64_t>(seed);
      const auto pm = generate_model(g);
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          const double d = kl_pair(pm, a, b);
          CHECK(d >= 0.0);
          if (a == b) CHECK(d == 0.0);
          else CHECK(d > 1e-12);
        }
      }
    }
  }
}

TEST_CASE("mixing time") {
  Eigen::Matrix2d flip;
  flip << 0.5, 0.5, 0.5, 0.5;
  CHECK(estimate_mixing_time(flip, 0.25) == 1);
  CHECK_THROWS_AS(estimate_mixing_time(Eigen::MatrixXd::Identity(2, 2), 0.25), NonMixingChain);
  Eigen::Matrix2d periodic;
  periodic << 0, 1, 1, 0;
  CHECK_THROWS_AS(estimate_mixing_time(periodic, 0.25), NonMixingChain);

  // Lazy chain: d(t) = 0.5 * 0.8^t, so the first t with d(t) <= 1/4 is 4.
  Eigen::Matrix2d lazy;
  lazy << 0.9, 0.1, 0.1, 0.9;
  std::size_t scan = 0;
  while (0.5 * std::pow(0.8, static_cast<double>(scan)) > 0.25) ++scan;
  CHECK(estimate_mixing_time(lazy, 0.25) == scan);
  CHECK(scan == 4);

  SUBCASE("model context chain") {
    const auto m = two_token_chain(0.9, 0.9);
    CHECK(estimate_mixing_time(m, 0, 0.25) == 4);
  }
  SUBCASE("result is the first time below epsilon") {
    GeneratorRecipe g;
    g.num_concepts = 1;
    g.alphabet_size = 3;
    g.order = 2;
    g.concentration = 0.3;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      g.seed = seed;
      const auto m = generate_model(g);
      const MatrixXd p = context_transition_matrix(m, 0);
      const VectorXd pi = stationary_distribution(p);
      CHECK((pi.transpose() * p - pi.transpose()).cwiseAbs().maxCoeff() < 1e-12);
      for (double eps : {0.3, 0.1, 0.01}) {
        const std::size_t t = estimate_mixing_time(m, 0, eps);
        MatrixXd power = MatrixXd::Identity(p.rows(), p.cols());
        for (std::size_t i = 0; i + 1 < t; ++i) power = power * p;
        if (t > 0) CHECK(worst_case_tv(power, pi) > eps);
        CHECK(worst_case_tv(power * p, pi) <= eps);
      }
    }
  }
}

TEST_CASE("validate_assumptions") {
  const auto uniform = LatentConceptModel::markov(VectorXd::Constant(2, 0.5), 4, 0,
                                                  {MatrixXd::Constant(1, 4, 0.25), MatrixXd::Constant(1, 4, 0.25)});
  const AssumptionReport u = validate_assumptions(uniform);
  CHECK(u.c0 == 0.25);
  CHECK(u.c1 == 0.5);
  REQUIRE(u.margins.size() == 2);
  CHECK(u.margins[0] < 0.0);
  CHECK(u.margins[0] == doctest::Approx(-2.0 * std::log(4.0)));

  const AssumptionReport r = validate_assumptions(flip_pairs());
  CHECK(r.c0 == doctest::Approx(0.1));
  CHECK(r.margins[0] == doctest::Approx(0.8 * std::log(9.0) - 2.0 * std::log(10.0)));
  CHECK(std::abs(r.margins[0] + 2.848) < 1e-3);
  CHECK(!r.distinguishable[0]);
  CHECK(r.positive);
  CHECK(r.prior_positive);
}

TEST_CASE("construction rejects invalid models") {
  MatrixXd bad(3, 2);
  bad << 0.5, 0.5, 0.6, 0.5, 0.5, 0.5;
  CHECK_THROWS_AS(LatentConceptModel::markov(VectorXd::Constant(1, 1.0), 2, 1, {bad}), InvalidModel);
  CHECK_THROWS_AS(LatentConceptModel::markov(Eigen::Vector2d(0.5, 0.6), 2, 0,
                                             {MatrixXd::Constant(1, 2, 0.5), MatrixXd::Constant(1, 2, 0.5)}),
                  InvalidModel);
  CHECK_THROWS_AS(LatentConceptModel::markov(VectorXd::Constant(1, 1.0), 2, 1, {MatrixXd::Constant(2, 2, 0.5)}),
                  InvalidModel);
  MatrixXd low(1, 2);
  low << 0.05, 0.95;
  CHECK_THROWS_AS(LatentConceptModel::markov(VectorXd::Constant(1, 1.0), 2, 0, {low}, 0.1), InvalidModel);
  TokenSequence s{{0, 5}, {}};
  CHECK_THROWS_AS(s.validate(3), InvalidModel);
  TokenSequence o{{0, 1, 2}, {2, 1}};
  CHECK_THROWS_AS(o.validate(3), InvalidModel);
}

TEST_CASE("model files round-trip bit-exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "icl_model_io_test";
  std::filesystem::create_directories(dir);
  for (int seed = 0; seed < 6; ++seed) {
    GeneratorRecipe g;
    g.structure = seed % 2 ? Structure::pairs : Structure::markov;
    g.covariate_length = 2;
    g.shared_covariates = seed % 4 == 1;
    g.alphabet_size = 3;
    g.order = seed % 3;
    g.dirichlet_prior = true;
    g.seed = static_cast<std::uint64_t>(seed);
    const auto m = generate_model(g);
    const auto path = dir / ("m" + std::to_string(seed) + ".json");
    save_model(m, path);
    CHECK(load_model(path) == m);
  }
  const nlohmann::json recipe_doc = {{"format", "icl-concept-model"}, {"version", 1},
                                     {"generator", {{"num_concepts", 3}, {"seed", 9}}}};
  GeneratorRecipe g;
  g.num_concepts = 3;
  g.seed = 9;
  CHECK(model_from_json(recipe_doc) == generate_model(g));
  CHECK_THROWS_AS(model_from_json({{"generator", {{"bogus", 1}}}}), SchemaError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("shipped fixture models load") {
  const std::filesystem::path dir(ICL_FIXTURE_DIR);
  for (const auto& name : {"markov_3c.json", "pairs_distinguishable.json"}) {
    const auto m = load_model(dir / name);
    CHECK(m.num_concepts() >= 2);
  }
  const auto pairs = load_model(dir / "pairs_distinguishable.json");
  const auto report = validate_assumptions(pairs);
  for (double margin : report.margins) CHECK(margin > 0.0);
}
