// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1
// if any fails. Tolerances and runtime budgets are fixed below.

#include <Eigen/LU>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <json.hpp>
#include <limits>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "icl/bma.hpp"
#include "icl/concept_model.hpp"
#include "icl/experiment.hpp"
#include "icl/kernel_attention.hpp"
#include "icl/metrics.hpp"
#include "icl/model_io.hpp"
#include "icl/robustness.hpp"
#include "icl/training.hpp"
#include "icl/transformer.hpp"

using namespace icl;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kIdentityTol1 = 1e-10;
constexpr double kRegretTol = 1e-9;
constexpr double kRidgeTol = 1e-8;
constexpr double kPredictiveTol = 1e-10;
constexpr double kFloorTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kDecompTol = 1e-9;
constexpr double kSphereCosine = 0.99;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double budget_seconds, const std::function<Verdict()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = secs <= budget_seconds;
  const bool pass = v.pass && in_time;
  if (!pass) ++failures;
  std::printf("[%s] %2d %s: %s (%.1f s, budget %.0f s%s)\n", pass ? "PASS" : "FAIL", id, name.c_str(), v.detail.c_str(),
              secs, budget_seconds, in_time ? "" : ", over budget");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fixture(const std::string& name) { return std::string(ICL_FIXTURE_DIR) + "/" + name; }

LatentConceptModel random_tabular(Rng& rng, bool allow_pairs) {
  GeneratorRecipe g;
  g.num_concepts = 1 + static_cast<int>(rng.uniform_int(8));
  const bool pairs = allow_pairs && rng.uniform_int(4) == 0;
  if (pairs) {
    g.structure = Structure::pairs;
    g.alphabet_size = 2 + static_cast<int>(rng.uniform_int(3));
    g.covariate_length = 1 + static_cast<int>(rng.uniform_int(2));
    g.shared_covariates = rng.uniform_int(2) == 0;
  } else {
    g.alphabet_size = 2 + static_cast<int>(rng.uniform_int(7));
    g.order = static_cast<int>(rng.uniform_int(3));
  }
  const double c0s[] = {1e-3, 1e-2, 0.5};
  g.c0 = c0s[rng.uniform_int(3)] / g.alphabet_size;
  const double concentrations[] = {0.3, 1.0, 3.0};
  g.concentration = concentrations[rng.uniform_int(3)];
  g.dirichlet_prior = rng.uniform_int(2) == 0;
  g.seed = rng.uniform_int(1u << 30);
  return generate_model(g);
}

// Posterior-weighted mixture from the chain rule applied token by token.
VectorXd brute_mixture(const LatentConceptModel& m, const std::vector<Token>& prefix) {
  const int k = m.num_concepts();
  VectorXd logw(k);
  for (int z = 0; z < k; ++z) {
    double lw = std::log(m.prior()[z]);
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      lw += std::log(m.row(z, std::span<const Token>(prefix.data(), i))[prefix[i]]);
    }
    logw[z] = lw;
  }
  const double mx = logw.maxCoeff();
  VectorXd w = (logw.array() - mx).exp();
  w /= w.sum();
  VectorXd out = VectorXd::Zero(m.alphabet_size());
  for (int z = 0; z < k; ++z) out += w[z] * m.row(z, prefix).transpose();
  return out;
}

VectorXd primal_ridge(const MatrixXd& keys, const MatrixXd& values, const VectorXd& q, double ridge) {
  const MatrixXd a = keys.transpose() * keys + ridge * MatrixXd::Identity(keys.cols(), keys.cols());
  const MatrixXd m = (a.partialPivLu().solve(keys.transpose() * values)).transpose();  // d_v x d
  return m * q;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ICL_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

LatentConceptModel two_concept_model(int order) {
  GeneratorRecipe g;
  g.num_concepts = 2;
  g.alphabet_size = 4;
  g.order = order;
  g.c0 = 0.02;
  g.concentration = 0.5;
  g.seed = 11;
  return generate_model(g);
}

}  // namespace

int main() {
  criterion(1, "BMA identity", 10, [] {
    Rng rng(101);
    double worst = 0.0;
    std::size_t prefixes = 0;
    for (int m = 0; m < 200; ++m) {
      Rng mr = rng.fork(m);
      const LatentConceptModel model = random_tabular(mr, true);
      for (int p = 0; p < 50; ++p) {
        const std::size_t len = mr.uniform_int(41);
        const ConceptId z = sample_concept(model, mr);
        const std::vector<Token> prefix = generate_sequence(model, z, len, mr).tokens;
        const VectorXd got = marginal_conditional(model, prefix);
        worst = std::max(worst, (got - brute_mixture(model, prefix)).cwiseAbs().maxCoeff());
        ++prefixes;
      }
    }
    return Verdict{prefixes == 10000 && worst <= kIdentityTol1,
                   fmt("max deviation %.3g", worst) + " over " + std::to_string(prefixes) + " prefixes"};
  });

  criterion(2, "BMA regret bound", 30, [] {
    Rng rng(202);
    std::size_t violations = 0, rows = 0, trajectories = 0;
    double max_excess = -1e300, max_mismatch = 0.0;
    for (int m = 0; m < 20; ++m) {
      Rng mr = rng.fork(m);
      LatentConceptModel model = random_tabular(mr, false);
      while (model.num_concepts() < 2) model = random_tabular(mr, false);
      const BmaPredictor bma(model);
      for (int k = 0; k < 5; ++k) {
        const ConceptId z = sample_concept(model, mr);
        const TokenSequence seq = generate_examples(model, z, 500, mr);
        const RegretCurve curve = regret(model, seq, bma);
        // Independent pass: log-domain posterior updated token by token.
        const int nz = model.num_concepts();
        VectorXd logw = model.prior().array().log();
        VectorXd cum = VectorXd::Zero(nz);
        double cum_bma = 0.0;
        std::size_t t = 0;
        for (std::size_t pos = 0; pos < seq.size(); ++pos) {
          const std::span<const Token> prefix = seq.prefix(pos);
          const Token tok = seq.tokens[pos];
          VectorXd step(nz);
          for (int c = 0; c < nz; ++c) step[c] = std::log(model.row(c, prefix)[tok]);
          const bool response = model.is_response_position(pos);
          if (response) {
            const VectorXd w = (logw.array() - logw.maxCoeff()).exp();
            cum_bma += std::log(w.dot(step.array().exp().matrix()) / w.sum());
            cum += step;
          }
          logw += step;
          if (!response) continue;
          ++t;
          double best = -std::numeric_limits<double>::infinity(), best_prior = 0.0;
          for (int c = 0; c < nz; ++c) {
            if (cum[c] > best || (cum[c] == best && model.prior()[c] > best_prior)) {
              best = cum[c];
              best_prior = model.prior()[c];
            }
          }
          const double r = (best - cum_bma) / static_cast<double>(t);
          const double bound = std::log(1.0 / best_prior) / static_cast<double>(t);
          max_excess = std::max(max_excess, r - bound);
          if (r > bound + kRegretTol || curve.regret[t - 1] > curve.bound[t - 1] + kRegretTol) ++violations;
          max_mismatch = std::max(max_mismatch, std::abs(r - curve.regret[t - 1]));
          ++rows;
        }
        ++trajectories;
      }
    }
    return Verdict{violations == 0 && rows == 100 * 500 && max_mismatch < 1e-9,
                   std::to_string(violations) + " violations in " + std::to_string(rows) + " rows of " +
                       std::to_string(trajectories) + " trajectories" + fmt(", max regret - bound %.3g", max_excess) +
                       fmt(", library vs oracle %.3g", max_mismatch)};
  });

  criterion(3, "kernel ridge attention equivalence", 5, [] {
    Rng rng(303);
    double worst_ridge = 0.0, worst_pred = 0.0, worst_dagger_pred = 0.0;
    for (int s = 0; s < 500; ++s) {
      Rng r = rng.fork(s);
      const int t = 2 + static_cast<int>(r.uniform_int(30));
      const int d = 1 + static_cast<int>(r.uniform_int(8));
      const int dv = 1 + static_cast<int>(r.uniform_int(4));
      KernelScene<double> scene;
      scene.keys = r.normal_matrix(t, d);
      scene.values = r.normal_matrix(t, dv);
      scene.query = r.normal_vector(d);
      scene.kernel = Kernel::linear();
      scene.ridge = 0.05 + 2.0 * r.uniform();
      const VectorXd dagger = attn_dagger(scene);
      const VectorXd oracle = primal_ridge(scene.keys, scene.values, scene.query, scene.ridge);
      const VectorXd feat = feature_ridge<double>(scene.keys, scene.values, scene.query, scene.ridge);
      worst_ridge = std::max({worst_ridge, (dagger - oracle).cwiseAbs().maxCoeff(), (dagger - feat).cwiseAbs().maxCoeff()});

      GaussianLinearTask task;
      task.z_star = r.normal_matrix(dv, d);
      task.noise_sigma = 0.2 + 1.3 * r.uniform();
      task.prior_lambda = 0.5 + 1.5 * r.uniform();
      const MatrixXd values = sample_gaussian_linear(task, scene.keys, r);
      const VectorXd mean = gaussian_predictive(task, scene.keys, values, scene.query).mean;
      const double lambda = task.noise_sigma * task.noise_sigma / task.prior_lambda;
      worst_pred = std::max(worst_pred, (mean - primal_ridge(scene.keys, values, scene.query, lambda)).cwiseAbs().maxCoeff());
      KernelScene<double> bayes = scene;
      bayes.values = values;
      bayes.ridge = task.equivalent_ridge();
      worst_dagger_pred = std::max(worst_dagger_pred, (attn_dagger(bayes) - mean).cwiseAbs().maxCoeff());
    }
    return Verdict{worst_ridge <= kRidgeTol && worst_pred <= kPredictiveTol && worst_dagger_pred <= kPredictiveTol,
                   fmt("ridge %.3g", worst_ridge) + fmt(", predictive %.3g", worst_pred) +
                       fmt(", attention vs predictive %.3g", worst_dagger_pred)};
  });

  criterion(4, "kernel attention approaches softmax attention", 300, [] {
    ConvergenceConfig cfg;  // T in {16, ..., 4096}, d = 8, 64 trials, ridge T^0.75, RBF kernel
    const std::vector<ConvergencePoint> pts = convergence_experiment(cfg, Rng(3));
    bool decreasing = pts.size() == 5;
    std::string trace;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i > 0 && !(pts[i].mean_distance < pts[i - 1].mean_distance)) decreasing = false;
      trace += (i ? " " : "") + fmt("%.4g", pts[i].mean_distance);
    }
    const double ratio = pts.back().mean_distance / pts.front().mean_distance;
    return Verdict{decreasing && ratio < 0.5, "e(T) = " + trace + fmt(", e(4096)/e(16) = %.3f", ratio)};
  });

  TransformerShape lemma_shape;
  lemma_shape.d = 6;
  lemma_shape.d_y = 3;
  lemma_shape.d_f = 8;
  lemma_shape.heads = 2;

  criterion(5, "forward-pass floor", 30, [&] {
    Rng rng(505);
    std::size_t violations = 0;
    double min_margin = 1.0;
    for (int k = 0; k < 1000; ++k) {
      Rng r = rng.fork(k);
      TransformerShape s = lemma_shape;
      s.depth = 1 + k % 3;
      s.tau = k % 2 ? 1.0 : 0.5;
      s.bounds.b_a = 1.0 + 3.0 * r.uniform();
      const TransformerParams p = random_params(s, r, 3.0);
      if (!in_theta(p)) ++violations;
      MatrixXd x(1 + k % 9, s.d);
      for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) = r.normal_vector(s.d).transpose() * (3.0 * r.uniform());
      const double floor = 1.0 / (1.0 + s.d_y * std::exp(s.bounds.b_a / s.tau));
      const double lo = forward(p, x).minCoeff();
      min_margin = std::min(min_margin, lo - floor);
      if (lo < floor - kFloorTol) ++violations;
    }
    return Verdict{violations == 0, std::to_string(violations) + " violations" + fmt(", min(output - floor) %.3g", min_margin)};
  });

  criterion(6, "parameter fluctuation bound", 60, [&] {
    const FluctuationSweep f = fluctuation_sweep(lemma_shape, 100, 20, 1.0, Rng(606));
    return Verdict{f.violations == 0 && f.checks == 2000,
                   std::to_string(f.violations) + " violations in " + std::to_string(f.checks) + fmt(" checks, max TV/bound %.3g", f.max_ratio)};
  });

  criterion(7, "gradient correctness", 60, [&] {
    const GradientSweep g = gradient_sweep(lemma_shape, 50, Rng(707));
    return Verdict{g.checked == 50 && g.max_rel_error < kGradTol,
                   std::to_string(g.checked) + "/50 seeds checked" + fmt(", max relative error %.3g", g.max_rel_error)};
  });

  criterion(8, "TV trend over pretraining size", 1200, [] {
    TvGridConfig c;
    auto& s = c.base.shape;
    s.d = 16;
    s.d_y = 4;
    s.d_f = 32;
    s.heads = 2;
    s.depth = 2;
    s.bounds.b_a = 10;
    c.base.train.optimizer = Optimizer::adam;
    c.base.train.learning_rate = 0.01;
    c.base.train.final_lr_fraction = 0.1;
    c.base.train.steps = 2000;
    c.base.train.batch_size = 64;
    c.num_sequences = {32, 128, 512};  // N_p T_p = 2^9, 2^11, 2^13
    c.horizon = 16;
    c.seeds = 5;
    c.eval_prefixes = 2000;
    const TvGridResult r = tv_grid(two_concept_model(0), c, Rng(2024));
    std::string trace;
    for (const auto& cell : r.cells) {
      trace += (trace.empty() ? "" : ", ") + std::to_string(cell.num_sequences * cell.horizon) +
               fmt(": %.4f", cell.median_tv) + fmt(" +- %.4f", cell.sem_tv);
    }
    return Verdict{r.non_increasing_within_sem, "median TV by pretraining tokens " + trace};
  });

  criterion(9, "KL trend over depth", 1200, [] {
    DepthSweepConfig c;
    auto& s = c.base.shape;
    s.d = 16;
    s.d_y = 4;
    s.d_f = 64;
    s.heads = 2;
    s.bounds.b_a = 10;
    s.bounds.b_a1 = 128;
    s.bounds.b_a2 = 64;
    s.bounds.b_v = 4;
    s.bounds.b_q = 4;
    s.bounds.b_k = 4;
    c.base.embedding.radius = 2.0;
    c.base.embedding.position_weight = 0.5;
    c.base.init = InitKind::residual;
    c.base.num_sequences = 64;
    c.base.horizon = 16;
    c.base.train.optimizer = Optimizer::adam;
    c.base.train.learning_rate = 0.003;
    c.base.train.final_lr_fraction = 0.1;
    c.base.train.batch_size = 64;
    c.depths = {1, 2, 3, 4};
    c.restarts = 3;
    c.steps_per_layer = 1500;
    const DepthSweepResult r = depth_sweep(two_concept_model(1), c, Rng(2024));
    std::string trace;
    for (const auto& row : r.rows) trace += (trace.empty() ? "" : ", ") + std::to_string(row.depth) + fmt(": %.3g", row.best_kl);
    return Verdict{r.non_increasing, "best KL " + trace};
  });

  criterion(10, "robustness to flipped responses", 120, [] {
    const LatentConceptModel model = load_model(fixture("pairs_distinguishable.json"));
    PerturbationPolicy policy;
    policy.kind = PerturbationKind::flip_uniform;
    policy.rho = 0.2;
    const RobustnessCurve c =
        robustness_curve(BmaPredictor(model), model, 0, policy, {25, 49, 100, 196, 400}, 400, Rng(1010));
    const double slope = c.log_kl_slope();
    return Verdict{c.margin > 0.0 && slope < 0.0, fmt("margin %.3f", c.margin) + fmt(", slope %.4g", slope)};
  });

  criterion(11, "pretrained regret decomposition", 60, [] {
    const LatentConceptModel model = load_model(fixture("markov_3c.json"));
    PretrainSetup setup;
    setup.shape.d = 12;
    setup.shape.d_y = model.alphabet_size();
    setup.shape.d_f = 16;
    setup.shape.heads = 2;
    setup.shape.depth = 1;
    setup.shape.bounds.b_a = 6;
    setup.train.optimizer = Optimizer::adam;
    setup.train.learning_rate = 0.01;
    setup.train.steps = 300;
    setup.train.batch_size = 32;
    setup.num_sequences = 32;
    setup.horizon = 16;
    const PretrainRun run = pretrain(model, setup, Rng(1111));
    const TokenEmbeddingTable emb = make_embedding(setup.embedding, model.alphabet_size(), setup.shape.d);
    const DecompositionReport rep = pretrained_regret_decomposition(TransformerPredictor(run.result.params, emb), model,
                                                                    model, 50, 50, Rng(1112));
    double worst = 0.0;
    bool all = rep.rows.size() == 50 && rep.uncovered == 0;
    for (const auto& row : rep.rows) {
      const double e = std::abs(row.total - (row.oracle + row.log_ratio));
      if (!(e <= kDecompTol)) all = false;
      worst = std::max(worst, e);
    }
    return Verdict{all, std::to_string(rep.rows.size()) + " trajectories" + fmt(", max |total - oracle - log ratio| %.3g", worst) +
                            fmt(", mean oracle term %.4f", rep.mean_oracle) + fmt(", mean log-ratio term %.4f", rep.mean_log_ratio)};
  });

  criterion(12, "TV-KL lemma and sphere integral", 120, [] {
    const TvKlSweep tk = tv_kl_sweep(10000, 8, Rng(1212));
    std::string detail = std::to_string(tk.kl_tv_violations + tk.pinsker_violations) + " TV-KL violations in " +
                         std::to_string(tk.pairs) + " pairs";
    bool ok = tk.pairs == 10000 && tk.kl_tv_violations == 0 && tk.pinsker_violations == 0;
    Rng rng(1213);
    for (int d : {2, 8}) {
      Rng r = rng.fork(static_cast<std::uint64_t>(d));
      const VectorXd b = r.unit_sphere(d);
      const SphereIntegral s = sphere_integral_check(b, 1.0, 1'000'000, r);
      ok = ok && s.cosine > kSphereCosine;
      detail += ", d=" + std::to_string(d) + fmt(" cosine %.6f", s.cosine);
    }
    return Verdict{ok, detail};
  });

  criterion(13, "determinism of every subcommand", 300, [] {
    const fs::path work = fs::temp_directory_path() / "icl_acceptance_determinism";
    fs::remove_all(work);
    fs::create_directories(work);
    const json gen = {{"num_concepts", 2}, {"alphabet_size", 3}, {"order", 0}, {"c0", 0.05}, {"seed", 4}};
    const json net = {{"d", 8}, {"d_y", 3}, {"d_f", 8}, {"heads", 1}, {"depth", 1}};
    const json train = {{"optimizer", "adam"}, {"steps", 25}, {"batch_size", 16}};
    const json emb = {{"position_dims", 2}};
    const std::vector<std::pair<std::string, json>> runs = {
        {"gen-model", {{"seed", 5}, {"generator", {{"num_concepts", 3}, {"alphabet_size", 3}}}}},
        {"bma-regret", {{"seed", 7}, {"model", {{"path", fixture("markov_3c.json")}}}, {"trajectories", 10}, {"horizon", 100}}},
        {"attn-converge", {{"seed", 3}, {"t_grid", {8, 32}}, {"trials", 8}}},
        {"pretrain", {{"model", {{"generator", gen}}}, {"network", net}, {"train", train}, {"embedding", emb},
                      {"num_sequences", 8}, {"horizon", 6}, {"eval_prefixes", 40}}},
        {"eval-tv", {{"model", {{"generator", gen}}}, {"network", net}, {"train", train}, {"embedding", emb},
                     {"num_sequences_grid", {4, 8}}, {"horizon", 6}, {"seeds", 2}, {"eval_prefixes", 40}}},
        {"depth-sweep", {{"model", {{"generator", gen}}}, {"network", {{"d", 8}, {"d_y", 3}, {"d_f", 8}, {"heads", 1}}},
                         {"train", train}, {"embedding", emb}, {"num_sequences", 8}, {"horizon", 6},
                         {"depths", {1, 2}}, {"restarts", 2}, {"steps_per_layer", 10}}},
        {"robustness", {{"model", {{"path", fixture("pairs_distinguishable.json")}}}, {"t_grid", {4, 9, 16}}, {"trials", 20}}},
        {"regret-decomp", {{"model", {{"path", fixture("markov_3c.json")}}}, {"predictor", "uniform"}, {"horizon", 20}, {"trials", 10}}},
        {"check-lemmas", {{"tv_kl", {{"pairs", 100}}}, {"floor", {{"trials", 20}}}, {"fluctuation", {{"pairs", 4}, {"inputs_per_pair", 3}}},
                          {"gradient", {{"seeds", 2}}}, {"sphere", {{"samples", 2000}}}}}};
    std::size_t identical = 0;
    std::string failed;
    for (const auto& [name, cfg] : runs) {
      const fs::path config = work / (name + ".json");
      std::ofstream(config) << cfg.dump(2);
      const fs::path a = work / (name + "_a"), b = work / (name + "_b"), c = work / (name + "_c");
      const int ca = run_cli(name + " --config " + config.string() + " --out " + a.string() + " --deterministic");
      const int cb = run_cli(name + " --config " + config.string() + " --out " + b.string() + " --deterministic --threads 2");
      const int cc = run_cli(name + " --config " + config.string() + " --out " + c.string());
      bool same = ca == 0 && cb == 0 && cc == 0 && slurp(a / "results.json") == slurp(b / "results.json") &&
                  slurp(a / "manifest.json") == slurp(b / "manifest.json");
      if (same) {
        const json ra = json::parse(slurp(a / "results.json")), rc = json::parse(slurp(c / "results.json"));
        same = ra["payload"] == rc["payload"] && ra["config_hash"] == rc["config_hash"] &&
               run_cli(name + " --config " + config.string() + " --out " + a.string() + " --verify") == 0;
      }
      if (same) ++identical;
      else failed += " " + name;
    }
    return Verdict{identical == runs.size(),
                   std::to_string(identical) + "/" + std::to_string(runs.size()) + " subcommands reproduce bit-for-bit" +
                       (failed.empty() ? "" : "; differing:" + failed)};
  });

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
