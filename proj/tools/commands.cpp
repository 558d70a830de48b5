#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>

#include "icl/bma.hpp"
#include "icl/checkpoint.hpp"
#include "icl/concept_model.hpp"
#include "icl/errors.hpp"
#include "icl/experiment.hpp"
#include "icl/kernel_attention.hpp"
#include "icl/metrics.hpp"
#include "icl/model_io.hpp"
#include "icl/parallel.hpp"
#include "icl/robustness.hpp"
#include "icl/training.hpp"

namespace icl::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Context {
  json config;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct Outcome {
  json payload;
  int exit_code = kSuccess;
  std::string summary;
};

struct Command {
  SubcommandInfo info;
  std::function<json()> defaults;
  std::vector<json::json_pointer> paths;  // string entries resolved against the config directory
  std::function<Outcome(const Context&, ArtifactWriter&)> run;
};

json common(json extra) {
  json j = {{"schema_version", kSchemaVersion}, {"seed", 0}, {"out", nullptr}};
  j.update(extra);
  return j;
}

json model_slot() { return {{"path", nullptr}, {"generator", nullptr}}; }

bool model_given(const json& slot) { return !slot.at("path").is_null() || !slot.at("generator").is_null(); }

LatentConceptModel load_model_slot(const json& slot, const std::string& where) {
  const bool has_path = !slot.at("path").is_null();
  const bool has_gen = !slot.at("generator").is_null();
  if (has_path == has_gen) throw SchemaError(where, "give exactly one of path or generator");
  if (has_path) {
    if (!slot.at("path").is_string()) throw SchemaError(where + ".path", "expected a string");
    return load_model(slot.at("path").get<std::string>());
  }
  try {
    return generate_model(recipe_from_json(slot.at("generator")));
  } catch (const SchemaError& e) {
    throw SchemaError(where + "." + e.key_path(), "unknown or invalid generator field");
  }
}

json shape_defaults() { return shape_to_json(TransformerShape{}); }

TransformerShape shape_from(const json& j) {
  TransformerShape s = shape_from_json(j, "network");
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw SchemaError("network", e.what());
  }
  return s;
}

template <typename T>
T optional_int(const json& v, const std::string& where, T fallback) {
  if (v.is_null()) return fallback;
  if (!v.is_number_integer()) throw SchemaError(where, "expected an integer or null");
  return v.get<T>();
}

std::string optional_string(const json& v, const std::string& where) {
  if (v.is_null()) return {};
  if (!v.is_string()) throw SchemaError(where, "expected a string or null");
  return v.get<std::string>();
}

std::vector<std::size_t> size_list(const json& v, const std::string& where) {
  std::vector<std::size_t> out;
  for (const auto& x : v) out.push_back(x.get<std::size_t>());
  if (out.empty()) throw SchemaError(where, "must not be empty");
  return out;
}

std::string csv_text(const std::function<void(std::ostream&)>& fn) {
  std::ostringstream os;
  fn(os);
  return os.str();
}

PretrainSetup setup_from(const json& c) {
  PretrainSetup s;
  s.shape = shape_from(c.at("network"));
  s.train = train_from_json(c.at("train"));
  s.embedding = embedding_from_json(c.at("embedding"));
  try {
    s.init = init_from_name(c.at("init"));
  } catch (const std::invalid_argument&) {
    throw SchemaError("init", "expected random or residual");
  }
  if (c.contains("num_sequences")) s.num_sequences = c.at("num_sequences");
  s.horizon = c.at("horizon");
  return s;
}

json pretrain_keys() {
  return {{"network", shape_defaults()},
          {"train", train_to_json(TrainConfig{})},
          {"embedding", embedding_to_json(EmbeddingSpec{})},
          {"init", "random"},
          {"num_sequences", 64},
          {"horizon", 16}};
}

struct LoadedNetwork {
  TransformerParams params;
  EmbeddingSpec embedding;
};

LoadedNetwork load_network(const std::string& path, int alphabet_size) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.metadata.contains("embedding")) throw FormatError(path + ": checkpoint records no embedding");
  LoadedNetwork n{std::move(ck.params), embedding_from_json(ck.metadata.at("embedding"), "checkpoint.embedding")};
  if (n.params.shape.head != HeadKind::softmax || n.params.shape.d_y != alphabet_size) {
    throw ShapeMismatch(path + ": checkpoint is not a next-token network over " + std::to_string(alphabet_size) + " tokens");
  }
  return n;
}

json tv_report_json(const TvReport& r) {
  return {{"mean_tv", r.mean_tv}, {"sem_tv", r.sem_tv},           {"mean_kl", r.mean_kl},
          {"sem_kl", r.sem_kl},   {"count", r.count},             {"kl_infinite", r.kl_infinite},
          {"pinsker_violations", r.pinsker_violations}};
}

// ---------------------------------------------------------------------------

Outcome gen_model(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  json recipe = c.at("generator");
  recipe["seed"] = ctx.seed;
  const LatentConceptModel model = generate_model(recipe_from_json(recipe));
  w.write_text("model.json", model_to_json(model).dump(2) + "\n");

  const AssumptionReport a = validate_assumptions(model, c.at("enumeration_cap").get<double>());
  json payload = {{"num_concepts", model.num_concepts()},
                  {"alphabet_size", model.alphabet_size()},
                  {"structure", model.structure() == Structure::markov ? "markov" : "pairs"},
                  {"c0", a.c0},
                  {"c1", a.c1},
                  {"positive", a.positive},
                  {"prior_positive", a.prior_positive},
                  {"margins", a.margins},
                  {"min_kl_pair", a.min_kl_pair}};
  if (!a.margins.empty()) {
    std::vector<std::vector<double>> rows;
    for (std::size_t z = 0; z < a.margins.size(); ++z) {
      rows.push_back({static_cast<double>(z), a.margins[z], a.min_kl_pair[z], a.distinguishable[z] ? 1.0 : 0.0});
    }
    w.write_csv("assumptions.csv", {"z_star", "margin", "min_kl_pair", "distinguishable"}, rows);
  }
  if (model.structure() == Structure::markov) {
    const double eps = c.at("mixing_epsilon");
    std::vector<std::vector<double>> rows;
    json times = json::array();
    for (ConceptId z = 0; z < model.num_concepts(); ++z) {
      try {
        const std::size_t t = estimate_mixing_time(model, z, eps);
        rows.push_back({static_cast<double>(z), static_cast<double>(t)});
        times.push_back(t);
      } catch (const NonMixingChain&) {
        rows.push_back({static_cast<double>(z), std::numeric_limits<double>::quiet_NaN()});
        times.push_back(nullptr);
      }
    }
    w.write_csv("mixing.csv", {"concept", "mixing_time"}, rows);
    payload["mixing_times"] = times;
  }
  return {payload, kSuccess, "model with " + std::to_string(model.num_concepts()) + " concepts, c0 " + std::to_string(a.c0)};
}

Outcome bma_regret(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const LatentConceptModel model = load_model_slot(c.at("model"), "model");
  const std::size_t trajectories = c.at("trajectories");
  const std::size_t horizon = c.at("horizon");
  const int fixed = optional_int<int>(c.at("z_star"), "z_star", -1);
  if (fixed >= 0) model.check_concept(fixed);
  const bool sure = bma_bound_is_sure(model);
  const BmaPredictor bma(model);
  const Rng root(ctx.seed);

  std::vector<RegretCurve> curves(trajectories);
  std::vector<ConceptId> stars(trajectories);
  parallel_for(trajectories, ctx.threads, [&](std::size_t k) {
    Rng r = root.fork(k);
    stars[k] = fixed >= 0 ? fixed : sample_concept(model, r);
    curves[k] = regret(model, generate_examples(model, stars[k], horizon, r), bma);
  });

  std::vector<std::vector<double>> rows;
  std::size_t violations = 0;
  double max_excess = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> by_t(horizon);
  for (std::size_t k = 0; k < trajectories; ++k) {
    const RegretCurve& cv = curves[k];
    for (std::size_t t = 0; t < cv.size(); ++t) {
      const double excess = cv.regret[t] - cv.bound[t];
      if (cv.infinite[t] || excess > kInequalityTol) ++violations;
      max_excess = std::max(max_excess, excess);
      rows.push_back({static_cast<double>(k), static_cast<double>(t + 1), cv.regret[t], cv.bound[t],
                      static_cast<double>(cv.best_concept[t])});
      by_t[t].push_back(cv.regret[t]);
    }
  }
  w.write_csv("regret.csv", {"trajectory", "t", "regret", "bound", "best_concept"}, rows);
  std::vector<double> x, y, err;
  for (std::size_t t = 0; t < horizon; ++t) {
    const Summary s = summarize(by_t[t]);
    x.push_back(static_cast<double>(t + 1));
    y.push_back(s.mean);
    err.push_back(s.sem);
  }
  w.write_plot("plot_mean_regret.csv", x, y, err);

  json payload = {{"trajectories", trajectories},
                  {"horizon", horizon},
                  {"rows", rows.size()},
                  {"violations", violations},
                  {"max_excess", max_excess},
                  {"bound_is_sure", sure},
                  {"tolerance", kInequalityTol},
                  {"z_star", stars},
                  {"final_mean_regret", y.empty() ? 0.0 : y.back()}};
  const int code = sure && violations > 0 ? kSureInequalityFailed : kSuccess;
  return {payload, code, std::to_string(violations) + " bound violations over " + std::to_string(rows.size()) + " rows"};
}

Outcome attn_converge(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  ConvergenceConfig cfg;
  cfg.t_grid = size_list(c.at("t_grid"), "t_grid");
  cfg.d_k = c.at("d_k");
  cfg.d_v = c.at("d_v");
  cfg.trials = c.at("trials");
  cfg.gamma = c.at("gamma");
  cfg.ridge_exponent = c.at("ridge_exponent");
  cfg.threads = ctx.threads;
  const std::vector<ConvergencePoint> pts = convergence_experiment(cfg, Rng(ctx.seed));

  std::vector<std::vector<double>> rows;
  std::vector<double> x, y, err;
  json points = json::array();
  bool decreasing = true;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    rows.push_back({static_cast<double>(p.t), p.mean_distance, p.sem, p.fitted_c_mean, static_cast<double>(p.resampled),
                    static_cast<double>(p.jittered)});
    x.push_back(static_cast<double>(p.t));
    y.push_back(p.mean_distance);
    err.push_back(p.sem);
    points.push_back({{"t", p.t}, {"mean_distance", p.mean_distance}, {"sem", p.sem}, {"fitted_c_mean", p.fitted_c_mean}});
    if (i > 0 && !(p.mean_distance < pts[i - 1].mean_distance)) decreasing = false;
  }
  w.write_csv("convergence.csv", {"t", "mean_distance", "stderr", "fitted_c_mean", "resampled", "jittered"}, rows);
  w.write_plot("plot_convergence.csv", x, y, err);
  const double ratio = pts.back().mean_distance / pts.front().mean_distance;
  json payload = {{"points", points}, {"strictly_decreasing", decreasing}, {"last_over_first", ratio}};
  return {payload, kSuccess, "e(T) ratio last/first " + std::to_string(ratio)};
}

Outcome pretrain_cmd(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const LatentConceptModel model = load_model_slot(c.at("model"), "model");
  PretrainSetup setup = setup_from(c);
  setup.soft_targets = c.at("soft_targets");
  setup.train.threads = ctx.threads;
  const Rng root(ctx.seed);
  const PretrainRun run = pretrain(model, setup, root);

  save_checkpoint(run.result.params, ctx.seed, w.dir() / "checkpoint.bin",
                  {{"embedding", embedding_to_json(setup.embedding)}});
  w.add_file("checkpoint.bin");
  w.write_text("trace.csv", csv_text([&](std::ostream& os) { write_trace_csv(os, run.result.trace); }));
  std::vector<double> x, y, err;
  for (const auto& r : run.result.trace) {
    x.push_back(static_cast<double>(r.step));
    y.push_back(r.loss);
    err.push_back(0.0);
  }
  w.write_plot("plot_loss.csv", x, y, err);

  json payload = {{"final_loss", run.result.final_loss},
                  {"mean_target_entropy", run.mean_target_entropy},
                  {"steps", setup.train.steps},
                  {"examples", setup.num_sequences * setup.horizon},
                  {"head", setup.shape.head == HeadKind::softmax ? "softmax" : "l2"}};
  int code = kSuccess;
  std::string summary = "final loss " + std::to_string(run.result.final_loss);
  if (setup.shape.head == HeadKind::softmax) {
    const TokenEmbeddingTable emb = make_embedding(setup.embedding, model.alphabet_size(), setup.shape.d);
    Rng eval = root.fork(3);
    const TvReport rep = evaluate_tv(run.result.params, emb, model, c.at("eval_prefixes"), setup.horizon, eval, ctx.threads);
    payload["evaluation"] = tv_report_json(rep);
    if (rep.pinsker_violations > 0) code = kSureInequalityFailed;
    summary += ", mean TV " + std::to_string(rep.mean_tv);
  }
  return {payload, code, summary};
}

Outcome eval_tv(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const LatentConceptModel model = load_model_slot(c.at("model"), "model");
  const std::string checkpoint = optional_string(c.at("checkpoint"), "checkpoint");
  if (!checkpoint.empty()) {
    const LoadedNetwork net = load_network(checkpoint, model.alphabet_size());
    const TokenEmbeddingTable emb = make_embedding(net.embedding, model.alphabet_size(), net.params.shape.d);
    Rng eval(ctx.seed);
    const TvReport rep = evaluate_tv(net.params, emb, model, c.at("eval_prefixes"), c.at("horizon"), eval, ctx.threads);
    w.write_csv("tv_checkpoint.csv", {"mean_tv", "stderr_tv", "mean_kl", "stderr_kl", "count"},
                {{rep.mean_tv, rep.sem_tv, rep.mean_kl, rep.sem_kl, static_cast<double>(rep.count)}});
    return {{{"evaluation", tv_report_json(rep)}},
            rep.pinsker_violations > 0 ? kSureInequalityFailed : kSuccess,
            "mean TV " + std::to_string(rep.mean_tv)};
  }
  TvGridConfig cfg;
  cfg.base = setup_from(c);
  cfg.base.train.threads = ctx.threads;
  cfg.num_sequences = size_list(c.at("num_sequences_grid"), "num_sequences_grid");
  cfg.horizon = c.at("horizon");
  cfg.seeds = c.at("seeds");
  cfg.eval_prefixes = c.at("eval_prefixes");
  const TvGridResult r = tv_grid(model, cfg, Rng(ctx.seed), ctx.threads);

  std::vector<std::vector<double>> runs, cells;
  std::vector<double> x, y, err;
  json cj = json::array();
  for (const auto& cell : r.cells) {
    const double tokens = static_cast<double>(cell.num_sequences * cell.horizon);
    for (std::size_t s = 0; s < cell.mean_tv.size(); ++s) {
      runs.push_back({static_cast<double>(cell.num_sequences), static_cast<double>(cell.horizon), static_cast<double>(s),
                      cell.final_loss[s], cell.mean_tv[s], cell.mean_kl[s]});
    }
    cells.push_back({static_cast<double>(cell.num_sequences), tokens, cell.median_tv, cell.sem_tv});
    x.push_back(tokens);
    y.push_back(cell.median_tv);
    err.push_back(cell.sem_tv);
    cj.push_back({{"num_sequences", cell.num_sequences},
                  {"horizon", cell.horizon},
                  {"median_tv", cell.median_tv},
                  {"sem_tv", cell.sem_tv},
                  {"mean_tv", cell.mean_tv},
                  {"final_loss", cell.final_loss}});
  }
  w.write_csv("tv_runs.csv", {"num_sequences", "horizon", "seed_index", "final_loss", "mean_tv", "mean_kl"}, runs);
  w.write_csv("tv_cells.csv", {"num_sequences", "tokens", "median_tv", "stderr_tv"}, cells);
  w.write_plot("plot_tv.csv", x, y, err);
  json payload = {{"cells", cj},
                  {"non_increasing_within_sem", r.non_increasing_within_sem},
                  {"medians_non_increasing", r.medians_non_increasing}};
  return {payload, kSuccess,
          std::string("median TV ") + (r.non_increasing_within_sem ? "non-increasing" : "not monotone") + " across the grid"};
}

Outcome depth_sweep_cmd(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const LatentConceptModel model = load_model_slot(c.at("model"), "model");
  DepthSweepConfig cfg;
  cfg.base = setup_from(c);
  cfg.base.train.threads = ctx.threads;
  cfg.depths.clear();
  for (const auto& d : c.at("depths")) cfg.depths.push_back(d.get<int>());
  if (cfg.depths.empty()) throw SchemaError("depths", "must not be empty");
  cfg.restarts = c.at("restarts");
  cfg.steps_per_layer = c.at("steps_per_layer");
  const DepthSweepResult r = depth_sweep(model, cfg, Rng(ctx.seed), ctx.threads);

  std::vector<std::vector<double>> rows;
  std::vector<double> x, y, err;
  json rj = json::array();
  for (const auto& row : r.rows) {
    for (std::size_t k = 0; k < row.kl.size(); ++k) rows.push_back({static_cast<double>(row.depth), static_cast<double>(k), row.kl[k]});
    x.push_back(row.depth);
    y.push_back(row.best_kl);
    err.push_back(0.0);
    rj.push_back({{"depth", row.depth}, {"best_kl", row.best_kl}, {"kl", row.kl}});
  }
  w.write_csv("depth_runs.csv", {"depth", "restart", "final_kl"}, rows);
  w.write_plot("plot_depth.csv", x, y, err);
  json payload = {{"rows", rj}, {"non_increasing", r.non_increasing}};
  return {payload, kSuccess, std::string("best KL ") + (r.non_increasing ? "non-increasing" : "not monotone") + " in depth"};
}

Outcome robustness_cmd(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const LatentConceptModel model = load_model_slot(c.at("model"), "model");
  const json& pj = c.at("perturbation");
  PerturbationPolicy policy;
  try {
    policy.kind = perturbation_from_name(pj.at("kind"));
  } catch (const std::invalid_argument&) {
    throw SchemaError("perturbation.kind", "expected flip_uniform, permute_responses or adversarial_fixed");
  }
  policy.rho = pj.at("rho");
  for (const auto& t : pj.at("map")) policy.map.push_back(t.get<Token>());
  try {
    policy.validate(model.alphabet_size());
  } catch (const std::exception& e) {
    throw SchemaError("perturbation", e.what());
  }
  const ConceptId z_star = c.at("z_star");
  const std::vector<std::size_t> t_grid = size_list(c.at("t_grid"), "t_grid");
  const std::string checkpoint = optional_string(c.at("checkpoint"), "checkpoint");

  RobustnessCurve curve;
  const Rng root(ctx.seed);
  if (checkpoint.empty()) {
    curve = robustness_curve(BmaPredictor(model), model, z_star, policy, t_grid, c.at("trials"), root, ctx.threads);
  } else {
    const LoadedNetwork net = load_network(checkpoint, model.alphabet_size());
    const TokenEmbeddingTable emb = make_embedding(net.embedding, model.alphabet_size(), net.params.shape.d);
    curve = robustness_curve(TransformerPredictor(net.params, emb), model, z_star, policy, t_grid, c.at("trials"), root,
                             ctx.threads);
  }
  w.write_text("robustness.csv", csv_text([&](std::ostream& os) { write_robustness_csv(os, curve); }));
  std::vector<double> x, y, err;
  json pts = json::array();
  for (const auto& p : curve.points) {
    x.push_back(std::sqrt(static_cast<double>(p.t)));
    y.push_back(p.log_mean_kl);
    err.push_back(p.mean_kl > 0.0 ? p.sem / p.mean_kl : 0.0);
    pts.push_back({{"t", p.t}, {"mean_kl", p.mean_kl}, {"log_mean_kl", p.log_mean_kl}, {"sem", p.sem},
                   {"envelope", p.envelope}, {"infinite", p.infinite}});
  }
  w.write_plot("plot_log_kl.csv", x, y, err);
  const double slope = curve.log_kl_slope();
  json payload = {{"points", pts},
                  {"log_kl_slope", slope},
                  {"margin", curve.margin},
                  {"c0", curve.c0},
                  {"covariate_length", curve.covariate_length},
                  {"predictor", checkpoint.empty() ? "bma" : "checkpoint"}};
  return {payload, kSuccess, "slope of log mean KL on sqrt(t): " + std::to_string(slope)};
}

Outcome regret_decomp(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const LatentConceptModel model = load_model_slot(c.at("model"), "model");
  const json& icl_slot = c.at("icl_model");
  const LatentConceptModel icl_model = model_given(icl_slot) ? load_model_slot(icl_slot, "icl_model") : model;
  const std::string kind = c.at("predictor");
  const std::string checkpoint = optional_string(c.at("checkpoint"), "checkpoint");
  const std::size_t horizon = c.at("horizon");
  const std::size_t trials = c.at("trials");
  const Rng root(ctx.seed);

  DecompositionReport rep;
  if (kind == "bma") {
    rep = pretrained_regret_decomposition(BmaPredictor(model), model, icl_model, horizon, trials, root, ctx.threads);
  } else if (kind == "uniform") {
    rep = pretrained_regret_decomposition(UniformPredictor(model.alphabet_size()), model, icl_model, horizon, trials,
                                          root, ctx.threads);
  } else if (kind == "checkpoint") {
    if (checkpoint.empty()) throw SchemaError("checkpoint", "required when predictor is checkpoint");
    const LoadedNetwork net = load_network(checkpoint, model.alphabet_size());
    const TokenEmbeddingTable emb = make_embedding(net.embedding, model.alphabet_size(), net.params.shape.d);
    rep = pretrained_regret_decomposition(TransformerPredictor(net.params, emb), model, icl_model, horizon, trials, root,
                                          ctx.threads);
  } else {
    throw SchemaError("predictor", "expected bma, uniform or checkpoint");
  }

  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < rep.rows.size(); ++k) {
    const auto& r = rep.rows[k];
    rows.push_back({static_cast<double>(k), static_cast<double>(r.z_star), r.total, r.oracle, r.log_ratio, r.kl_gap,
                    r.identity_error, r.covered ? 1.0 : 0.0});
  }
  w.write_csv("decomposition.csv",
              {"trajectory", "z_star", "total", "oracle", "log_ratio", "kl_gap", "identity_error", "covered"}, rows);
  w.write_plot("plot_terms.csv", {0, 1, 2, 3}, {rep.mean_total, rep.mean_oracle, rep.mean_log_ratio, rep.mean_kl_gap},
               {rep.sem_total, rep.sem_oracle, rep.sem_log_ratio, rep.sem_kl_gap});
  json payload = {{"mean_total", rep.mean_total},         {"sem_total", rep.sem_total},
                  {"mean_oracle", rep.mean_oracle},       {"sem_oracle", rep.sem_oracle},
                  {"mean_log_ratio", rep.mean_log_ratio}, {"sem_log_ratio", rep.sem_log_ratio},
                  {"mean_kl_gap", rep.mean_kl_gap},       {"sem_kl_gap", rep.sem_kl_gap},
                  {"max_identity_error", rep.max_identity_error},
                  {"identity_tolerance", kIdentityTol},
                  {"uncovered", rep.uncovered},
                  {"trajectories", rep.rows.size()}};
  const int code = rep.max_identity_error > kIdentityTol ? kSureInequalityFailed : kSuccess;
  char buf[64];
  std::snprintf(buf, sizeof buf, "max identity error %.3g", rep.max_identity_error);
  return {payload, code, buf};
}

Outcome check_lemmas(const Context& ctx, ArtifactWriter& w) {
  const json& c = ctx.config;
  const Rng root(ctx.seed);
  const TransformerShape shape = shape_from(c.at("network"));
  json payload;
  std::vector<std::vector<double>> rows;  // check id, checks, violations, worst

  const json& tk = c.at("tv_kl");
  const TvKlSweep tvkl = tv_kl_sweep(tk.at("pairs"), tk.at("max_support"), root.fork(0));
  payload["tv_kl"] = {{"pairs", tvkl.pairs},
                      {"kl_tv_violations", tvkl.kl_tv_violations},
                      {"pinsker_violations", tvkl.pinsker_violations},
                      {"max_kl_over_bound", tvkl.max_kl_over_bound}};
  rows.push_back({0, static_cast<double>(tvkl.pairs), static_cast<double>(tvkl.kl_tv_violations + tvkl.pinsker_violations),
                  tvkl.max_kl_over_bound});

  const json& fl = c.at("floor");
  const FloorSweep floor = floor_sweep(shape, fl.at("trials"), fl.at("param_scale"), root.fork(1));
  payload["floor"] = {{"trials", floor.trials},
                      {"violations", floor.violations},
                      {"min_output", floor.min_output},
                      {"min_margin", floor.min_margin}};
  rows.push_back({1, static_cast<double>(floor.trials), static_cast<double>(floor.violations), floor.min_margin});

  const json& fx = c.at("fluctuation");
  const FluctuationSweep fluct =
      fluctuation_sweep(shape, fx.at("pairs"), fx.at("inputs_per_pair"), fx.at("input_norm"), root.fork(2));
  payload["fluctuation"] = {{"checks", fluct.checks}, {"violations", fluct.violations}, {"max_ratio", fluct.max_ratio}};
  rows.push_back({2, static_cast<double>(fluct.checks), static_cast<double>(fluct.violations), fluct.max_ratio});

  const json& gr = c.at("gradient");
  const GradientSweep grad = gradient_sweep(shape, gr.at("seeds"), root.fork(3));
  payload["gradient"] = {{"seeds", grad.seeds}, {"checked", grad.checked}, {"max_rel_error", grad.max_rel_error}};
  rows.push_back({3, static_cast<double>(grad.checked), static_cast<double>(grad.seeds - grad.checked), grad.max_rel_error});

  const json& sp = c.at("sphere");
  const std::size_t samples = sp.at("samples");
  const double gamma = sp.at("gamma");
  std::vector<std::vector<double>> sphere_rows;
  json sj = json::array();
  std::size_t idx = 0;
  for (const auto& dj : sp.at("dims")) {
    const int d = dj.get<int>();
    Rng r = root.fork(100 + idx++);
    const Eigen::VectorXd b = r.unit_sphere(d);
    const SphereIntegral s = sphere_integral_check(b, gamma, samples, r);
    sphere_rows.push_back({static_cast<double>(d), static_cast<double>(samples), s.cosine, s.orthogonal_ratio, s.c1});
    sj.push_back({{"d", d}, {"cosine", s.cosine}, {"orthogonal_ratio", s.orthogonal_ratio}, {"c1", s.c1}});
  }
  payload["sphere"] = sj;
  w.write_csv("sphere.csv", {"d", "samples", "cosine", "orthogonal_ratio", "c1"}, sphere_rows);
  w.write_csv("lemmas.csv", {"check", "count", "violations", "worst"}, rows);
  payload["checks"] = {"tv_kl", "floor", "fluctuation", "gradient"};

  const bool failed = tvkl.kl_tv_violations + tvkl.pinsker_violations + floor.violations + fluct.violations > 0;
  return {payload, failed ? kSureInequalityFailed : kSuccess,
          "violations: tv_kl " + std::to_string(tvkl.kl_tv_violations + tvkl.pinsker_violations) + ", floor " +
              std::to_string(floor.violations) + ", fluctuation " + std::to_string(fluct.violations)};
}

// ---------------------------------------------------------------------------

json lemma_network() {
  TransformerShape s;
  s.d = 6;
  s.d_y = 3;
  s.d_f = 8;
  s.heads = 2;
  return shape_to_json(s);
}

const std::vector<Command>& commands() {
  static const std::vector<Command> table = [] {
    std::vector<Command> t;
    json recipe = recipe_to_json(GeneratorRecipe{});
    recipe.erase("seed");
    t.push_back({{"gen-model", "generate a latent-concept model and report its assumptions"},
                 [recipe] { return common({{"generator", recipe}, {"enumeration_cap", kDefaultEnumerationCap}, {"mixing_epsilon", 0.25}}); },
                 {},
                 gen_model});
    t.push_back({{"bma-regret", "BMA regret curves against the prior bound"},
                 [] { return common({{"seed", 7}, {"model", model_slot()}, {"trajectories", 100}, {"horizon", 500}, {"z_star", nullptr}}); },
                 {json::json_pointer("/model/path")},
                 bma_regret});
    t.push_back({{"attn-converge", "kernel-ridge attention against softmax attention as T grows"},
                 [] {
                   const ConvergenceConfig d;
                   return common({{"t_grid", d.t_grid}, {"d_k", d.d_k}, {"d_v", d.d_v}, {"trials", d.trials},
                                  {"gamma", d.gamma}, {"ridge_exponent", d.ridge_exponent}});
                 },
                 {},
                 attn_converge});
    t.push_back({{"pretrain", "train a bounded transformer on sequences from a model"},
                 [] {
                   json j = common(pretrain_keys());
                   j["model"] = model_slot();
                   j["soft_targets"] = false;
                   j["eval_prefixes"] = 2000;
                   return j;
                 },
                 {json::json_pointer("/model/path")},
                 pretrain_cmd});
    t.push_back({{"eval-tv", "TV of pretrained networks across a data-size grid"},
                 [] {
                   json j = common(pretrain_keys());
                   j.erase("num_sequences");
                   j["seed"] = 2024;
                   j["model"] = model_slot();
                   j["num_sequences_grid"] = {32, 128, 512};
                   j["seeds"] = 5;
                   j["eval_prefixes"] = 2000;
                   j["checkpoint"] = nullptr;
                   return j;
                 },
                 {json::json_pointer("/model/path"), json::json_pointer("/checkpoint")},
                 eval_tv});
    t.push_back({{"depth-sweep", "best fit to the Bayes predictive as depth grows"},
                 [] {
                   json j = common(pretrain_keys());
                   j["seed"] = 2024;
                   j["model"] = model_slot();
                   j["init"] = "residual";
                   j["depths"] = {1, 2, 3, 4};
                   j["restarts"] = 3;
                   j["steps_per_layer"] = 1500;
                   j["network"].erase("depth");
                   return j;
                 },
                 {json::json_pointer("/model/path")},
                 depth_sweep_cmd});
    t.push_back({{"robustness", "prediction error on prompts with corrupted responses"},
                 [] {
                   return common({{"model", model_slot()},
                                  {"z_star", 0},
                                  {"perturbation", {{"kind", "flip_uniform"}, {"rho", 0.2}, {"map", json::array()}}},
                                  {"t_grid", {25, 49, 100, 196, 400}},
                                  {"trials", 400},
                                  {"checkpoint", nullptr}});
                 },
                 {json::json_pointer("/model/path"), json::json_pointer("/checkpoint")},
                 robustness_cmd});
    t.push_back({{"regret-decomp", "split the regret of a predictor into oracle and log-ratio terms"},
                 [] {
                   return common({{"model", model_slot()},
                                  {"icl_model", model_slot()},
                                  {"predictor", "bma"},
                                  {"checkpoint", nullptr},
                                  {"horizon", 50},
                                  {"trials", 50}});
                 },
                 {json::json_pointer("/model/path"), json::json_pointer("/icl_model/path"), json::json_pointer("/checkpoint")},
                 regret_decomp});
    t.push_back({{"check-lemmas", "TV-KL, output floor, fluctuation, gradient and sphere checks"},
                 [] {
                   return common({{"network", lemma_network()},
                                  {"tv_kl", {{"pairs", 10000}, {"max_support", 8}}},
                                  {"floor", {{"trials", 1000}, {"param_scale", 3.0}}},
                                  {"fluctuation", {{"pairs", 100}, {"inputs_per_pair", 20}, {"input_norm", 1.0}}},
                                  {"gradient", {{"seeds", 50}}},
                                  {"sphere", {{"dims", {2, 8}}, {"samples", 1000000}, {"gamma", 1.0}}}});
                 },
                 {},
                 check_lemmas});
    return t;
  }();
  return table;
}

const Command& find_command(const std::string& name) {
  for (const auto& c : commands()) {
    if (c.info.name == name) return c;
  }
  throw SchemaError("subcommand", "unknown subcommand '" + name + "'");
}

}  // namespace

const std::vector<SubcommandInfo>& subcommands() {
  static const std::vector<SubcommandInfo> infos = [] {
    std::vector<SubcommandInfo> v;
    for (const auto& c : commands()) v.push_back(c.info);
    return v;
  }();
  return infos;
}

fs::path default_out_dir(const std::string& name) {
  if (const char* env = std::getenv("ICL_BMA_LAB_OUT"); env != nullptr && *env != '\0') return fs::path(env) / name;
  return fs::path("icl-out") / name;
}

int run_subcommand(const std::string& name, const RunOptions& opt) {
  const Command& cmd = find_command(name);
  std::ifstream in(opt.config_path);
  if (!in) throw Error("cannot open config " + opt.config_path.string());
  const json given = json::parse(in);
  json config = merge_config(cmd.defaults(), given);
  if (config.at("schema_version") != kSchemaVersion) {
    throw SchemaError("schema_version", "unsupported version " + config.at("schema_version").dump());
  }
  if (opt.seed) config["seed"] = *opt.seed;

  const fs::path base = fs::absolute(opt.config_path).parent_path();
  for (const auto& ptr : cmd.paths) {
    if (!config.contains(ptr) || config.at(ptr).is_null()) continue;
    if (!config.at(ptr).is_string()) throw SchemaError(ptr.to_string().substr(1), "expected a path string");
    const fs::path p = config.at(ptr).get<std::string>();
    config[ptr] = (p.is_absolute() ? p : base / p).lexically_normal().string();
  }

  fs::path out_dir;
  if (opt.out) out_dir = *opt.out;
  else if (!config.at("out").is_null()) {
    if (!config.at("out").is_string()) throw SchemaError("out", "expected a path string");
    const fs::path p = config.at("out").get<std::string>();
    out_dir = p.is_absolute() ? p : base / p;
  } else {
    out_dir = default_out_dir(name);
  }
  config.erase("out");

  if (opt.verify) {
    const VerifyReport rep = verify_artifacts(out_dir, config);
    for (const auto& p : rep.problems) std::cerr << "verify: " << p << "\n";
    std::cout << name << ": " << (rep.ok ? "artifacts verified" : "verification failed") << " in " << out_dir.string() << "\n";
    return rep.ok ? kSuccess : kRuntimeFailure;
  }

  Context ctx;
  ctx.config = config;
  ctx.seed = config.at("seed");
  ctx.threads = std::max(1u, opt.threads);
  const auto start = std::chrono::steady_clock::now();
  ArtifactWriter writer(out_dir, name, config, {ctx.seed}, opt.deterministic);
  const Outcome outcome = cmd.run(ctx, writer);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  writer.finish(outcome.payload, seconds);
  std::cout << name << ": " << outcome.summary << " -> " << out_dir.string() << "\n";
  if (outcome.exit_code == kSureInequalityFailed) {
    std::cerr << name << ": a sure inequality failed; this indicates an implementation bug\n";
  }
  return outcome.exit_code;
}

}  // namespace icl::cli
