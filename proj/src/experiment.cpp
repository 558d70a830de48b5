#include "icl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "icl/errors.hpp"
#include "icl/metrics.hpp"
#include "icl/parallel.hpp"

namespace icl {

using nlohmann::json;

namespace {

std::string child_path(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

const char* type_label(const json& j) {
  if (j.is_boolean()) return "a boolean";
  if (j.is_number_integer()) return "an integer";
  if (j.is_number()) return "a number";
  if (j.is_string()) return "a string";
  if (j.is_array()) return "an array";
  if (j.is_object()) return "an object";
  return "null";
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
  out.close();
  if (!out) throw Error("short write to " + path.string());
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string optimizer_name(Optimizer o) {
  switch (o) {
    case Optimizer::pgd: return "pgd";
    case Optimizer::pgd_line_search: return "pgd_line_search";
    case Optimizer::adam: return "adam";
  }
  throw std::invalid_argument("unknown optimizer");
}

Eigen::MatrixXd random_input(Rng& rng, int rows, int d, double max_norm) {
  Eigen::MatrixXd x(rows, d);
  for (int i = 0; i < rows; ++i) x.row(i) = rng.unit_sphere(d).transpose() * (max_norm * rng.uniform());
  return x;
}

TransformerParams random_direction(const TransformerShape& s, Rng& rng) {
  const auto p = TransformerParams::zeros(s);
  return unflatten(s, rng.normal_vector(static_cast<int>(p.num_scalars())));
}

struct TrainingData {
  Dataset data;
  double mean_target_entropy = 0.0;
};

TrainingData build_dataset(const LatentConceptModel& model, const PretrainSetup& setup,
                           const TokenEmbeddingTable& embedding, Rng& rng) {
  TrainingData out;
  Dataset raw = pretraining_dataset(model, embedding, setup.num_sequences, setup.horizon, rng);
  const bool l2 = setup.shape.head == HeadKind::l2;
  if (!setup.soft_targets && !l2) {
    out.data = std::move(raw);
    return out;
  }
  double entropy_sum = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Eigen::VectorXd target;
    if (l2) {
      // The embedded next token at its own position.
      Eigen::Index next = 0;
      raw.targets[i].maxCoeff(&next);
      std::vector<Token> extended = raw.prefixes[i];
      extended.push_back(static_cast<Token>(next));
      target = embedding.embed(extended).bottomRows(1).transpose();
    } else {
      target = marginal_conditional(model, raw.prefixes[i]);
      entropy_sum += entropy(target);
    }
    out.data.add(std::move(raw.inputs[i]), std::move(target), std::move(raw.prefixes[i]));
  }
  out.mean_target_entropy = entropy_sum / static_cast<double>(out.data.size());
  return out;
}

TrainResult run_training(const TransformerParams& init, const Dataset& data, const TrainConfig& cfg) {
  return init.shape.head == HeadKind::softmax ? train_mle(init, data, cfg) : train_l2(init, data, cfg);
}

void check_alphabet(const LatentConceptModel& model, const TransformerShape& shape) {
  if (shape.head == HeadKind::softmax && shape.d_y != model.alphabet_size()) {
    throw ShapeMismatch("network output size " + std::to_string(shape.d_y) + " differs from alphabet size " +
                        std::to_string(model.alphabet_size()));
  }
}

}  // namespace

json merge_config(const json& defaults, const json& given, const std::string& path) {
  const std::string where = path.empty() ? "<root>" : path;
  if (defaults.is_null()) return given;
  if (defaults.is_object()) {
    if (!given.is_object()) throw SchemaError(where, std::string("expected an object, got ") + type_label(given));
    json out = defaults;
    for (const auto& [key, value] : given.items()) {
      if (!defaults.contains(key)) throw SchemaError(child_path(path, key), "unknown key");
      out[key] = merge_config(defaults.at(key), value, child_path(path, key));
    }
    return out;
  }
  if (defaults.is_array()) {
    if (!given.is_array()) throw SchemaError(where, std::string("expected an array, got ") + type_label(given));
    if (defaults.empty()) return given;
    json out = json::array();
    for (std::size_t i = 0; i < given.size(); ++i) {
      out.push_back(merge_config(defaults.front(), given[i], where + "[" + std::to_string(i) + "]"));
    }
    return out;
  }
  if (defaults.is_boolean()) {
    if (!given.is_boolean()) throw SchemaError(where, std::string("expected a boolean, got ") + type_label(given));
    return given;
  }
  if (defaults.is_string()) {
    if (!given.is_string()) throw SchemaError(where, std::string("expected a string, got ") + type_label(given));
    return given;
  }
  if (defaults.is_number_unsigned()) {
    if (!given.is_number_integer() || (given.is_number_integer() && !given.is_number_unsigned() && given.get<std::int64_t>() < 0)) {
      throw SchemaError(where, std::string("expected a non-negative integer, got ") + type_label(given));
    }
    return given.get<std::uint64_t>();
  }
  if (defaults.is_number_integer()) {
    if (!given.is_number_integer()) throw SchemaError(where, std::string("expected an integer, got ") + type_label(given));
    return given;
  }
  if (defaults.is_number_float()) {
    if (!given.is_number()) throw SchemaError(where, std::string("expected a number, got ") + type_label(given));
    return given.get<double>();
  }
  throw SchemaError(where, "unsupported default type");
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string config_hash(const json& config) { return hex64(fnv1a64(config.dump())); }

json embedding_to_json(const EmbeddingSpec& s) {
  return {{"radius", s.radius}, {"position_dims", s.position_dims}, {"position_weight", s.position_weight}, {"seed", s.seed}};
}

EmbeddingSpec embedding_from_json(const json& doc, const std::string& path) {
  const json j = merge_config(embedding_to_json(EmbeddingSpec{}), doc, path);
  EmbeddingSpec s;
  s.radius = j.at("radius");
  s.position_dims = j.at("position_dims");
  s.position_weight = j.at("position_weight");
  s.seed = j.at("seed");
  if (!(s.radius > 0.0)) throw SchemaError(child_path(path, "radius"), "must be positive");
  if (!(s.position_weight >= 0.0 && s.position_weight < 1.0)) throw SchemaError(child_path(path, "position_weight"), "must lie in [0, 1)");
  if (s.position_dims < 0) throw SchemaError(child_path(path, "position_dims"), "must be non-negative");
  return s;
}

TokenEmbeddingTable make_embedding(const EmbeddingSpec& spec, int alphabet_size, int d) {
  Rng rng(spec.seed);
  return TokenEmbeddingTable(alphabet_size, d, spec.radius, rng, spec.position_dims, spec.position_weight);
}

json train_to_json(const TrainConfig& c) {
  return {{"optimizer", optimizer_name(c.optimizer)},
          {"learning_rate", c.learning_rate},
          {"final_lr_fraction", c.final_lr_fraction},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon}};
}

TrainConfig train_from_json(const json& doc, const std::string& path) {
  const json j = merge_config(train_to_json(TrainConfig{}), doc, path);
  TrainConfig c;
  const std::string opt = j.at("optimizer");
  if (opt == "pgd") c.optimizer = Optimizer::pgd;
  else if (opt == "pgd_line_search") c.optimizer = Optimizer::pgd_line_search;
  else if (opt == "adam") c.optimizer = Optimizer::adam;
  else throw SchemaError(child_path(path, "optimizer"), "expected pgd, pgd_line_search or adam");
  c.learning_rate = j.at("learning_rate");
  c.final_lr_fraction = j.at("final_lr_fraction");
  c.steps = j.at("steps");
  c.batch_size = j.at("batch_size");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.epsilon = j.at("epsilon");
  if (!(c.learning_rate >= 0.0)) throw SchemaError(child_path(path, "learning_rate"), "must be non-negative");
  return c;
}

std::string init_name(InitKind kind) { return kind == InitKind::random ? "random" : "residual"; }

InitKind init_from_name(const std::string& name) {
  if (name == "random") return InitKind::random;
  if (name == "residual") return InitKind::residual;
  throw std::invalid_argument("unknown init '" + name + "'");
}

TransformerParams initial_params(const TransformerShape& shape, InitKind kind, Rng& rng) {
  if (kind == InitKind::residual) return residual_params(shape, rng);
  TransformerParams p = random_params(shape, rng);
  p.out.setZero();
  return p;
}

PretrainRun pretrain(const LatentConceptModel& model, const PretrainSetup& setup, const Rng& rng) {
  check_alphabet(model, setup.shape);
  const TokenEmbeddingTable emb = make_embedding(setup.embedding, model.alphabet_size(), setup.shape.d);
  Rng data_rng = rng.fork(0);
  const TrainingData td = build_dataset(model, setup, emb, data_rng);
  Rng init_rng = rng.fork(1);
  const TransformerParams init = initial_params(setup.shape, setup.init, init_rng);
  TrainConfig cfg = setup.train;
  cfg.seed = rng.fork(2).seed();
  PretrainRun run;
  run.result = run_training(init, td.data, cfg);
  run.mean_target_entropy = td.mean_target_entropy;
  return run;
}

TvGridResult tv_grid(const LatentConceptModel& model, const TvGridConfig& config, const Rng& rng, unsigned threads) {
  if (config.num_sequences.empty() || config.seeds == 0) throw std::invalid_argument("tv grid needs cells and seeds");
  if (config.base.shape.head != HeadKind::softmax) throw std::invalid_argument("tv grid needs the softmax head");
  check_alphabet(model, config.base.shape);
  const std::size_t cells = config.num_sequences.size();
  const std::size_t runs = cells * config.seeds;
  std::vector<double> loss(runs), tvs(runs), kls(runs);
  const TokenEmbeddingTable emb = make_embedding(config.base.embedding, model.alphabet_size(), config.base.shape.d);
  parallel_for(runs, threads, [&](std::size_t k) {
    PretrainSetup setup = config.base;
    setup.num_sequences = config.num_sequences[k / config.seeds];
    setup.horizon = config.horizon;
    if (threads > 1) setup.train.threads = 1;
    const PretrainRun run = pretrain(model, setup, rng.fork(k));
    Rng eval = rng.fork(1'000'000);
    const TvReport rep = evaluate_tv(run.result.params, emb, model, config.eval_prefixes, config.horizon, eval);
    loss[k] = run.result.final_loss;
    tvs[k] = rep.mean_tv;
    kls[k] = rep.mean_kl;
  });
  TvGridResult out;
  for (std::size_t c = 0; c < cells; ++c) {
    TvCell cell;
    cell.num_sequences = config.num_sequences[c];
    cell.horizon = config.horizon;
    const auto from = static_cast<std::ptrdiff_t>(c * config.seeds);
    const auto to = from + static_cast<std::ptrdiff_t>(config.seeds);
    cell.final_loss.assign(loss.begin() + from, loss.begin() + to);
    cell.mean_tv.assign(tvs.begin() + from, tvs.begin() + to);
    cell.mean_kl.assign(kls.begin() + from, kls.begin() + to);
    cell.median_tv = median(cell.mean_tv);
    cell.sem_tv = summarize(cell.mean_tv).sem;
    out.cells.push_back(std::move(cell));
  }
  out.non_increasing_within_sem = true;
  out.medians_non_increasing = true;
  for (std::size_t c = 0; c + 1 < cells; ++c) {
    const TvCell& a = out.cells[c];
    const TvCell& b = out.cells[c + 1];
    if (b.median_tv > a.median_tv + std::hypot(a.sem_tv, b.sem_tv)) out.non_increasing_within_sem = false;
    if (b.median_tv > a.median_tv) out.medians_non_increasing = false;
  }
  return out;
}

DepthSweepResult depth_sweep(const LatentConceptModel& model, const DepthSweepConfig& config, const Rng& rng,
                             unsigned threads) {
  if (config.depths.empty() || config.restarts == 0) throw std::invalid_argument("depth sweep needs depths and restarts");
  if (config.base.shape.head != HeadKind::softmax) throw std::invalid_argument("depth sweep needs the softmax head");
  check_alphabet(model, config.base.shape);
  PretrainSetup setup = config.base;
  setup.soft_targets = true;
  const TokenEmbeddingTable emb = make_embedding(setup.embedding, model.alphabet_size(), setup.shape.d);
  Rng data_rng = rng.fork(0);
  const TrainingData td = build_dataset(model, setup, emb, data_rng);

  const std::size_t runs = config.depths.size() * config.restarts;
  std::vector<double> kl(runs);
  parallel_for(runs, threads, [&](std::size_t k) {
    const int depth = config.depths[k / config.restarts];
    if (depth < 1) throw std::invalid_argument("depth must be at least 1");
    TransformerShape shape = setup.shape;
    shape.depth = depth;
    const Rng run = rng.fork(1 + k);
    Rng init_rng = run.fork(1);
    const TransformerParams init = initial_params(shape, setup.init, init_rng);
    TrainConfig cfg = setup.train;
    cfg.steps = config.steps_per_layer * static_cast<std::size_t>(depth);
    cfg.seed = run.fork(2).seed();
    if (threads > 1) cfg.threads = 1;
    kl[k] = run_training(init, td.data, cfg).final_loss - td.mean_target_entropy;
  });
  DepthSweepResult out;
  for (std::size_t i = 0; i < config.depths.size(); ++i) {
    DepthRow row;
    row.depth = config.depths[i];
    const auto from = static_cast<std::ptrdiff_t>(i * config.restarts);
    row.kl.assign(kl.begin() + from, kl.begin() + from + static_cast<std::ptrdiff_t>(config.restarts));
    row.best_kl = *std::min_element(row.kl.begin(), row.kl.end());
    out.rows.push_back(std::move(row));
  }
  out.non_increasing = true;
  for (std::size_t i = 0; i + 1 < out.rows.size(); ++i) {
    if (out.rows[i + 1].best_kl > out.rows[i].best_kl) out.non_increasing = false;
  }
  return out;
}

FloorSweep floor_sweep(const TransformerShape& base, std::size_t trials, double param_scale, const Rng& rng) {
  FloorSweep out;
  out.min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < trials; ++k) {
    Rng r = rng.fork(k);
    TransformerShape s = base;
    s.depth = 1 + static_cast<int>(k % 3);
    s.tau = k % 2 ? 1.0 : 0.5;
    const TransformerParams p = random_params(s, r, param_scale);
    const Eigen::VectorXd y = forward(p, random_input(r, 1 + static_cast<int>(k % 7), s.d, 1.0));
    const double m = y.minCoeff();
    const double floor = output_floor(s);
    out.min_output = std::min(out.min_output, m);
    out.min_margin = std::min(out.min_margin, m - floor);
    if (m < floor - 1e-12) ++out.violations;
    ++out.trials;
  }
  return out;
}

FluctuationSweep fluctuation_sweep(const TransformerShape& base, std::size_t pairs, std::size_t inputs_per_pair,
                                   double input_norm, const Rng& rng) {
  FluctuationSweep out;
  for (std::size_t k = 0; k < pairs; ++k) {
    Rng r = rng.fork(k);
    TransformerShape s = base;
    s.depth = 1 + static_cast<int>(k % 3);
    s.tau = k % 2 ? 1.0 : 0.7;
    const TransformerParams p = random_params(s, r, 1.0);
    const double scale = std::pow(10.0, -1.0 - static_cast<double>(k % 3));
    const TransformerParams q = project_params(unflatten(s, flatten(p) + scale * flatten(random_direction(s, r))));
    const double bound = parafluc_bound(p, q, input_norm);
    for (std::size_t i = 0; i < inputs_per_pair; ++i) {
      const Eigen::MatrixXd x = random_input(r, 1 + static_cast<int>(i % 6), s.d, input_norm);
      const double observed = tv(forward(p, x), forward(q, x));
      if (observed > bound) ++out.violations;
      if (bound > 0.0) out.max_ratio = std::max(out.max_ratio, observed / bound);
      ++out.checks;
    }
  }
  return out;
}

TvKlSweep tv_kl_sweep(std::size_t pairs, int max_support, const Rng& rng) {
  if (max_support < 2) throw std::invalid_argument("support size must be at least 2");
  TvKlSweep out;
  for (std::size_t k = 0; k < pairs; ++k) {
    Rng r = rng.fork(k);
    const int n = 2 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(max_support - 1)));
    const double alpha = k % 2 ? 1.0 : 0.3;
    const Eigen::VectorXd p = r.dirichlet(n, alpha);
    Eigen::VectorXd q = r.dirichlet(n, alpha);
    while (!(q.minCoeff() > 0.0)) q = r.dirichlet(n, alpha);
    const LemmaReport rep = tv_kl_lemma_check(p, q);
    if (!rep.kl_tv_holds) ++out.kl_tv_violations;
    if (!rep.pinsker_holds) ++out.pinsker_violations;
    if (rep.kl_tv_bound > 0.0) out.max_kl_over_bound = std::max(out.max_kl_over_bound, rep.kl / rep.kl_tv_bound);
    ++out.pairs;
  }
  return out;
}

GradientSweep gradient_sweep(const TransformerShape& base, std::size_t seeds, const Rng& rng) {
  GradientSweep out;
  out.seeds = seeds;
  for (std::size_t k = 0; k < seeds; ++k) {
    Rng r = rng.fork(k);
    TransformerShape s = base;
    s.depth = 1 + static_cast<int>(k % 3);
    for (int attempt = 0; attempt < 10; ++attempt) {
      const TransformerParams p = random_params(s, r, 0.8);
      std::vector<Eigen::MatrixXd> xs{random_input(r, 3, s.d, 1.5), random_input(r, 5, s.d, 1.5)};
      std::vector<Eigen::VectorXd> ts{r.dirichlet(s.d_y),
                                      Eigen::VectorXd::Unit(s.d_y, static_cast<Eigen::Index>(r.uniform_int(s.d_y)))};
      const TransformerParams dir = random_direction(s, r);
      GradientCheck g;
      try {
        g = gradient_check(p, xs, ts, dir);
      } catch (const KinkError&) {
        continue;
      }
      if (g.best_h == 0.0 || g.kink_distance < 1e-6) continue;
      out.max_rel_error = std::max(out.max_rel_error, g.rel_error);
      ++out.checked;
      break;
    }
  }
  return out;
}

ArtifactWriter::ArtifactWriter(std::filesystem::path dir, std::string subcommand, json config,
                               std::vector<std::uint64_t> seeds, bool deterministic)
    : dir_(std::move(dir)),
      subcommand_(std::move(subcommand)),
      config_(std::move(config)),
      seeds_(std::move(seeds)),
      deterministic_(deterministic) {
  std::filesystem::create_directories(dir_);
}

void ArtifactWriter::write_csv(const std::string& name, const std::vector<std::string>& header,
                               const std::vector<std::vector<double>>& rows) {
  std::string text;
  for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
  text += '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) throw ShapeMismatch(name + ": row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i) text += (i ? "," : "") + format_double(row[i]);
    text += '\n';
  }
  write_text(name, text);
}

void ArtifactWriter::write_plot(const std::string& name, const std::vector<double>& x, const std::vector<double>& y,
                                const std::vector<double>& err) {
  if (x.size() != y.size() || x.size() != err.size()) throw ShapeMismatch(name + ": columns differ in length");
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < x.size(); ++i) rows.push_back({x[i], y[i], err[i]});
  write_csv(name, {"x", "y", "err"}, rows);
}

void ArtifactWriter::write_text(const std::string& name, const std::string& content) {
  write_file(dir_ / name, content);
  add_file(name);
}

void ArtifactWriter::add_file(const std::string& name) {
  if (!std::filesystem::exists(dir_ / name)) throw Error("artifact " + name + " was not written");
  if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
}

void ArtifactWriter::finish(const json& payload, double wall_clock_seconds) {
  json results = {{"schema_version", kSchemaVersion},
                  {"subcommand", subcommand_},
                  {"library_version", kLibraryVersion},
                  {"config_hash", config_hash(config_)},
                  {"seeds", seeds_},
                  {"deterministic", deterministic_},
                  {"config", config_},
                  {"payload", payload},
                  {"wall_clock_seconds", deterministic_ ? json(nullptr) : json(wall_clock_seconds)}};
  write_text("results.json", results.dump(2) + "\n");
  json files = json::array();
  for (const auto& name : files_) {
    const std::string bytes = read_file(dir_ / name);
    files.push_back({{"name", name}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
  }
  const json manifest = {{"schema_version", kSchemaVersion},
                         {"subcommand", subcommand_},
                         {"config_hash", config_hash(config_)},
                         {"seeds", seeds_},
                         {"files", files}};
  write_file(dir_ / "manifest.json", manifest.dump(2) + "\n");
}

VerifyReport verify_artifacts(const std::filesystem::path& dir, const json& expected_config) {
  VerifyReport rep;
  auto problem = [&](std::string what) { rep.problems.push_back(std::move(what)); };
  json manifest, results;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
    results = json::parse(read_file(dir / "results.json"));
  } catch (const std::exception& e) {
    problem(e.what());
    return rep;
  }
  try {
    for (const auto& f : manifest.at("files")) {
      const std::string name = f.at("name");
      if (!std::filesystem::exists(dir / name)) {
        problem(name + ": missing");
        continue;
      }
      const std::string bytes = read_file(dir / name);
      if (hex64(fnv1a64(bytes)) != f.at("fnv1a64").get<std::string>()) problem(name + ": hash differs from manifest");
    }
    const std::string recorded = results.at("config_hash");
    if (config_hash(results.at("config")) != recorded) problem("results.json: config does not match its hash");
    if (manifest.at("config_hash").get<std::string>() != recorded) problem("manifest config_hash differs from results.json");
    if (manifest.at("seeds") != results.at("seeds")) problem("manifest seeds differ from results.json");
    if (!expected_config.is_null() && config_hash(expected_config) != recorded) {
      problem("config hash " + config_hash(expected_config) + " differs from recorded " + recorded);
    }
  } catch (const json::exception& e) {
    problem(std::string("malformed artifact: ") + e.what());
  }
  rep.ok = rep.problems.empty();
  return rep;
}

}  // namespace icl
