#include <CLI11.hpp>
#include <iostream>
#include <json.hpp>

#include "commands.hpp"
#include "icl/errors.hpp"

int main(int argc, char** argv) {
  using namespace icl::cli;
  CLI::App app{"icl-bma-lab: latent-concept ICL experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  RunOptions opt;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--config", opt.config_path, "JSON config file")->required()->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  auto* out_opt = app.add_option("--out", out, "output directory");
  app.add_flag("--deterministic", opt.deterministic, "omit wall-clock time from results.json");
  app.add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--verify", opt.verify, "check existing artifacts against the config instead of running");

  std::string chosen;
  for (const auto& sc : subcommands()) {
    app.add_subcommand(sc.name, sc.description)->callback([&chosen, name = sc.name] { chosen = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kSchemaViolation;
  }
  if (seed_opt->count() > 0) opt.seed = seed;
  if (out_opt->count() > 0) opt.out = out;

  try {
    return run_subcommand(chosen, opt);
  } catch (const icl::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kSchemaViolation;
  } catch (const nlohmann::json::parse_error& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kSchemaViolation;
  } catch (const nlohmann::json::type_error& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kSchemaViolation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}
