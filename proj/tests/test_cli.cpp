#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "icl/bma.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "icl_test_cli";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const std::string& name, const json& doc) {
  fs::create_directories(kWork);
  const fs::path p = kWork / name;
  std::ofstream(p) << doc.dump(2);
  return p;
}

struct Run {
  int code = -1;
  std::string err;
};

Run lab(const std::string& args, const std::string& env = "") {
  const fs::path err = kWork / "stderr.txt";
  const std::string cmd = env + " " + ICL_CLI + std::string(" ") + args + " > " + (kWork / "stdout.txt").string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::string fixture(const std::string& name) { return std::string(ICL_FIXTURE_DIR) + "/" + name; }

}  // namespace

TEST_CASE("schema violations exit with code 2 and name the key") {
  fs::create_directories(kWork);
  const fs::path bad = write_config("bad.json", {{"model", {{"path", fixture("markov_3c.json")}}}, {"horizn", 3}});
  Run r = lab("bma-regret --config " + bad.string() + " --out " + (kWork / "bad").string());
  CHECK(r.code == 2);
  CHECK(r.err.find("horizn") != std::string::npos);

  const fs::path typed = write_config("typed.json", {{"floor", {{"trials", "many"}}}});
  r = lab("check-lemmas --config " + typed.string() + " --out " + (kWork / "typed").string());
  CHECK(r.code == 2);
  CHECK(r.err.find("floor.trials") != std::string::npos);

  const fs::path nested = write_config("nested.json", {{"model", {{"generator", {{"alphabet", 3}}}}}});
  r = lab("bma-regret --config " + nested.string() + " --out " + (kWork / "nested").string());
  CHECK(r.code == 2);
  CHECK(r.err.find("model.generator.alphabet") != std::string::npos);

  const fs::path none = write_config("none.json", json::object());
  CHECK(lab("bma-regret --config " + none.string() + " --out " + (kWork / "none").string()).code == 2);
  const fs::path version = write_config("version.json", {{"schema_version", 9}});
  CHECK(lab("check-lemmas --config " + version.string()).code == 2);
  CHECK(lab("no-such-command --config " + none.string()).code == 2);
  CHECK(lab("bma-regret").code == 2);
}

TEST_CASE("runtime failures exit with code 1") {
  const fs::path missing = write_config("missing.json", {{"model", {{"path", "no_such_model.json"}}}});
  const Run r = lab("bma-regret --config " + missing.string() + " --out " + (kWork / "missing").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("no_such_model.json") != std::string::npos);
}

TEST_CASE("bma-regret on the shipped fixture stays under the bound") {
  const fs::path cfg = write_config(
      "regret.json", {{"seed", 7}, {"model", {{"path", fixture("markov_3c.json")}}}, {"trajectories", 20}, {"horizon", 200}});
  const fs::path out = kWork / "regret";
  REQUIRE(lab("bma-regret --config " + cfg.string() + " --out " + out.string() + " --deterministic").code == 0);
  std::ifstream csv(out / "regret.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "trajectory,t,regret,bound,best_concept");
  std::size_t rows = 0, violations = 0;
  const double log_z = std::log(3.0);
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    REQUIRE(v.size() == 5);
    if (v[2] > log_z / v[1] + icl::kInequalityTol) ++violations;
    ++rows;
  }
  CHECK(rows == 20 * 200);
  CHECK(violations == 0);
  const json results = json::parse(slurp(out / "results.json"));
  CHECK(results["payload"]["violations"] == 0);
  CHECK(results["payload"]["bound_is_sure"] == true);
  CHECK(results["seeds"] == json::array({7}));
}

TEST_CASE("deterministic re-runs are byte-identical and verify") {
  const fs::path cfg = write_config("lemmas.json", {{"seed", 12},
                                                     {"tv_kl", {{"pairs", 200}}},
                                                     {"floor", {{"trials", 40}}},
                                                     {"fluctuation", {{"pairs", 6}, {"inputs_per_pair", 3}}},
                                                     {"gradient", {{"seeds", 3}}},
                                                     {"sphere", {{"samples", 2000}}}});
  const fs::path a = kWork / "det_a", b = kWork / "det_b";
  REQUIRE(lab("check-lemmas --config " + cfg.string() + " --out " + a.string() + " --deterministic").code == 0);
  REQUIRE(lab("check-lemmas --config " + cfg.string() + " --out " + b.string() + " --deterministic --threads 2").code == 0);
  CHECK(slurp(a / "results.json") == slurp(b / "results.json"));
  CHECK(slurp(a / "lemmas.csv") == slurp(b / "lemmas.csv"));
  CHECK(lab("check-lemmas --config " + cfg.string() + " --out " + a.string() + " --verify").code == 0);
  CHECK(lab("check-lemmas --config " + cfg.string() + " --out " + a.string() + " --verify --seed 13").code == 1);

  const fs::path c = kWork / "det_c";
  REQUIRE(lab("check-lemmas --config " + cfg.string() + " --out " + c.string() + " --seed 13 --deterministic").code == 0);
  CHECK(json::parse(slurp(c / "results.json"))["seeds"] == json::array({13}));
  CHECK(slurp(a / "results.json") != slurp(c / "results.json"));
}

TEST_CASE("default output directory comes from the environment") {
  const fs::path cfg = write_config("env.json", {{"seed", 3}, {"generator", {{"num_concepts", 2}, {"alphabet_size", 3}}}});
  const fs::path root = kWork / "envroot";
  fs::remove_all(root);
  REQUIRE(lab("gen-model --config " + cfg.string(), "ICL_BMA_LAB_OUT=" + root.string()).code == 0);
  CHECK(fs::exists(root / "gen-model" / "model.json"));
  CHECK(fs::exists(root / "gen-model" / "manifest.json"));
}

TEST_CASE("pretrain checkpoint feeds eval-tv, robustness and regret-decomp") {
  const json model = {{"generator", {{"num_concepts", 2}, {"alphabet_size", 3}, {"order", 0}, {"c0", 0.05}, {"seed", 4}}}};
  const json network = {{"d", 8}, {"d_y", 3}, {"d_f", 8}, {"heads", 1}, {"depth", 1}};
  const fs::path pre = write_config("pre.json", {{"seed", 1},
                                                 {"model", model},
                                                 {"network", network},
                                                 {"train", {{"optimizer", "adam"}, {"steps", 30}, {"batch_size", 16}}},
                                                 {"embedding", {{"position_dims", 2}}},
                                                 {"num_sequences", 8},
                                                 {"horizon", 6},
                                                 {"eval_prefixes", 50}});
  const fs::path out = kWork / "pre";
  REQUIRE(lab("pretrain --config " + pre.string() + " --out " + out.string() + " --deterministic").code == 0);
  REQUIRE(fs::exists(out / "checkpoint.bin"));
  const json results = json::parse(slurp(out / "results.json"));
  CHECK(results["payload"]["evaluation"]["pinsker_violations"] == 0);

  const std::string ckpt = (out / "checkpoint.bin").string();
  const fs::path ev = write_config(
      "ev.json", {{"model", model}, {"checkpoint", ckpt}, {"horizon", 6}, {"eval_prefixes", 50}});
  CHECK(lab("eval-tv --config " + ev.string() + " --out " + (kWork / "ev").string()).code == 0);

  const fs::path grid = write_config("grid.json", {{"model", model},
                                                   {"network", network},
                                                   {"train", {{"optimizer", "adam"}, {"steps", 10}, {"batch_size", 8}}},
                                                   {"embedding", {{"position_dims", 2}}},
                                                   {"num_sequences_grid", {4, 8}},
                                                   {"horizon", 6},
                                                   {"seeds", 2},
                                                   {"eval_prefixes", 30}});
  CHECK(lab("eval-tv --config " + grid.string() + " --out " + (kWork / "grid").string()).code == 0);
  CHECK(fs::exists(kWork / "grid" / "tv_cells.csv"));

  const fs::path dec = write_config(
      "dec.json", {{"model", model}, {"predictor", "checkpoint"}, {"checkpoint", ckpt}, {"horizon", 10}, {"trials", 5}});
  CHECK(lab("regret-decomp --config " + dec.string() + " --out " + (kWork / "dec").string()).code == 0);
  const json d = json::parse(slurp(kWork / "dec" / "results.json"));
  CHECK(d["payload"]["max_identity_error"].get<double>() <= 1e-9);

  const fs::path rob = write_config("rob.json", {{"model", {{"path", fixture("pairs_distinguishable.json")}}},
                                                 {"t_grid", {4, 9}},
                                                 {"trials", 10}});
  CHECK(lab("robustness --config " + rob.string() + " --out " + (kWork / "rob").string()).code == 0);
  CHECK(slurp(kWork / "rob" / "robustness.csv").rfind("t,mean_kl,stderr,margin,c0,l,envelope_value,log_mean_kl\n", 0) == 0);
}
