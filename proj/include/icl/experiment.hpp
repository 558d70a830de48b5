#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "icl/concept_model.hpp"
#include "icl/rng.hpp"
#include "icl/training.hpp"
#include "icl/transformer.hpp"

namespace icl {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kLibraryVersion = "0.1.0";

// Overlays `given` on `defaults`. Keys missing from `defaults` raise
// SchemaError with their dotted path; a null default accepts any value, and
// otherwise the type has to match (integers are accepted for floats).
nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& given,
                            const std::string& path = "");

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);
// Hash of the canonical dump (object keys sorted).
std::string config_hash(const nlohmann::json& config);

struct EmbeddingSpec {
  double radius = 1.0;
  int position_dims = 4;
  double position_weight = 0.25;
  std::uint64_t seed = 77;
};

nlohmann::json embedding_to_json(const EmbeddingSpec& spec);
EmbeddingSpec embedding_from_json(const nlohmann::json& doc, const std::string& path = "embedding");
TokenEmbeddingTable make_embedding(const EmbeddingSpec& spec, int alphabet_size, int d);

nlohmann::json train_to_json(const TrainConfig& cfg);
TrainConfig train_from_json(const nlohmann::json& doc, const std::string& path = "train");

enum class InitKind { random, residual };
std::string init_name(InitKind kind);
InitKind init_from_name(const std::string& name);
TransformerParams initial_params(const TransformerShape& shape, InitKind kind, Rng& rng);

struct PretrainSetup {
  TransformerShape shape;
  TrainConfig train;
  EmbeddingSpec embedding;
  InitKind init = InitKind::random;
  std::size_t num_sequences = 64;  // N_p
  std::size_t horizon = 16;        // T_p
  // Targets are the Bayes predictive of the pretraining model instead of the observed token.
  bool soft_targets = false;
};

struct PretrainRun {
  TrainResult result;
  double mean_target_entropy = 0.0;  // final_loss - this is the mean KL to the targets
};

// Data, initialization and batch order come from rng.fork(0), fork(1) and fork(2).
PretrainRun pretrain(const LatentConceptModel& model, const PretrainSetup& setup, const Rng& rng);

struct TvCell {
  std::size_t num_sequences = 0;
  std::size_t horizon = 0;
  std::vector<double> final_loss;  // per training seed
  std::vector<double> mean_tv;     // per training seed
  std::vector<double> mean_kl;
  double median_tv = 0.0;
  double sem_tv = 0.0;  // across training seeds
};

struct TvGridResult {
  std::vector<TvCell> cells;
  // median_{i+1} <= median_i + sqrt(sem_i^2 + sem_{i+1}^2) for every neighbouring pair.
  bool non_increasing_within_sem = false;
  bool medians_non_increasing = false;
};

struct TvGridConfig {
  PretrainSetup base;
  std::vector<std::size_t> num_sequences = {32, 128, 512};
  std::size_t horizon = 16;
  std::size_t seeds = 5;
  std::size_t eval_prefixes = 2000;
};

// Run (cell c, seed s) trains with rng.fork(c * seeds + s); every run is
// scored on one prefix sample drawn from rng.fork(1'000'000).
TvGridResult tv_grid(const LatentConceptModel& model, const TvGridConfig& config, const Rng& rng,
                     unsigned threads = 1);

struct DepthSweepConfig {
  PretrainSetup base;  // base.shape.depth is ignored
  std::vector<int> depths = {1, 2, 3, 4};
  std::size_t restarts = 3;
  std::size_t steps_per_layer = 1500;  // a depth-D run trains for D times this many steps
};

struct DepthRow {
  int depth = 0;
  std::vector<double> kl;  // per restart
  double best_kl = 0.0;
};

struct DepthSweepResult {
  std::vector<DepthRow> rows;
  bool non_increasing = false;
};

// Fits the soft Bayes predictive; one dataset shared by all runs from
// rng.fork(0), restart r at depth index i from rng.fork(1 + i * restarts + r).
DepthSweepResult depth_sweep(const LatentConceptModel& model, const DepthSweepConfig& config, const Rng& rng,
                             unsigned threads = 1);

struct FloorSweep {
  double min_output = 1.0;
  double min_margin = 0.0;  // min over trials of (min output - floor)
  std::size_t violations = 0;
  std::size_t trials = 0;
};

// Random parameters in Theta with depth cycling through 1..3 and tau in {0.5, 1}.
FloorSweep floor_sweep(const TransformerShape& base, std::size_t trials, double param_scale, const Rng& rng);

struct FluctuationSweep {
  double max_ratio = 0.0;  // observed TV / bound
  std::size_t violations = 0;
  std::size_t checks = 0;
};

FluctuationSweep fluctuation_sweep(const TransformerShape& base, std::size_t pairs, std::size_t inputs_per_pair,
                                   double input_norm, const Rng& rng);

struct TvKlSweep {
  std::size_t pairs = 0;
  std::size_t kl_tv_violations = 0;
  std::size_t pinsker_violations = 0;
  double max_kl_over_bound = 0.0;
};

TvKlSweep tv_kl_sweep(std::size_t pairs, int max_support, const Rng& rng);

struct GradientSweep {
  std::size_t seeds = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

// One kink-free probe per seed, resampling up to 10 parameter draws.
GradientSweep gradient_sweep(const TransformerShape& base, std::size_t seeds, const Rng& rng);

// Writes artifacts into one directory and records their hashes.
class ArtifactWriter {
 public:
  ArtifactWriter(std::filesystem::path dir, std::string subcommand, nlohmann::json config,
                 std::vector<std::uint64_t> seeds, bool deterministic);

  const std::filesystem::path& dir() const noexcept { return dir_; }

  // Numbers written with 17 significant digits.
  void write_csv(const std::string& name, const std::vector<std::string>& header,
                 const std::vector<std::vector<double>>& rows);
  // x,y,err columns for plotting.
  void write_plot(const std::string& name, const std::vector<double>& x, const std::vector<double>& y,
                  const std::vector<double>& err);
  void write_text(const std::string& name, const std::string& content);
  // Registers a file some other writer placed in dir().
  void add_file(const std::string& name);

  // Writes results.json and manifest.json.
  void finish(const nlohmann::json& payload, double wall_clock_seconds);

 private:
  std::filesystem::path dir_;
  std::string subcommand_;
  nlohmann::json config_;
  std::vector<std::uint64_t> seeds_;
  bool deterministic_;
  std::vector<std::string> files_;
};

struct VerifyReport {
  bool ok = false;
  std::vector<std::string> problems;
};

// Re-hashes every file in the manifest and the recorded config. When
// `expected_config` is not null its hash must match too.
VerifyReport verify_artifacts(const std::filesystem::path& dir,
                              const nlohmann::json& expected_config = nullptr);

}  // namespace icl
