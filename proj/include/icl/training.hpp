#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "icl/concept_model.hpp"
#include "icl/transformer.hpp"

namespace icl {

// Embedded inputs with probability targets (softmax head) or target vectors (l2 head).
struct Dataset {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::VectorXd> targets;
  std::vector<std::vector<Token>> prefixes;  // token form of each input, when known

  std::size_t size() const noexcept { return inputs.size(); }
  void add(Eigen::MatrixXd input, Eigen::VectorXd target, std::vector<Token> prefix = {});
};

Eigen::VectorXd one_hot(int size, int index);

// N_p sequences of length T_p + 1, each under a concept drawn from the prior,
// yielding the examples (S_t, x_{t+1}) for t = 1..T_p.
Dataset pretraining_dataset(const LatentConceptModel& model, const TokenEmbeddingTable& embedding,
                            std::size_t num_sequences, std::size_t horizon, Rng& rng);

enum class Optimizer { pgd, pgd_line_search, adam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::pgd;
  double learning_rate = 0.05;
  // Step size decays linearly to learning_rate * final_lr_fraction over the run (pgd, adam).
  double final_lr_fraction = 1.0;
  std::size_t steps = 1000;
  std::size_t batch_size = 0;  // 0 means full batch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  unsigned threads = 1;
  std::uint64_t seed = 0;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;        // batch loss before the step
  double grad_norm = 0.0;
  int projected_blocks = 0;
};

struct TrainResult {
  TransformerParams params;
  std::vector<TraceRow> trace;
  double final_loss = 0.0;  // full-dataset loss of the returned parameters
};

// Mean loss over the batch. When `grad` is given it is overwritten with the
// mean gradient; per-example terms are reduced in index order.
double dataset_loss(const TransformerParams& p, const Dataset& data, const std::vector<std::size_t>& indices,
                    TransformerParams* grad = nullptr, unsigned threads = 1);
double dataset_loss(const TransformerParams& p, const Dataset& data, unsigned threads = 1);

// Projected training on the cross-entropy (softmax head).
TrainResult train_mle(const TransformerParams& init, const Dataset& data, const TrainConfig& config);
// Projected training on the squared error (l2 head).
TrainResult train_l2(const TransformerParams& init, const Dataset& data, const TrainConfig& config);

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace);

struct TvReport {
  double mean_tv = 0.0;
  double sem_tv = 0.0;
  double mean_kl = 0.0;
  double sem_kl = 0.0;
  std::size_t count = 0;
  std::size_t kl_infinite = 0;
  std::size_t pinsker_violations = 0;  // prefixes with TV > sqrt(KL / 2)
};

// TV and KL between the model's marginal next-token law and the network on
// prefixes drawn like the pretraining data (t uniform in [1, horizon]).
TvReport evaluate_tv(const TransformerParams& params, const TokenEmbeddingTable& embedding,
                     const LatentConceptModel& model, std::size_t n_prefixes, std::size_t horizon, Rng& rng,
                     unsigned threads = 1);

}  // namespace icl
