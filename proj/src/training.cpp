#include "icl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "icl/errors.hpp"
#include "icl/metrics.hpp"
#include "icl/parallel.hpp"

namespace icl {

void Dataset::add(Eigen::MatrixXd input, Eigen::VectorXd target, std::vector<Token> prefix) {
  inputs.push_back(std::move(input));
  targets.push_back(std::move(target));
  prefixes.push_back(std::move(prefix));
}

Eigen::VectorXd one_hot(int size, int index) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(size);
  v[index] = 1.0;
  return v;
}

Dataset pretraining_dataset(const LatentConceptModel& model, const TokenEmbeddingTable& embedding,
                            std::size_t num_sequences, std::size_t horizon, Rng& rng) {
  if (embedding.alphabet_size() != model.alphabet_size()) throw ShapeMismatch("embedding and model alphabets differ");
  if (horizon < 1) throw std::invalid_argument("horizon must be at least 1");
  Dataset data;
  for (std::size_t n = 0; n < num_sequences; ++n) {
    const ConceptId z = sample_concept(model, rng);
    const TokenSequence seq = generate_sequence(model, z, horizon + 1, rng);
    const Eigen::MatrixXd full = embedding.embed(seq.tokens);
    for (std::size_t t = 1; t <= horizon; ++t) {
      data.add(full.topRows(static_cast<Eigen::Index>(t)), one_hot(model.alphabet_size(), seq.tokens[t]),
               std::vector<Token>(seq.tokens.begin(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(t)));
    }
  }
  return data;
}

double dataset_loss(const TransformerParams& p, const Dataset& data, const std::vector<std::size_t>& indices,
                    TransformerParams* grad, unsigned threads) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  std::vector<double> losses(indices.size());
  if (grad == nullptr) {
    parallel_for(indices.size(), threads, [&](std::size_t i) {
      losses[i] = example_loss(p, data.inputs[indices[i]], data.targets[indices[i]]);
    });
  } else {
    // Fixed-size chunks reduced in chunk order, so the sum does not depend on the thread count.
    constexpr std::size_t kChunk = 32;
    const std::size_t chunks = (indices.size() + kChunk - 1) / kChunk;
    std::vector<TransformerParams> partial(chunks, TransformerParams::zeros(p.shape));
    parallel_for(chunks, threads, [&](std::size_t c) {
      const std::size_t hi = std::min(indices.size(), (c + 1) * kChunk);
      for (std::size_t i = c * kChunk; i < hi; ++i)
        losses[i] = accumulate_gradient(p, data.inputs[indices[i]], data.targets[indices[i]], partial[c]);
    });
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.num_scalars()));
    for (const auto& g : partial) acc += flatten(g);
    *grad = unflatten(p.shape, acc);
  }
  double total = 0.0;
  for (double l : losses) total += l;
  const double n = static_cast<double>(indices.size());
  if (grad) *grad = unflatten(p.shape, flatten(*grad) / n);
  return total / n;
}

double dataset_loss(const TransformerParams& p, const Dataset& data, unsigned threads) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return dataset_loss(p, data, all, nullptr, threads);
}

namespace {

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(batch), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    if (batch_ == 0 || batch_ >= n) batch_ = n;
    else reshuffle();
  }

  std::vector<std::size_t> next() {
    if (batch_ == order_.size()) return order_;
    if (cursor_ + batch_ > order_.size()) reshuffle();
    std::vector<std::size_t> b(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return b;
  }

 private:
  void reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

std::string trace_tail(const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  const std::size_t from = trace.size() > 5 ? trace.size() - 5 : 0;
  for (std::size_t i = from; i < trace.size(); ++i) {
    os << " [step " << trace[i].step << " loss " << trace[i].loss << " grad " << trace[i].grad_norm << "]";
  }
  return os.str();
}

TrainResult train(const TransformerParams& init, const Dataset& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("training needs a non-empty dataset");
  if (!(cfg.learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (!(cfg.final_lr_fraction >= 0.0)) throw std::invalid_argument("final learning-rate fraction must be non-negative");
  TrainResult result;
  TransformerParams p = project_params(init);
  BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed);
  const Eigen::Index n = static_cast<Eigen::Index>(p.num_scalars());
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n), m2 = Eigen::VectorXd::Zero(n);
  double lr = cfg.learning_rate;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<std::size_t> batch = sampler.next();
    TransformerParams grad = TransformerParams::zeros(p.shape);
    const double loss = dataset_loss(p, data, batch, &grad, cfg.threads);
    const Eigen::VectorXd g = flatten(grad);
    TraceRow row{step, loss, g.norm(), 0};
    if (!std::isfinite(loss) || !g.allFinite()) {
      result.trace.push_back(row);
      throw TrainingDiverged("non-finite loss or gradient at step " + std::to_string(step) + ":" + trace_tail(result.trace));
    }
    const Eigen::VectorXd x = flatten(p);
    if (cfg.optimizer != Optimizer::pgd_line_search) {
      const double progress = cfg.steps > 1 ? static_cast<double>(step) / static_cast<double>(cfg.steps - 1) : 0.0;
      lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
    }
    switch (cfg.optimizer) {
      case Optimizer::pgd:
        p = project_params(unflatten(p.shape, x - lr * g), &row.projected_blocks);
        break;
      case Optimizer::adam: {
        m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g;
        m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
        const Eigen::VectorXd update =
            ((m1 / c1).array() / ((m2 / c2).array().sqrt() + cfg.epsilon)).matrix();
        p = project_params(unflatten(p.shape, x - lr * update), &row.projected_blocks);
        break;
      }
      case Optimizer::pgd_line_search: {
        // Accept only steps that do not increase the batch loss.
        for (int attempt = 0; attempt < 40 && lr > 0.0; ++attempt) {
          int projected = 0;
          TransformerParams candidate = project_params(unflatten(p.shape, x - lr * g), &projected);
          const double cand_loss = dataset_loss(candidate, data, batch, nullptr, cfg.threads);
          if (std::isfinite(cand_loss) && cand_loss <= loss) {
            p = std::move(candidate);
            row.projected_blocks = projected;
            lr *= 1.5;
            break;
          }
          lr *= 0.5;
        }
        if (lr < cfg.learning_rate * 1e-12) lr = cfg.learning_rate * 1e-12;
        break;
      }
    }
    result.trace.push_back(row);
  }
  result.final_loss = dataset_loss(p, data, cfg.threads);
  if (!std::isfinite(result.final_loss)) throw TrainingDiverged("non-finite final loss:" + trace_tail(result.trace));
  result.params = std::move(p);
  return result;
}

}  // namespace

TrainResult train_mle(const TransformerParams& init, const Dataset& data, const TrainConfig& cfg) {
  if (init.shape.head != HeadKind::softmax) throw std::invalid_argument("train_mle needs the softmax head");
  return train(init, data, cfg);
}

TrainResult train_l2(const TransformerParams& init, const Dataset& data, const TrainConfig& cfg) {
  if (init.shape.head != HeadKind::l2) throw std::invalid_argument("train_l2 needs the l2 head");
  return train(init, data, cfg);
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  const auto old = out.precision(17);
  out << "step,loss,grad_norm,projected_blocks_count\n";
  for (const auto& r : trace) out << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.projected_blocks << '\n';
  out.precision(old);
}

TvReport evaluate_tv(const TransformerParams& params, const TokenEmbeddingTable& embedding,
                     const LatentConceptModel& model, std::size_t n_prefixes, std::size_t horizon, Rng& rng,
                     unsigned threads) {
  if (embedding.alphabet_size() != model.alphabet_size() || params.shape.d_y != model.alphabet_size()) {
    throw ShapeMismatch("embedding, network and model alphabets must agree");
  }
  if (horizon < 1 || n_prefixes == 0) throw std::invalid_argument("evaluate_tv needs horizon >= 1 and prefixes");
  // Prefixes are drawn sequentially so the sample does not depend on the thread count.
  std::vector<std::vector<Token>> prefixes;
  for (std::size_t i = 0; i < n_prefixes; ++i) {
    const std::size_t t = 1 + rng.uniform_int(horizon);
    const ConceptId z = sample_concept(model, rng);
    prefixes.push_back(generate_sequence(model, z, t, rng).tokens);
  }
  std::vector<double> tvs(n_prefixes);
  std::vector<Divergence> kls(n_prefixes);
  std::vector<char> violations(n_prefixes, 0);
  parallel_for(n_prefixes, threads, [&](std::size_t i) {
    const Eigen::VectorXd truth = marginal_conditional(model, prefixes[i]);
    const Eigen::VectorXd net = forward(params, embedding.embed(prefixes[i]));
    tvs[i] = tv(truth, net);
    kls[i] = kl(truth, net);
    violations[i] = !kls[i].infinite && tvs[i] > std::sqrt(kls[i].value / 2.0) + 1e-12;
  });
  TvReport r;
  const Summary st = summarize(tvs);
  const Summary sk = summarize(kls);
  r.mean_tv = st.mean;
  r.sem_tv = st.sem;
  r.mean_kl = sk.mean;
  r.sem_kl = sk.sem;
  r.count = n_prefixes;
  r.kl_infinite = sk.flagged;
  r.pinsker_violations = static_cast<std::size_t>(std::count(violations.begin(), violations.end(), 1));
  return r;
}

}  // namespace icl
