#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "icl/bma.hpp"
#include "icl/concept_model.hpp"
#include "icl/rng.hpp"

namespace icl {

// Norm caps of the bounded parameter class.
struct ThetaBounds {
  double b_a = 2.0;   // output layer: |A^T|_{1,2} (softmax head) or |A|_F (l2 head)
  double b_a1 = 4.0;  // |A_1|_F
  double b_a2 = 4.0;  // |A_2|_F
  double b_q = 2.0;   // |W^Q|_F
  double b_k = 2.0;   // |W^K|_F
  double b_v = 2.0;   // |W^V|_F

  bool operator==(const ThetaBounds&) const = default;
};

enum class HeadKind { softmax, l2 };

struct TransformerShape {
  int d = 16;       // model width, also the per-head width
  int d_y = 4;      // output size
  int d_f = 32;     // feed-forward width
  int heads = 2;
  int depth = 2;
  double tau = 1.0;  // output temperature in (0, 1]
  HeadKind head = HeadKind::softmax;
  ThetaBounds bounds;

  void validate() const;
  bool operator==(const TransformerShape&) const = default;
};

struct LayerParams {
  std::vector<Eigen::MatrixXd> wq, wk, wv;  // per head: d x d
  Eigen::MatrixXd a1;                       // d x d_f
  Eigen::MatrixXd a2;                       // d_f x d
  double gamma1 = 0.0;
  double gamma2 = 0.0;
};

struct TransformerParams {
  TransformerShape shape;
  std::vector<LayerParams> layers;
  Eigen::MatrixXd out;  // d x d_y

  // All blocks zero, with the given shape.
  static TransformerParams zeros(const TransformerShape& shape);
  std::size_t num_scalars() const;
  bool operator==(const TransformerParams&) const;
};

// Flat views in a fixed block order: per layer (W^Q heads, W^K heads, W^V heads,
// A_1, A_2, gamma_1, gamma_2), then the output layer.
Eigen::VectorXd flatten(const TransformerParams& p);
TransformerParams unflatten(const TransformerShape& shape, const Eigen::VectorXd& flat);

// sqrt(sum_j |A_{j,:}|_1^2), written |A^T|_{1,2}.
double norm_12_transposed(const Eigen::MatrixXd& a);
double output_norm(const TransformerParams& p);

// Gaussian entries scaled by `scale`, gammas uniform in [-1, 1], then projected.
TransformerParams random_params(const TransformerShape& shape, Rng& rng, double scale = 0.3);

// Random weights with every residual gate at 1 and the value and second
// feed-forward blocks shrunk, so each layer starts close to the identity.
// The output layer starts at zero.
TransformerParams residual_params(const TransformerShape& shape, Rng& rng, double scale = 0.3);

// Scales each block by min(1, bound / norm) in its norm and clips the gammas
// to [-1, 1]. `projected_blocks` receives the number of blocks changed.
TransformerParams project_params(const TransformerParams& p, int* projected_blocks = nullptr);
bool in_theta(const TransformerParams& p, double tol = 1e-12);

// Row-wise projection onto the unit l2 ball.
Eigen::MatrixXd project_rows(const Eigen::MatrixXd& x);

// (1 + d_y exp(B_A / tau))^{-1}.
double output_floor(const TransformerShape& shape);

struct LayerCache {
  Eigen::MatrixXd x_in;
  std::vector<Eigen::MatrixXd> q, k, v, p;  // per head; p = softmax_rows(q k^T)
  Eigen::MatrixXd m, y, u, n;               // pre-projection and activations
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Eigen::MatrixXd x_out;  // X^{(D)}
  Eigen::VectorXd pooled; // (1/L) 1^T X^{(D)}
  Eigen::VectorXd output; // probabilities (softmax head) or f(X) (l2 head)
  // Smallest distance of any ReLU pre-activation from 0 or projected row norm from 1.
  double kink_distance = 0.0;
};

ForwardCache forward_cached(const TransformerParams& p, const Eigen::MatrixXd& x);
Eigen::VectorXd forward(const TransformerParams& p, const Eigen::MatrixXd& x);

// Loss of one example: cross-entropy -sum_k t_k log p_k (softmax head) or
// |t - f(X)|^2 (l2 head).
double example_loss(const TransformerParams& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& target);
// Adds the gradient of example_loss to `grad` and returns the loss.
double accumulate_gradient(const TransformerParams& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& target,
                           TransformerParams& grad);

// Fixed token embedding: a token part of norm R sqrt(1 - w) from orthogonalized
// random rows and a sinusoidal position part of norm R sqrt(w), so every row
// has norm exactly R.
class TokenEmbeddingTable {
 public:
  TokenEmbeddingTable(int alphabet_size, int d, double radius, Rng& rng, int position_dims = 4,
                      double position_weight = 0.25);

  int alphabet_size() const noexcept { return static_cast<int>(tokens_.rows()); }
  int dim() const noexcept { return d_; }
  double radius() const noexcept { return radius_; }
  const Eigen::MatrixXd& token_rows() const noexcept { return tokens_; }
  Eigen::RowVectorXd position_row(std::size_t position) const;

  Eigen::MatrixXd embed(std::span<const Token> tokens) const;

 private:
  int d_;
  int position_dims_;
  double radius_;
  double position_weight_;
  Eigen::MatrixXd tokens_;  // alphabet x (d - position_dims)
};

class TransformerPredictor final : public Predictor {
 public:
  TransformerPredictor(const TransformerParams& params, const TokenEmbeddingTable& embedding);
  int alphabet_size() const override { return params_.shape.d_y; }
  // Requires a non-empty prefix.
  Eigen::VectorXd predict(std::span<const Token> prefix) const override;

 private:
  const TransformerParams& params_;
  const TokenEmbeddingTable& embedding_;
};

// Prop-style fluctuation bound on TV(P_p(.|X), P_p2(.|X)) for inputs with
// max row norm R, evaluated with the bounds of `p`.
double parafluc_bound(const TransformerParams& p, const TransformerParams& p2, double input_norm_r);

struct GradientCheck {
  double rel_error = 0.0;   // at the best step size
  double best_h = 0.0;
  double analytic = 0.0;    // directional derivative from backprop
  double numeric = 0.0;     // central difference at best_h
  double kink_distance = 0.0;
};

// Central differences of the mean loss over `inputs` along `direction`;
// step sizes whose probe points change a ReLU or projection branch are skipped.
GradientCheck gradient_check(const TransformerParams& p, const std::vector<Eigen::MatrixXd>& inputs,
                             const std::vector<Eigen::VectorXd>& targets, const TransformerParams& direction,
                             const std::vector<double>& h_grid = {1e-3, 1e-4, 1e-5, 1e-6});

}  // namespace icl
