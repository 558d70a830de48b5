#include "icl/transformer.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "icl/errors.hpp"
#include "icl/metrics.hpp"

namespace icl {

void TransformerShape::validate() const {
  if (d < 1 || d_y < 1 || d_f < 1 || heads < 1 || depth < 0) throw ShapeMismatch("transformer dimensions must be positive");
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in (0, 1]");
  if (head == HeadKind::l2 && d_y != d) throw ShapeMismatch("the l2 head needs d_y = d");
  const double b[] = {bounds.b_a, bounds.b_a1, bounds.b_a2, bounds.b_q, bounds.b_k, bounds.b_v};
  for (double v : b)
    if (!(v > 0.0)) throw std::invalid_argument("parameter bounds must be positive");
}

TransformerParams TransformerParams::zeros(const TransformerShape& s) {
  s.validate();
  TransformerParams p;
  p.shape = s;
  p.layers.resize(static_cast<std::size_t>(s.depth));
  for (auto& l : p.layers) {
    l.wq.assign(static_cast<std::size_t>(s.heads), Eigen::MatrixXd::Zero(s.d, s.d));
    l.wk = l.wq;
    l.wv = l.wq;
    l.a1 = Eigen::MatrixXd::Zero(s.d, s.d_f);
    l.a2 = Eigen::MatrixXd::Zero(s.d_f, s.d);
  }
  p.out = Eigen::MatrixXd::Zero(s.d, s.d_y);
  return p;
}

std::size_t TransformerParams::num_scalars() const {
  const auto d = static_cast<std::size_t>(shape.d);
  const std::size_t per_layer = 3 * static_cast<std::size_t>(shape.heads) * d * d +
                                2 * d * static_cast<std::size_t>(shape.d_f) + 2;
  return layers.size() * per_layer + d * static_cast<std::size_t>(shape.d_y);
}

bool TransformerParams::operator==(const TransformerParams& o) const {
  return shape == o.shape && layers.size() == o.layers.size() && flatten(*this) == flatten(o);
}

namespace {

template <typename Visit>
void visit_blocks(TransformerParams& p, Visit&& visit) {
  for (auto& l : p.layers) {
    for (auto& w : l.wq) visit(w);
    for (auto& w : l.wk) visit(w);
    for (auto& w : l.wv) visit(w);
    visit(l.a1);
    visit(l.a2);
    Eigen::Map<Eigen::MatrixXd> g1(&l.gamma1, 1, 1);
    Eigen::Map<Eigen::MatrixXd> g2(&l.gamma2, 1, 1);
    visit(g1);
    visit(g2);
  }
  visit(p.out);
}

void check_same_shape(const TransformerParams& a, const TransformerParams& b) {
  if (a.shape.d != b.shape.d || a.shape.d_y != b.shape.d_y || a.shape.d_f != b.shape.d_f ||
      a.shape.heads != b.shape.heads || a.layers.size() != b.layers.size() || a.shape.head != b.shape.head) {
    throw ShapeMismatch("parameter sets have different shapes");
  }
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& s) {
  Eigen::MatrixXd out = s;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    out.row(r).array() -= out.row(r).maxCoeff();
    out.row(r) = out.row(r).array().exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

// Backward through project_rows: identity for rows inside the ball.
Eigen::MatrixXd project_rows_backward(const Eigen::MatrixXd& r, const Eigen::MatrixXd& g) {
  Eigen::MatrixXd out = g;
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    const double n = r.row(i).norm();
    if (n > 1.0) {
      const Eigen::RowVectorXd u = r.row(i) / n;
      out.row(i) = (g.row(i) - g.row(i).dot(u) * u) / n;
    }
  }
  return out;
}

double row_kink_distance(const Eigen::MatrixXd& r) {
  return (r.rowwise().norm().array() - 1.0).abs().minCoeff();
}

}  // namespace

Eigen::VectorXd flatten(const TransformerParams& p) {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(p.num_scalars()));
  Eigen::Index pos = 0;
  visit_blocks(const_cast<TransformerParams&>(p), [&](auto& block) {
    for (Eigen::Index c = 0; c < block.cols(); ++c)
      for (Eigen::Index r = 0; r < block.rows(); ++r) flat[pos++] = block(r, c);
  });
  return flat;
}

TransformerParams unflatten(const TransformerShape& shape, const Eigen::VectorXd& flat) {
  TransformerParams p = TransformerParams::zeros(shape);
  if (static_cast<std::size_t>(flat.size()) != p.num_scalars()) throw ShapeMismatch("flat parameter vector has wrong size");
  Eigen::Index pos = 0;
  visit_blocks(p, [&](auto& block) {
    for (Eigen::Index c = 0; c < block.cols(); ++c)
      for (Eigen::Index r = 0; r < block.rows(); ++r) block(r, c) = flat[pos++];
  });
  return p;
}

double norm_12_transposed(const Eigen::MatrixXd& a) { return a.rowwise().lpNorm<1>().norm(); }

double output_norm(const TransformerParams& p) {
  return p.shape.head == HeadKind::softmax ? norm_12_transposed(p.out) : p.out.norm();
}

TransformerParams random_params(const TransformerShape& shape, Rng& rng, double scale) {
  TransformerParams p = TransformerParams::zeros(shape);
  visit_blocks(p, [&](auto& block) {
    for (Eigen::Index r = 0; r < block.rows(); ++r)
      for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = scale * rng.normal();
  });
  for (auto& l : p.layers) {
    l.gamma1 = 2.0 * rng.uniform() - 1.0;
    l.gamma2 = 2.0 * rng.uniform() - 1.0;
  }
  return project_params(p);
}

TransformerParams residual_params(const TransformerShape& shape, Rng& rng, double scale) {
  TransformerParams p = random_params(shape, rng, scale);
  for (auto& l : p.layers) {
    l.gamma1 = 1.0;
    l.gamma2 = 1.0;
    l.a2 *= 0.1;
    for (auto& w : l.wv) w *= 0.3;
  }
  p.out.setZero();
  return p;
}

TransformerParams project_params(const TransformerParams& p, int* projected_blocks) {
  TransformerParams q = p;
  const ThetaBounds& b = p.shape.bounds;
  int count = 0;
  const auto frobenius = [](const Eigen::MatrixXd& m) { return m.norm(); };
  // Rescaled blocks land exactly inside the bound, so a second projection is a no-op.
  auto cap = [&](Eigen::MatrixXd& m, auto&& norm_of, double bound) {
    const double norm = norm_of(m);
    if (norm > bound) {
      m *= bound / norm;
      while (norm_of(m) > bound) m *= 1.0 - std::numeric_limits<double>::epsilon();
      ++count;
    }
  };
  for (auto& l : q.layers) {
    for (auto& w : l.wq) cap(w, frobenius, b.b_q);
    for (auto& w : l.wk) cap(w, frobenius, b.b_k);
    for (auto& w : l.wv) cap(w, frobenius, b.b_v);
    cap(l.a1, frobenius, b.b_a1);
    cap(l.a2, frobenius, b.b_a2);
    for (double* g : {&l.gamma1, &l.gamma2}) {
      if (std::abs(*g) > 1.0) {
        *g = std::clamp(*g, -1.0, 1.0);
        ++count;
      }
    }
  }
  if (p.shape.head == HeadKind::softmax) cap(q.out, norm_12_transposed, b.b_a);
  else cap(q.out, frobenius, b.b_a);
  if (projected_blocks) *projected_blocks = count;
  return q;
}

bool in_theta(const TransformerParams& p, double tol) {
  const ThetaBounds& b = p.shape.bounds;
  auto ok = [&](double norm, double bound) { return norm <= bound * (1.0 + tol); };
  for (const auto& l : p.layers) {
    for (const auto& w : l.wq)
      if (!ok(w.norm(), b.b_q)) return false;
    for (const auto& w : l.wk)
      if (!ok(w.norm(), b.b_k)) return false;
    for (const auto& w : l.wv)
      if (!ok(w.norm(), b.b_v)) return false;
    if (!ok(l.a1.norm(), b.b_a1) || !ok(l.a2.norm(), b.b_a2)) return false;
    if (std::abs(l.gamma1) > 1.0 || std::abs(l.gamma2) > 1.0) return false;
  }
  return ok(output_norm(p), b.b_a);
}

Eigen::MatrixXd project_rows(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 1.0) out.row(i) /= n;
  }
  return out;
}

double output_floor(const TransformerShape& s) {
  return 1.0 / (1.0 + s.d_y * std::exp(s.bounds.b_a / s.tau));
}

ForwardCache forward_cached(const TransformerParams& p, const Eigen::MatrixXd& x) {
  const TransformerShape& s = p.shape;
  if (x.rows() < 1) throw ShapeMismatch("input needs at least one row");
  if (x.cols() != s.d) throw ShapeMismatch("input width differs from the model width");
  if (!x.allFinite()) throw NonFiniteInput("input has non-finite entries");
  ForwardCache c;
  c.kink_distance = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd h = x;
  for (const auto& l : p.layers) {
    LayerCache lc;
    lc.x_in = h;
    lc.m = l.gamma1 * h;
    for (std::size_t i = 0; i < l.wq.size(); ++i) {
      lc.q.push_back(h * l.wq[i]);
      lc.k.push_back(h * l.wk[i]);
      lc.v.push_back(h * l.wv[i]);
      lc.p.push_back(softmax_rows(lc.q.back() * lc.k.back().transpose()));
      lc.m += lc.p.back() * lc.v.back();
    }
    lc.y = project_rows(lc.m);
    lc.u = lc.y * l.a1;
    lc.n = lc.u.cwiseMax(0.0) * l.a2 + l.gamma2 * lc.y;
    h = project_rows(lc.n);
    c.kink_distance = std::min({c.kink_distance, row_kink_distance(lc.m), row_kink_distance(lc.n),
                                lc.u.cwiseAbs().minCoeff()});
    c.layers.push_back(std::move(lc));
  }
  c.x_out = h;
  c.pooled = h.colwise().mean().transpose();
  const Eigen::VectorXd y = p.out.transpose() * c.pooled;
  c.output = s.head == HeadKind::softmax ? softmax(y / s.tau) : y;
  return c;
}

Eigen::VectorXd forward(const TransformerParams& p, const Eigen::MatrixXd& x) { return forward_cached(p, x).output; }

double example_loss(const TransformerParams& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& target) {
  const Eigen::VectorXd out = forward(p, x);
  if (target.size() != out.size()) throw ShapeMismatch("target size differs from the output size");
  if (p.shape.head == HeadKind::l2) return (target - out).squaredNorm();
  double loss = 0.0;
  for (Eigen::Index k = 0; k < target.size(); ++k)
    if (target[k] > 0.0) loss -= target[k] * std::log(out[k]);
  return loss;
}

double accumulate_gradient(const TransformerParams& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& target,
                           TransformerParams& grad) {
  const ForwardCache c = forward_cached(p, x);
  const TransformerShape& s = p.shape;
  if (target.size() != c.output.size()) throw ShapeMismatch("target size differs from the output size");
  double loss = 0.0;
  Eigen::VectorXd dy;  // gradient w.r.t. pooled @ out (before temperature)
  if (s.head == HeadKind::l2) {
    loss = (target - c.output).squaredNorm();
    dy = 2.0 * (c.output - target);
  } else {
    for (Eigen::Index k = 0; k < target.size(); ++k)
      if (target[k] > 0.0) loss -= target[k] * std::log(c.output[k]);
    dy = (c.output * target.sum() - target) / s.tau;
  }
  grad.out += c.pooled * dy.transpose();
  const Eigen::RowVectorXd dpooled = (p.out * dy).transpose();
  const double inv_l = 1.0 / static_cast<double>(x.rows());
  Eigen::MatrixXd dh = dpooled.replicate(x.rows(), 1) * inv_l;

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const LayerParams& l = p.layers[li];
    const LayerCache& lc = c.layers[li];
    LayerParams& g = grad.layers[li];
    const Eigen::MatrixXd dn = project_rows_backward(lc.n, dh);
    g.gamma2 += (dn.array() * lc.y.array()).sum();
    const Eigen::MatrixXd relu = lc.u.cwiseMax(0.0);
    g.a2 += relu.transpose() * dn;
    const Eigen::MatrixXd du = ((dn * l.a2.transpose()).array() * (lc.u.array() > 0.0).cast<double>()).matrix();
    g.a1 += lc.y.transpose() * du;
    const Eigen::MatrixXd dyl = l.gamma2 * dn + du * l.a1.transpose();
    const Eigen::MatrixXd dm = project_rows_backward(lc.m, dyl);
    g.gamma1 += (dm.array() * lc.x_in.array()).sum();
    Eigen::MatrixXd dx = l.gamma1 * dm;
    for (std::size_t i = 0; i < l.wq.size(); ++i) {
      const Eigen::MatrixXd& pm = lc.p[i];
      const Eigen::MatrixXd dp = dm * lc.v[i].transpose();
      const Eigen::MatrixXd dv = pm.transpose() * dm;
      const Eigen::VectorXd rows = (dp.array() * pm.array()).rowwise().sum();
      const Eigen::MatrixXd ds = (pm.array() * (dp.colwise() - rows).array()).matrix();
      const Eigen::MatrixXd dq = ds * lc.k[i];
      const Eigen::MatrixXd dk = ds.transpose() * lc.q[i];
      g.wq[i] += lc.x_in.transpose() * dq;
      g.wk[i] += lc.x_in.transpose() * dk;
      g.wv[i] += lc.x_in.transpose() * dv;
      dx += dq * l.wq[i].transpose() + dk * l.wk[i].transpose() + dv * l.wv[i].transpose();
    }
    dh = dx;
  }
  return loss;
}

TokenEmbeddingTable::TokenEmbeddingTable(int alphabet_size, int d, double radius, Rng& rng, int position_dims,
                                         double position_weight)
    : d_(d), position_dims_(position_dims), radius_(radius), position_weight_(position_weight) {
  if (alphabet_size < 1 || d < 1) throw ShapeMismatch("embedding needs a non-empty alphabet and width");
  if (position_dims < 0 || position_dims % 2 != 0 || position_dims >= d) {
    throw ShapeMismatch("position block must be even and narrower than the width");
  }
  if (position_dims == 0) position_weight_ = 0.0;
  if (!(radius > 0.0) || position_weight_ < 0.0 || position_weight_ >= 1.0) {
    throw std::invalid_argument("embedding radius must be positive and position weight in [0, 1)");
  }
  const int width = d - position_dims;
  Eigen::MatrixXd raw = rng.normal_matrix(width, std::max(alphabet_size, 1));
  if (alphabet_size <= width) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(width, alphabet_size);
    tokens_ = q.transpose();
  } else {
    tokens_ = raw.transpose();
  }
  tokens_.rowwise().normalize();
  tokens_ *= radius * std::sqrt(1.0 - position_weight_);
}

Eigen::RowVectorXd TokenEmbeddingTable::position_row(std::size_t position) const {
  Eigen::RowVectorXd row(position_dims_);
  const int pairs = position_dims_ / 2;
  for (int k = 0; k < pairs; ++k) {
    const double freq = std::pow(64.0, -static_cast<double>(k) / std::max(pairs, 1));
    row[2 * k] = std::sin(freq * static_cast<double>(position));
    row[2 * k + 1] = std::cos(freq * static_cast<double>(position));
  }
  if (pairs > 0) row *= radius_ * std::sqrt(position_weight_) / std::sqrt(static_cast<double>(pairs));
  return row;
}

Eigen::MatrixXd TokenEmbeddingTable::embed(std::span<const Token> tokens) const {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(tokens.size()), d_);
  const int width = d_ - position_dims_;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= alphabet_size()) throw std::invalid_argument("token outside embedding alphabet");
    const auto r = static_cast<Eigen::Index>(i);
    x.row(r).head(width) = tokens_.row(tokens[i]);
    if (position_dims_ > 0) x.row(r).tail(position_dims_) = position_row(i);
  }
  return x;
}

TransformerPredictor::TransformerPredictor(const TransformerParams& params, const TokenEmbeddingTable& embedding)
    : params_(params), embedding_(embedding) {
  if (embedding.dim() != params.shape.d) throw ShapeMismatch("embedding width differs from the model width");
  if (params.shape.head != HeadKind::softmax) throw std::invalid_argument("next-token prediction needs the softmax head");
}

Eigen::VectorXd TransformerPredictor::predict(std::span<const Token> prefix) const {
  if (prefix.empty()) throw std::invalid_argument("transformer predictions need a non-empty prefix");
  return forward(params_, embedding_.embed(prefix));
}

double parafluc_bound(const TransformerParams& p, const TransformerParams& p2, double r) {
  check_same_shape(p, p2);
  if (!(p.shape.bounds == p2.shape.bounds) || p.shape.tau != p2.shape.tau) {
    throw BoundMismatch("parameter sets declare different bounds");
  }
  const TransformerShape& s = p.shape;
  const ThetaBounds& b = s.bounds;
  const double h = s.heads;
  const int depth = static_cast<int>(p.layers.size());
  const double ffn = 1.0 + b.b_a1 * b.b_a2;
  const double mha = 1.0 + h * b.b_v * (1.0 + 4.0 * b.b_q * b.b_k);
  double total = (2.0 / s.tau) * norm_12_transposed(p.out - p2.out);
  for (int t = 1; t <= depth; ++t) {
    const LayerParams& l = p.layers[static_cast<std::size_t>(t - 1)];
    const LayerParams& m = p2.layers[static_cast<std::size_t>(t - 1)];
    const double first = t == 1 ? r : 1.0;
    const double alpha = (2.0 / s.tau) * b.b_a * ffn * std::pow(mha, depth - t);
    const double beta = std::abs(l.gamma2 - m.gamma2) + ffn * first * std::abs(l.gamma1 - m.gamma1);
    const double iota = b.b_a2 * (l.a1 - m.a1).norm() + b.b_a1 * (l.a2 - m.a2).norm();
    double dv = 0.0, dqk = 0.0;
    for (std::size_t i = 0; i < l.wq.size(); ++i) {
      dv += (l.wv[i] - m.wv[i]).norm();
      dqk += b.b_k * (l.wq[i] - m.wq[i]).norm() + b.b_q * (l.wk[i] - m.wk[i]).norm();
    }
    const double kappa = ffn * first * dv;
    const double rho = 2.0 * ffn * first * b.b_v * dqk;
    total += alpha * (beta + iota + kappa + rho);
  }
  return total;
}

namespace {

struct BranchPattern {
  std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>> relu;
  std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> proj_m, proj_n;
  bool operator==(const BranchPattern& o) const {
    if (relu.size() != o.relu.size()) return false;
    for (std::size_t i = 0; i < relu.size(); ++i) {
      if ((relu[i] != o.relu[i]).any() || (proj_m[i] != o.proj_m[i]).any() || (proj_n[i] != o.proj_n[i]).any())
        return false;
    }
    return true;
  }
};

BranchPattern branches(const ForwardCache& c) {
  BranchPattern b;
  for (const auto& l : c.layers) {
    b.relu.push_back(l.u.array() > 0.0);
    b.proj_m.push_back(l.m.rowwise().norm().array() > 1.0);
    b.proj_n.push_back(l.n.rowwise().norm().array() > 1.0);
  }
  return b;
}

double mean_loss(const TransformerParams& p, const std::vector<Eigen::MatrixXd>& xs,
                 const std::vector<Eigen::VectorXd>& ts) {
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) acc += example_loss(p, xs[i], ts[i]);
  return acc / static_cast<double>(xs.size());
}

}  // namespace

GradientCheck gradient_check(const TransformerParams& p, const std::vector<Eigen::MatrixXd>& inputs,
                             const std::vector<Eigen::VectorXd>& targets, const TransformerParams& direction,
                             const std::vector<double>& h_grid) {
  check_same_shape(p, direction);
  if (inputs.empty() || inputs.size() != targets.size()) throw std::invalid_argument("need matching inputs and targets");
  GradientCheck r;
  TransformerParams grad = TransformerParams::zeros(p.shape);
  std::vector<BranchPattern> base;
  r.kink_distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    accumulate_gradient(p, inputs[i], targets[i], grad);
    const ForwardCache c = forward_cached(p, inputs[i]);
    r.kink_distance = std::min(r.kink_distance, c.kink_distance);
    base.push_back(branches(c));
  }
  const Eigen::VectorXd dir = flatten(direction);
  r.analytic = flatten(grad).dot(dir) / static_cast<double>(inputs.size());
  const Eigen::VectorXd flat = flatten(p);
  r.rel_error = std::numeric_limits<double>::infinity();
  for (double h : h_grid) {
    const TransformerParams plus = unflatten(p.shape, flat + h * dir);
    const TransformerParams minus = unflatten(p.shape, flat - h * dir);
    bool same = true;
    for (std::size_t i = 0; i < inputs.size() && same; ++i) {
      same = branches(forward_cached(plus, inputs[i])) == base[i] && branches(forward_cached(minus, inputs[i])) == base[i];
    }
    if (!same) continue;
    const double lp = mean_loss(plus, inputs, targets);
    const double lm = mean_loss(minus, inputs, targets);
    if (!std::isfinite(lp) || !std::isfinite(lm)) throw NonFiniteInput("loss is non-finite at a probe point");
    const double numeric = (lp - lm) / (2.0 * h);
    const double scale = std::max({std::abs(r.analytic), std::abs(numeric), 1e-300});
    const double err = r.analytic == numeric ? 0.0 : std::abs(numeric - r.analytic) / scale;
    if (err < r.rel_error) {
      r.rel_error = err;
      r.best_h = h;
      r.numeric = numeric;
    }
  }
  if (!std::isfinite(r.rel_error)) throw KinkError("every probe step crosses a ReLU or projection branch");
  return r;
}

}  // namespace icl
