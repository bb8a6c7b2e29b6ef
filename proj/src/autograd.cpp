#include "wtal/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace wtal::ag {
namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  }
}

Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& v : inputs) node->parents.push_back(v.shared());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Matrix& Node::grad_buffer() {
  if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
  return grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on non-scalar");
  return value()(0, 0);
}

void Var::zero_grad() {
  if (node_->grad.size() != 0) node_->grad.setZero();
}

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var leaf(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::logic_error("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
    for (std::size_t i = 0; i < 2; ++i)
      if (parent(n, i).requires_grad) parent(n, i).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "div");
  return make_op(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.cwiseQuotient(y.value));
    if (y.requires_grad) {
      y.accumulate(-(n.grad.array() * x.value.array() / y.value.array().square()).matrix());
    }
  });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_op((a.value().array() + s).matrix(), {a},
                 [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Var add_row(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape");
  Matrix out = a.value().rowwise() + b.value().row(0);
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw std::invalid_argument("mul_col: vector shape");
  Matrix out = a.value().array().colwise() * v.value().col(0).array();
  return make_op(std::move(out), {a, v}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& w = parent(n, 1);
    if (x.requires_grad) x.accumulate((n.grad.array().colwise() * w.value.col(0).array()).matrix());
    if (w.requires_grad) w.accumulate(n.grad.cwiseProduct(x.value).rowwise().sum());
  });
}

Var mul_row(const Var& a, const Var& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) throw std::invalid_argument("mul_row: vector shape");
  Matrix out = a.value().array().rowwise() * v.value().row(0).array();
  return make_op(std::move(out), {a, v}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& w = parent(n, 1);
    if (x.requires_grad) x.accumulate((n.grad.array().rowwise() * w.value.row(0).array()).matrix());
    if (w.requires_grad) w.accumulate(n.grad.cwiseProduct(x.value).colwise().sum());
  });
}

Var relu(const Var& a) {
  return make_op(a.value().cwiseMax(0.0), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate((x.value.array() > 0.0).select(n.grad, 0.0));
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_op(std::move(out), {a}, [](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * n.value.array() * (1.0 - n.value.array())).matrix());
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_op(std::move(out), {a}, [](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * (1.0 - n.value.array().square())).matrix());
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return make_op(std::move(out), {a},
                 [](Node& n) { parent(n, 0).accumulate(n.grad.cwiseProduct(n.value)); });
}

Var sqrt(const Var& a) {
  Matrix out = a.value().array().sqrt().matrix();
  return make_op(std::move(out), {a}, [](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * 0.5 / n.value.array()).matrix());
  });
}

Var abs(const Var& a) {
  return make_op(a.value().cwiseAbs(), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate((n.grad.array() * x.value.array().sign()).matrix());
  });
}

Var square(const Var& a) {
  return make_op(a.value().array().square().matrix(), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate((2.0 * n.grad.array() * x.value.array()).matrix());
  });
}

Var log_clamped(const Var& a, double eps) {
  Matrix out = a.value().cwiseMax(eps).array().log().matrix();
  return make_op(std::move(out), {a}, [eps](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate((x.value.array() > eps).select(n.grad.array() / x.value.array(), 0.0).matrix());
  });
}

Var dropout(const Var& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  Matrix mask(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < mask.cols(); ++j)
    for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = keep(rng) ? s : 0.0;
  Matrix out = a.value().cwiseProduct(mask);
  return make_op(std::move(out), {a}, [mask = std::move(mask)](Node& n) {
    parent(n, 0).accumulate(n.grad.cwiseProduct(mask));
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out;
  out.noalias() = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.grad_buffer().noalias() += n.grad * y.value.transpose();
    if (y.requires_grad) y.grad_buffer().noalias() += x.value.transpose() * n.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: width mismatch");
  Matrix out;
  out.noalias() = a.value() * b.value().transpose();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.grad_buffer().noalias() += n.grad * y.value;
    if (y.requires_grad) y.grad_buffer().noalias() += n.grad.transpose() * x.value;
  });
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a},
                 [](Node& n) { parent(n, 0).accumulate(n.grad.transpose()); });
}

Var sum(const Var& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return make_op(Matrix::Constant(1, 1, a.value().mean()), {a}, [count](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0) / count));
  });
}

Var sum_rows(const Var& a) {
  return make_op(a.value().colwise().sum(), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(n.grad.replicate(x.value.rows(), 1));
  });
}

Var sum_cols(const Var& a) {
  return make_op(a.value().rowwise().sum(), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(n.grad.replicate(1, x.value.cols()));
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  return make_op(a.value().middleRows(start, count), {a}, [start, count](Node& n) {
    parent(n, 0).grad_buffer().middleRows(start, count) += n.grad;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  return make_op(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
    parent(n, 0).grad_buffer().middleCols(start, count) += n.grad;
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw std::invalid_argument("concat_rows: width mismatch");
    total += p.rows();
  }
  Matrix out(total, parts[0].cols());
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return make_op(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& n) {
    Eigen::Index off = 0;
    for (auto& p : n.parents) {
      const auto r = p->value.rows();
      if (p->requires_grad) p->accumulate(n.grad.middleRows(off, r));
      off += r;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw std::invalid_argument("concat_cols: height mismatch");
    total += p.cols();
  }
  Matrix out(parts[0].rows(), total);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return make_op(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& n) {
    Eigen::Index off = 0;
    for (auto& p : n.parents) {
      const auto c = p->value.cols();
      if (p->requires_grad) p->accumulate(n.grad.middleCols(off, c));
      off += c;
    }
  });
}

Var gather_rows(const Var& a, std::span<const int> indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a.rows()) throw std::out_of_range("gather_rows: index");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return make_op(std::move(out), {a}, [idx = std::move(idx)](Node& n) {
    Matrix& g = parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

Var detach(const Var& a) { return constant(a.value()); }

Var softmax_rows(const Var& a, bool causal) {
  const Matrix& x = a.value();
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index width = causal ? std::min<Eigen::Index>(i + 1, x.cols()) : x.cols();
    if (width == 0) continue;
    const double m = x.row(i).head(width).maxCoeff();
    auto e = (x.row(i).head(width).array() - m).exp();
    out.row(i).head(width) = e / e.sum();
  }
  return make_op(std::move(out), {a}, [](Node& n) {
    // Masked entries have zero probability, so they receive zero gradient.
    Eigen::VectorXd dot = n.grad.cwiseProduct(n.value).rowwise().sum();
    Matrix g = n.value.array() * (n.grad.colwise() - dot).array();
    parent(n, 0).accumulate(g);
  });
}

Var topk_mean_cols(const Var& a, int k) {
  const Matrix& x = a.value();
  if (k < 1 || k > x.rows()) throw std::out_of_range("topk_mean_cols: k out of range");
  Matrix out(1, x.cols());
  std::vector<std::vector<int>> chosen(static_cast<std::size_t>(x.cols()));
  std::vector<int> order(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int i, int j) {
      if (x(i, c) != x(j, c)) return x(i, c) > x(j, c);
      return i < j;
    });
    auto& sel = chosen[static_cast<std::size_t>(c)];
    sel.assign(order.begin(), order.begin() + k);
    double s = 0.0;
    for (int i : sel) s += x(i, c);
    out(0, c) = s / k;
  }
  return make_op(std::move(out), {a}, [chosen = std::move(chosen), k](Node& n) {
    Matrix& g = parent(n, 0).grad_buffer();
    for (std::size_t c = 0; c < chosen.size(); ++c)
      for (int i : chosen[c]) g(i, static_cast<Eigen::Index>(c)) += n.grad(0, static_cast<Eigen::Index>(c)) / k;
  });
}

Var conv1d(const Var& x, const Var& weight, const Var& bias, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("conv1d: kernel must be odd");
  const Eigen::Index T = x.rows();
  const Eigen::Index din = x.cols();
  if (weight.rows() != kernel * din) throw std::invalid_argument("conv1d: weight rows != kernel*Din");
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw std::invalid_argument("conv1d: bias shape");
  const int pad = kernel / 2;

  Matrix cols = Matrix::Zero(T, kernel * din);
  for (int k = 0; k < kernel; ++k) {
    const Eigen::Index shift = k - pad;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(T, T - shift);
    if (hi > lo) cols.block(lo, k * din, hi - lo, din) = x.value().middleRows(lo + shift, hi - lo);
  }
  Matrix out;
  out.noalias() = cols * weight.value();
  out.rowwise() += bias.value().row(0);

  return make_op(std::move(out), {x, weight, bias},
                 [cols = std::move(cols), kernel, pad, din, T](Node& n) {
                   Node& in = parent(n, 0);
                   Node& w = parent(n, 1);
                   Node& b = parent(n, 2);
                   if (w.requires_grad) w.grad_buffer().noalias() += cols.transpose() * n.grad;
                   if (b.requires_grad) b.accumulate(n.grad.colwise().sum());
                   if (in.requires_grad) {
                     Matrix gcols;
                     gcols.noalias() = n.grad * w.value.transpose();
                     Matrix& g = in.grad_buffer();
                     for (int k = 0; k < kernel; ++k) {
                       const Eigen::Index shift = k - pad;
                       const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
                       const Eigen::Index hi = std::min<Eigen::Index>(T, T - shift);
                       if (hi > lo) g.middleRows(lo + shift, hi - lo) += gcols.block(lo, k * din, hi - lo, din);
                     }
                   }
                 });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& v = x.value();
  const Eigen::Index D = v.cols();
  if (gamma.cols() != D || beta.cols() != D) throw std::invalid_argument("layer_norm: affine shape");
  Eigen::VectorXd mu = v.rowwise().mean();
  Matrix centered = v.colwise() - mu;
  Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(D)) + eps).sqrt().inverse();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make_op(std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), D](Node& n) {
                   Node& in = parent(n, 0);
                   Node& g = parent(n, 1);
                   Node& b = parent(n, 2);
                   if (g.requires_grad) g.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
                   if (b.requires_grad) b.accumulate(n.grad.colwise().sum());
                   if (in.requires_grad) {
                     Matrix gx = n.grad.array().rowwise() * g.value.row(0).array();
                     Eigen::VectorXd s1 = gx.rowwise().sum();
                     Eigen::VectorXd s2 = gx.cwiseProduct(xhat).rowwise().sum();
                     Matrix r = (static_cast<double>(D) * gx).colwise() - s1;
                     r -= (xhat.array().colwise() * s2.array()).matrix();
                     r = r.array().colwise() * (inv_std.array() / static_cast<double>(D));
                     in.accumulate(r);
                   }
                 });
}

}  // namespace wtal::ag
