#include "wtal/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace wtal::nn {

Var ParameterStore::add(const std::string& name, Matrix init) {
  if (index_.count(name) != 0) throw std::logic_error("duplicate parameter name: " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, ag::leaf(std::move(init)));
  return entries_.back().second;
}

const Var& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, v] : entries_) v.zero_grad();
}

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Linear Linear::create(ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                      bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = store.add(name + ".weight", uniform_init(in, out, bound, rng));
  if (with_bias) l.bias = store.add(name + ".bias", uniform_init(1, out, bound, rng));
  return l;
}

Var Linear::operator()(const Var& x) const {
  Var y = ag::matmul(x, weight);
  return bias.defined() ? ag::add_row(y, bias) : y;
}

Conv1d Conv1d::create(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                      Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  Conv1d c;
  c.kernel = kernel;
  c.weight = store.add(name + ".weight", uniform_init(kernel * in, out, bound, rng));
  c.bias = store.add(name + ".bias", uniform_init(1, out, bound, rng));
  return c;
}

Var Conv1d::operator()(const Var& x) const { return ag::conv1d(x, weight, bias, kernel); }

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, int dim) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Matrix::Ones(1, dim));
  ln.beta = store.add(name + ".beta", Matrix::Zero(1, dim));
  return ln;
}

Var LayerNorm::operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }

FeedForward FeedForward::create(ParameterStore& store, const std::string& name, int dim, int hidden,
                                Rng& rng) {
  return {Linear::create(store, name + ".in", dim, hidden, rng),
          Linear::create(store, name + ".out", hidden, dim, rng)};
}

Var FeedForward::operator()(const Var& x) const { return out(ag::relu(in(x))); }

Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index dim) {
  Matrix pe(length, dim);
  for (Eigen::Index pos = 0; pos < length; ++pos) {
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Adam::Adam(const ParameterStore& store, Options options) : store_(&store), options_(options) {
  for (const auto& [name, v] : store.entries()) {
    m_.push_back(Matrix::Zero(v.rows(), v.cols()));
    v_.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
}

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  const auto& entries = store_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var p = entries[i].second;
    if (p.grad().size() == 0) continue;
    Matrix g = p.grad() + options_.weight_decay * p.value();
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    p.mutable_value().array() -=
        options_.learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + options_.epsilon);
  }
}

}  // namespace wtal::nn
