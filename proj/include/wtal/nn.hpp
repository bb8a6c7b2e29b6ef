#pragma once

// Parameter bookkeeping, the handful of layers the two branches share, and
// the Adam optimiser.

#include "wtal/autograd.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace wtal::nn {

using ag::Matrix;
using ag::Var;
using Rng = std::mt19937_64;

// Named, ordered collection of trainable tensors.
class ParameterStore {
 public:
  Var add(const std::string& name, Matrix init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);
Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out, may be undefined

  static Linear create(ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                       bool with_bias = true);
  Var operator()(const Var& x) const;
};

struct Conv1d {
  Var weight;  // (kernel*in) x out
  Var bias;    // 1 x out
  int kernel = 3;

  static Conv1d create(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                       Rng& rng);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm create(ParameterStore& store, const std::string& name, int dim);
  Var operator()(const Var& x) const;
};

// Two-layer position-wise feed-forward network with ReLU.
struct FeedForward {
  Linear in;
  Linear out;

  static FeedForward create(ParameterStore& store, const std::string& name, int dim, int hidden,
                            Rng& rng);
  Var operator()(const Var& x) const;
};

// Sinusoidal positional encoding table, length x dim.
Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index dim);

// Adam with L2 weight decay folded into the gradient (the classic coupled
// form, as in torch.optim.Adam).
class Adam {
 public:
  struct Options {
    double learning_rate = 5e-4;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(const ParameterStore& store, Options options);

  void step();
  std::int64_t steps() const { return step_; }

  // Optimiser moments, keyed by parameter order.
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_steps(std::int64_t s) { step_ = s; }

 private:
  const ParameterStore* store_;
  Options options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t step_ = 0;
};

}  // namespace wtal::nn
