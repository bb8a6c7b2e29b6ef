#pragma once

// Shared helpers for the unit and acceptance suites: independent scalar
// oracles, a central-difference gradient checker and a miniature model setup.

#include "wtal/autograd.hpp"
#include "wtal/evaluation.hpp"
#include "wtal/joint_training.hpp"
#include "wtal/localization.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace wtal::testing {

// Mean of the best size-k subset, by enumerating every subset.
inline double topk_by_subsets(const std::vector<double>& v, int k) {
  const int n = static_cast<int>(v.size());
  double best = -INFINITY;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (__builtin_popcount(mask) != k) continue;
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i)) s += v[static_cast<std::size_t>(i)];
    best = std::max(best, s / k);
  }
  return best;
}

// Greedy Gaussian decay, one scalar step at a time.
inline std::vector<loc::Proposal> soft_nms_by_hand(std::vector<loc::Proposal> pool, double sigma, double floor) {
  std::vector<loc::Proposal> kept;
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i)
      if (pool[i].confidence > pool[best].confidence) best = i;
    const auto top = pool[best];
    pool.erase(pool.begin() + static_cast<long>(best));
    kept.push_back(top);
    for (auto& p : pool) {
      const double inter = std::max(0.0, std::min(top.end, p.end) - std::max(top.start, p.start));
      const double uni = (top.end - top.start) + (p.end - p.start) - inter;
      const double iou = uni > 0 ? inter / uni : 0.0;
      p.confidence *= std::exp(-iou * iou / sigma);
    }
  }
  std::vector<loc::Proposal> out;
  for (const auto& p : kept)
    if (p.confidence >= floor) out.push_back(p);
  return out;
}

// Interpolated AP by explicit PR tabulation: precision at each recall level is
// the best precision reached at any equal or higher recall.
inline std::optional<double> brute_force_ap(std::vector<eval::Detection> dets,
                                            const std::vector<eval::GroundTruthInstance>& gts, double thr) {
  if (gts.empty()) return std::nullopt;
  std::sort(dets.begin(), dets.end(), [](const eval::Detection& a, const eval::Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.video_id < b.video_id;
  });
  std::set<std::size_t> used;
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  int hits = 0;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best_iou = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].video_id != dets[d].video_id || used.count(g)) continue;
      const double inter = std::max(0.0, std::min(dets[d].end, gts[g].end) - std::max(dets[d].start, gts[g].start));
      const double iou = inter / ((dets[d].end - dets[d].start) + (gts[g].end - gts[g].start) - inter);
      if (iou > best_iou) {
        best_iou = iou;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best_iou >= thr) {
      used.insert(best_g);
      ++hits;
    }
    pr.emplace_back(static_cast<double>(hits) / static_cast<double>(gts.size()),
                    static_cast<double>(hits) / static_cast<double>(d + 1));
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    if (pr[i].first <= prev_recall) continue;
    double best = 0.0;
    for (std::size_t j = i; j < pr.size(); ++j) best = std::max(best, pr[j].second);
    ap += (pr[i].first - prev_recall) * best;
    prev_recall = pr[i].first;
  }
  return ap;
}

inline double brute_force_map(const std::vector<eval::Detection>& dets,
                              const std::vector<eval::GroundTruthInstance>& gts, int classes, double thr) {
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<eval::Detection> d;
    std::vector<eval::GroundTruthInstance> g;
    for (const auto& x : dets)
      if (x.class_id == c) d.push_back(x);
    for (const auto& x : gts)
      if (x.class_id == c) g.push_back(x);
    if (const auto ap = brute_force_ap(d, g, thr)) {
      sum += *ap;
      ++counted;
    }
  }
  return counted ? sum / counted : 0.0;
}

// softmax_rows((Q Wq (K Wk)^T / sqrt(d)) * att^T) K Wv, entry by entry.
inline Eigen::MatrixXd attention_by_loops(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& wq,
                                          const Eigen::MatrixXd& wk, const Eigen::MatrixXd& wv,
                                          const Eigen::VectorXd* att, bool causal) {
  const auto M = q.rows(), T = k.rows(), D = wq.rows(), H = wq.cols();
  auto project = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& w, Eigen::Index r, Eigen::Index c) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < D; ++i) s += x(r, i) * w(i, c);
    return s;
  };
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(M, H);
  for (Eigen::Index i = 0; i < M; ++i) {
    std::vector<double> logit(static_cast<std::size_t>(T));
    double mx = -INFINITY;
    const Eigen::Index last = causal ? std::min(i, T - 1) : T - 1;
    for (Eigen::Index j = 0; j <= last; ++j) {
      double s = 0.0;
      for (Eigen::Index h = 0; h < H; ++h) s += project(q, wq, i, h) * project(k, wk, j, h);
      s /= std::sqrt(static_cast<double>(H));
      if (att) s *= (*att)(j);
      logit[static_cast<std::size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j <= last; ++j) z += std::exp(logit[static_cast<std::size_t>(j)] - mx);
    for (Eigen::Index j = 0; j <= last; ++j) {
      const double w = std::exp(logit[static_cast<std::size_t>(j)] - mx) / z;
      for (Eigen::Index h = 0; h < H; ++h) out(i, h) += w * project(k, wv, j, h);
    }
  }
  return out;
}

struct GradCheckResult {
  double worst_relative = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor) between the backprop gradient
// of `analytic` and a central difference of `numeric`, over up to
// max_per_tensor entries of every tensor.
inline GradCheckResult grad_check(nn::ParameterStore& store, const std::function<ag::Var()>& analytic,
                                  const std::function<ag::Var()>& numeric, double h = 1e-5,
                                  std::size_t max_per_tensor = 24, double floor = 1e-5, std::uint64_t seed = 7) {
  const auto& loss = numeric;
  store.zero_grad();
  ag::backward(analytic());
  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (auto& [name, var] : store.entries()) {
    ag::Var p = var;
    const auto n = static_cast<std::size_t>(p.value().size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_tensor);
    }
    const ag::Matrix analytic = p.grad().size() ? p.grad() : ag::Matrix::Zero(p.rows(), p.cols());
    for (auto i : idx) {
      double* x = p.mutable_value().data() + i;
      const double saved = *x;
      *x = saved + h;
      const double up = loss().item();
      *x = saved - h;
      const double down = loss().item();
      *x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.checked;
      if (rel > result.worst_relative) {
        result.worst_relative = rel;
        result.worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  store.zero_grad();
  return result;
}

inline GradCheckResult grad_check(nn::ParameterStore& store, const std::function<ag::Var()>& loss, double h = 1e-5,
                                  std::size_t max_per_tensor = 24, double floor = 1e-5, std::uint64_t seed = 7) {
  return grad_check(store, loss, loss, h, max_per_tensor, floor, seed);
}

// Total objective with the detached side of each consistency direction frozen
// at its current value. Its ordinary derivative is what backprop through the
// stop-gradient objective computes.
inline std::function<ag::Var()> frozen_consistency_total(const train::Framework& fw,
                                                         std::vector<train::TrainingVideo> batch) {
  const auto base = fw.compute_losses(batch, nullptr);
  std::vector<ag::Matrix> m0, r0;
  for (std::size_t i = 0; i < base.att_m.size(); ++i) {
    m0.push_back(base.att_m[i].value());
    r0.push_back(base.att_r[i].value());
  }
  return [&fw, batch = std::move(batch), m0, r0] {
    auto l = fw.compute_losses(batch, nullptr);
    if (!l.att_m.empty()) {
      const auto type = fw.config().consistency_type();
      ag::Var acc = ag::scalar(0.0);
      for (std::size_t i = 0; i < l.att_m.size(); ++i) {
        acc = ag::add(acc, train::consistency_loss(l.att_m[i], ag::constant(r0[i]), type));
        acc = ag::add(acc, train::consistency_loss(ag::constant(m0[i]), l.att_r[i], type));
      }
      l.consistency = ag::scale(acc, 0.5 / static_cast<double>(l.att_m.size()));
    }
    return train::total_loss(l, fw.config());
  };
}

// T=8, C=3, every width 16, N_v=8 (4 specials + "a" + three class words).
inline train::TrainConfig miniature_config() {
  train::TrainConfig c = train::TrainConfig::profile_defaults("synthetic");
  c.input_dim = 16;
  c.embed_dim = 16;
  c.attention_hidden = 16;
  c.text_heads = 2;
  c.text_ff = 16;
  c.prompt_length = 2;
  c.vlc_hidden = 16;
  c.vlc_attention_hidden = 16;
  c.vlc_ff = 16;
  c.word_vectors = "hash:16";
  c.vlc_template = "a [CLS]";
  c.t_target = 8;
  c.batch_size = 3;
  c.seed = 3;
  return c;
}

inline const std::vector<std::string>& miniature_classes() {
  static const std::vector<std::string> names{"run", "jump", "swim"};
  return names;
}

// Three T=8 videos; the first two share class 0 so the co-activity term is live.
inline std::vector<train::TrainingVideo> miniature_batch(int dim = 16, std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  auto features = [&] {
    ag::Matrix m(8, dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
    return m;
  };
  return {{"v0", features(), {1, 0, 0}}, {"v1", features(), {1, 1, 0}}, {"v2", features(), {0, 0, 1}}};
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("wtal_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace wtal::testing
