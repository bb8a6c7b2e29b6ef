#include "wtal/tsm.hpp"

#include "wtal/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace wtal::tsm {

AttentionNet AttentionNet::create(nn::ParameterStore& store, const std::string& prefix, int input_dim,
                                  int hidden_dim, double dropout, nn::Rng& rng) {
  AttentionNet a;
  a.hidden = nn::Conv1d::create(store, prefix + ".conv1", input_dim, hidden_dim, 3, rng);
  a.out = nn::Conv1d::create(store, prefix + ".conv2", hidden_dim, 1, 3, rng);
  a.dropout = dropout;
  return a;
}

Var AttentionNet::operator()(const Var& x, nn::Rng* train_rng) const {
  Var h = ag::relu(hidden(x));
  if (train_rng) h = ag::dropout(h, dropout, *train_rng);
  return ag::sigmoid(out(h));
}

TextEncoder TextEncoder::create(nn::ParameterStore& store, const std::string& prefix, int width, int heads,
                                int ff_dim, nn::Rng& rng) {
  if (heads < 1 || width % heads != 0) throw ValidationError("text encoder: width must be divisible by heads");
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  TextEncoder e;
  e.heads = heads;
  e.wq = store.add(prefix + ".wq", nn::uniform_init(width, width, bound, rng));
  e.wk = store.add(prefix + ".wk", nn::uniform_init(width, width, bound, rng));
  e.wv = store.add(prefix + ".wv", nn::uniform_init(width, width, bound, rng));
  e.wo = nn::Linear::create(store, prefix + ".wo", width, width, rng);
  e.ln1 = nn::LayerNorm::create(store, prefix + ".ln1", width);
  e.ff = nn::FeedForward::create(store, prefix + ".ff", width, ff_dim, rng);
  e.ln2 = nn::LayerNorm::create(store, prefix + ".ln2", width);
  return e;
}

Var TextEncoder::attend(const Var& tokens) const {
  const auto width = tokens.cols();
  const auto head_dim = width / heads;
  Var q = ag::matmul(tokens, wq);
  Var k = ag::matmul(tokens, wk);
  Var v = ag::matmul(tokens, wv);
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int h = 0; h < heads; ++h) {
    Var qh = ag::slice_cols(q, h * head_dim, head_dim);
    Var kh = ag::slice_cols(k, h * head_dim, head_dim);
    Var vh = ag::slice_cols(v, h * head_dim, head_dim);
    Var weights = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(ag::matmul(weights, vh));
  }
  return wo(ag::concat_cols(outs));
}

Var TextEncoder::operator()(const Var& tokens) const {
  Var h = ln1(ag::add(tokens, attend(tokens)));
  return ln2(ag::add(h, ff(h)));
}

FusionGate FusionGate::create(nn::ParameterStore& store, const std::string& prefix, int modality_dim) {
  FusionGate g;
  g.modality_dim = modality_dim;
  // Zero-initialised so the initial gates are exactly 0.5.
  g.rgb_from_flow.weight = store.add(prefix + ".rgb_from_flow.weight", Matrix::Zero(modality_dim, modality_dim));
  g.rgb_from_flow.bias = store.add(prefix + ".rgb_from_flow.bias", Matrix::Zero(1, modality_dim));
  g.flow_from_rgb.weight = store.add(prefix + ".flow_from_rgb.weight", Matrix::Zero(modality_dim, modality_dim));
  g.flow_from_rgb.bias = store.add(prefix + ".flow_from_rgb.bias", Matrix::Zero(1, modality_dim));
  return g;
}

Var FusionGate::operator()(const Var& x) const {
  const double inv_t = 1.0 / static_cast<double>(x.rows());
  Var rgb = ag::slice_cols(x, 0, modality_dim);
  Var flow = ag::slice_cols(x, modality_dim, modality_dim);
  Var rgb_gate = ag::sigmoid(rgb_from_flow(ag::scale(ag::sum_rows(flow), inv_t)));
  Var flow_gate = ag::sigmoid(flow_from_rgb(ag::scale(ag::sum_rows(rgb), inv_t)));
  const Var parts[] = {ag::mul_row(rgb, rgb_gate), ag::mul_row(flow, flow_gate)};
  return ag::concat_cols(parts);
}

TsmModel::TsmModel(const TsmConfig& config, const Matrix& label_vectors, nn::ParameterStore& store, nn::Rng& rng,
                   const Matrix* handcraft_words)
    : config_(config), num_classes_(static_cast<int>(label_vectors.rows())) {
  if (num_classes_ < 1) throw ValidationError("TSM needs at least one class");
  embed1_ = nn::Conv1d::create(store, "tsm.embed.conv1", config.input_dim, config.embed_dim, 3, rng);
  embed2_ = nn::Conv1d::create(store, "tsm.embed.conv2", config.embed_dim, config.embed_dim, 3, rng);
  attention_ = AttentionNet::create(store, "tsm.attention", config.input_dim, config.attention_hidden,
                                    config.dropout, rng);
  if (config.head == HeadType::kTextMatching) {
    prompts_ = text::PromptParameters::create(store, "tsm.prompt", label_vectors, config.prompt_length,
                                              config.embed_dim, rng, handcraft_words);
    encoder_ = TextEncoder::create(store, "tsm.text", config.embed_dim, config.text_heads, config.text_ff, rng);
  } else {
    classifier_ = nn::Conv1d::create(store, "tsm.classifier", config.embed_dim, num_classes_ + 1, 1, rng);
  }
}

Var TsmModel::video_embed(const Var& x, nn::Rng* train_rng) const {
  Var h = ag::relu(embed1_(x));
  if (train_rng) h = ag::dropout(h, config_.dropout, *train_rng);
  h = ag::relu(embed2_(h));
  if (train_rng) h = ag::dropout(h, config_.dropout, *train_rng);
  return h;
}

Var TsmModel::query_tokens(int class_id) const {
  if (config_.head != HeadType::kTextMatching) throw std::logic_error("query_tokens: baseline head has no text");
  return text::build_query_tokens(class_id, prompts_);
}

Var TsmModel::text_encode() const {
  std::vector<Var> rows;
  rows.reserve(static_cast<std::size_t>(num_classes_ + 1));
  for (int c = 0; c <= num_classes_; ++c) rows.push_back(ag::slice_rows(encoder_(query_tokens(c)), 0, 1));
  return ag::concat_rows(rows);
}

TsmOutput TsmModel::forward(const Var& x, nn::Rng* train_rng) const {
  TsmOutput out;
  out.embedded = video_embed(x, train_rng);
  out.attention = attention_(x, train_rng);
  if (config_.head == HeadType::kTextMatching) {
    out.queries = text_encode();
    out.similarity = match(out.embedded, out.queries);
  } else {
    out.similarity = classifier_(out.embedded);
  }
  out.suppressed = suppress(out.similarity, out.attention);
  out.k = topk_count(static_cast<int>(x.rows()), config_.topk_divisor);
  out.pooled = ag::topk_mean_cols(out.similarity, out.k);
  out.pooled_suppressed = ag::topk_mean_cols(out.suppressed, out.k);
  std::tie(out.probs, out.probs_suppressed) = video_scores(out.pooled, out.pooled_suppressed);
  return out;
}

Var match(const Var& embedded, const Var& queries) { return ag::matmul_nt(embedded, queries); }

Var suppress(const Var& similarity, const Var& attention) { return ag::mul_col(similarity, attention); }

int topk_count(int length, int divisor) {
  if (length < 1 || divisor < 1) throw ValidationError("topk_count: invalid arguments");
  return std::max(1, (length + divisor - 1) / divisor);
}

double topk_pool(std::span<const double> column, int k) {
  if (k < 1 || k > static_cast<int>(column.size())) throw ValidationError("topk_pool: k out of range");
  std::vector<double> v(column.begin(), column.end());
  std::partial_sort(v.begin(), v.begin() + k, v.end(), std::greater<>());
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += v[static_cast<std::size_t>(i)];
  return s / k;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  Eigen::VectorXd e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

std::pair<Var, Var> video_scores(const Var& pooled, const Var& pooled_suppressed) {
  return {ag::softmax_rows(pooled), ag::softmax_rows(pooled_suppressed)};
}

MilTargets make_mil_targets(std::span<const int> label) {
  const auto C = static_cast<Eigen::Index>(label.size());
  MilTargets t{Matrix::Zero(1, C + 1), Matrix::Zero(1, C + 1)};
  for (Eigen::Index c = 0; c < C; ++c) {
    t.y(0, c) = label[static_cast<std::size_t>(c)];
    t.y_hat(0, c) = label[static_cast<std::size_t>(c)];
  }
  if (t.y_hat.sum() <= 0.0) throw ValidationError("MIL targets: video has no positive action label");
  t.y(0, C) = 1.0;
  t.y /= t.y.sum();
  t.y_hat /= t.y_hat.sum();
  return t;
}

Var mil_loss(const Var& probs, const Var& probs_suppressed, const MilTargets& targets) {
  Var a = ag::sum(ag::mul(ag::constant(targets.y), ag::log_clamped(probs, kLogClamp)));
  Var b = ag::sum(ag::mul(ag::constant(targets.y_hat), ag::log_clamped(probs_suppressed, kLogClamp)));
  return ag::scale(ag::add(a, b), -1.0);
}

Var norm_loss(const Var& attention) { return ag::mean(attention); }

Var guide_loss(const Var& attention, const Var& similarity) {
  const auto C = similarity.cols() - 1;
  Var background = ag::slice_cols(ag::softmax_rows(similarity), C, 1);
  // |att - (1 - bg)| = |att + bg - 1|
  return ag::mean(ag::abs(ag::add_scalar(ag::add(attention, background), -1.0)));
}

namespace {

Var cosine(const Var& a, const Var& b) {
  constexpr double eps = 1e-12;
  Var dot = ag::sum(ag::mul(a, b));
  Var na = ag::sqrt(ag::add_scalar(ag::sum(ag::square(a)), eps));
  Var nb = ag::sqrt(ag::add_scalar(ag::sum(ag::square(b)), eps));
  return ag::div(dot, ag::mul(na, nb));
}

// sum_t softmax_t(scores)[t] * X_e[t], as 1 x W.
Var temporal_pool(const Var& scores_column, const Var& embedded) {
  return ag::matmul(ag::softmax_rows(ag::transpose(scores_column)), embedded);
}

}  // namespace

Var coactivity_loss(std::span<const CoactivityInput> batch) {
  std::vector<Var> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = i + 1; j < batch.size(); ++j) {
      const auto& a = batch[i];
      const auto& b = batch[j];
      for (std::size_t c = 0; c < a.label.size() && c < b.label.size(); ++c) {
        if (!a.label[c] || !b.label[c]) continue;
        const auto col = static_cast<Eigen::Index>(c);
        auto descriptors = [col](const CoactivityInput& v) {
          Var fg = temporal_pool(ag::slice_cols(v.suppressed, col, 1), v.embedded);
          Var inv = ag::add_scalar(ag::scale(v.attention, -1.0), 1.0);
          Var bg = temporal_pool(ag::mul(inv, ag::slice_cols(v.similarity, col, 1)), v.embedded);
          return std::pair{fg, bg};
        };
        auto [fi, gi] = descriptors(a);
        auto [fj, gj] = descriptors(b);
        Var ff = cosine(fi, fj);
        Var h1 = ag::relu(ag::add_scalar(ag::sub(cosine(fi, gj), ff), kCoactivityMargin));
        Var h2 = ag::relu(ag::add_scalar(ag::sub(cosine(fj, gi), ff), kCoactivityMargin));
        terms.push_back(ag::scale(ag::add(h1, h2), 0.5));
      }
    }
  }
  if (terms.empty()) return ag::scalar(0.0);
  return ag::mean(ag::concat_rows(terms));
}

}  // namespace wtal::tsm
