#pragma once

// Text-segment mining: the discriminative branch. Class text queries are
// matched against embedded segments; a foreground attention suppresses
// background responses, and top-k MIL pooling turns segment similarities into
// video-level scores.

#include "wtal/nn.hpp"
#include "wtal/text_pipeline.hpp"

#include <span>
#include <vector>

namespace wtal::tsm {

using ag::Matrix;
using ag::Var;

enum class HeadType {
  kTextMatching,   // S = X_e X_q^T
  kConvClassifier  // baseline: temporal convolution producing a T-CAM
};

struct TsmConfig {
  int input_dim = 2048;
  int embed_dim = 2048;
  int attention_hidden = 512;
  int text_heads = 8;
  int text_ff = 2048;
  int prompt_length = 10;
  double dropout = 0.5;
  int topk_divisor = 8;
  HeadType head = HeadType::kTextMatching;
};

// Foreground attention sigma(A(X)): conv(k=3) -> ReLU -> dropout -> conv(k=3) -> sigmoid.
struct AttentionNet {
  nn::Conv1d hidden;
  nn::Conv1d out;
  double dropout = 0.0;

  static AttentionNet create(nn::ParameterStore& store, const std::string& prefix, int input_dim, int hidden_dim,
                             double dropout, nn::Rng& rng);
  // T x 1, strictly inside (0, 1).
  Var operator()(const Var& x, nn::Rng* train_rng) const;
};

// One post-norm transformer encoder block over a token sequence.
struct TextEncoder {
  int heads = 8;
  Var wq, wk, wv;
  nn::Linear wo;
  nn::LayerNorm ln1;
  nn::FeedForward ff;
  nn::LayerNorm ln2;

  static TextEncoder create(nn::ParameterStore& store, const std::string& prefix, int width, int heads,
                            int ff_dim, nn::Rng& rng);
  // Multi-head self-attention sublayer output (before residual), L x W.
  Var attend(const Var& tokens) const;
  // Full block, L x W.
  Var operator()(const Var& tokens) const;
};

// Trainable cross-modal channel gates (opt-in fusion mode).
struct FusionGate {
  nn::Linear rgb_from_flow;
  nn::Linear flow_from_rgb;
  int modality_dim = 1024;

  static FusionGate create(nn::ParameterStore& store, const std::string& prefix, int modality_dim);
  // x: T x 2D plain concatenation -> gated concatenation.
  Var operator()(const Var& x) const;
};

struct TsmOutput {
  Var embedded;           // X_e, T x W
  Var attention;          // att_m, T x 1
  Var queries;            // X_q, (C+1) x W (text head only)
  Var similarity;         // S, T x (C+1)
  Var suppressed;         // S_bar, T x (C+1)
  Var pooled;             // v, 1 x (C+1)
  Var pooled_suppressed;  // v_bar
  Var probs;              // p
  Var probs_suppressed;   // p_bar
  int k = 1;
};

class TsmModel {
 public:
  // label_vectors: C x word_dim class label embeddings. handcraft_words
  // replaces the learnable prompt context with fixed template words.
  TsmModel(const TsmConfig& config, const Matrix& label_vectors, nn::ParameterStore& store, nn::Rng& rng,
           const Matrix* handcraft_words = nullptr);

  const TsmConfig& config() const { return config_; }
  int num_classes() const { return num_classes_; }

  // emb(X): two conv(k=3) + ReLU + dropout layers, width preserved.
  Var video_embed(const Var& x, nn::Rng* train_rng) const;
  Var attention(const Var& x, nn::Rng* train_rng) const { return attention_(x, train_rng); }
  // Token sequence [L_s; L_p; L_e] for class_id in [0, C].
  Var query_tokens(int class_id) const;
  // X_q: encoder output at the [START] position of each class sequence.
  Var text_encode() const;

  // Full forward. train_rng enables dropout.
  TsmOutput forward(const Var& x, nn::Rng* train_rng) const;

  const AttentionNet& attention_net() const { return attention_; }
  const text::PromptParameters& prompts() const { return prompts_; }
  const TextEncoder& text_encoder() const { return encoder_; }

 private:
  TsmConfig config_;
  int num_classes_ = 0;
  nn::Conv1d embed1_;
  nn::Conv1d embed2_;
  AttentionNet attention_;
  text::PromptParameters prompts_;
  TextEncoder encoder_;
  nn::Conv1d classifier_;  // baseline head only
};

// S[t][c] = <X_e[t], X_q[c]>.
Var match(const Var& embedded, const Var& queries);
// S_bar = att_m (row-broadcast) * S.
Var suppress(const Var& similarity, const Var& attention);

// k = max(1, ceil(T / divisor)).
int topk_count(int length, int divisor);
// Mean of the k largest entries.
double topk_pool(std::span<const double> column, int k);
// Softmax with max subtraction.
Eigen::VectorXd softmax(const Eigen::VectorXd& v);
// (p, p_bar) from the pooled similarities.
std::pair<Var, Var> video_scores(const Var& pooled, const Var& pooled_suppressed);

// Targets for the two cross-entropy terms: y has the background bit set, y_hat
// does not; both l1-normalised. Throws ValidationError if no class is positive.
struct MilTargets {
  Matrix y;      // 1 x (C+1)
  Matrix y_hat;  // 1 x (C+1)
};
MilTargets make_mil_targets(std::span<const int> label);

inline constexpr double kLogClamp = 1e-8;

// -sum y log p - sum y_hat log p_bar, logs clamped at 1e-8.
Var mil_loss(const Var& probs, const Var& probs_suppressed, const MilTargets& targets);

// mean_t att_m[t].
Var norm_loss(const Var& attention);
// mean_t |att_m[t] - (1 - softmax_row(S)[t][C])|.
Var guide_loss(const Var& attention, const Var& similarity);

struct CoactivityInput {
  Var embedded;
  Var attention;
  Var similarity;
  Var suppressed;
  std::vector<int> label;  // length C
};
inline constexpr double kCoactivityMargin = 0.5;
// Mean over (video pair, shared class) triples of the margin ranking between
// foreground/foreground and foreground/background cosine similarities.
// Zero when no pair shares a class.
Var coactivity_loss(std::span<const CoactivityInput> batch);

}  // namespace wtal::tsm
