#pragma once

// Video-text language completion: the generative branch. A templated action
// description with masked words is reconstructed from attention-modulated
// video evidence. The attention att_r scales the pre-softmax logits of every
// key column in both the video encoder and the sentence/video
// cross-attention.

#include "wtal/nn.hpp"
#include "wtal/text_pipeline.hpp"
#include "wtal/tsm.hpp"

namespace wtal::vlc {

using ag::Matrix;
using ag::Var;

enum class Reconstructor { kTransformer, kGru, kLstm };

struct VlcConfig {
  int input_dim = 2048;
  int hidden = 512;  // D_h
  int attention_hidden = 512;
  int ff_dim = 512;
  int encoder_depth = 1;
  int decoder_depth = 1;
  double dropout = 0.5;  // attention-net dropout only
  Reconstructor reconstructor = Reconstructor::kTransformer;
  // Sum the completion loss over masked positions only (ablation).
  bool masked_only_loss = false;
};

// Projection weights of one attention whose logits are scaled per key.
struct ModulatedAttention {
  Var wq, wk, wv;  // D_h x D_h

  static ModulatedAttention create(nn::ParameterStore& store, const std::string& prefix, int width, nn::Rng& rng);
  // softmax_rows((Q K^T / sqrt(D_h)) * att^T) V with Q = queries Wq,
  // K = keys Wk, V = keys Wv. att is T x 1 (one weight per key); a null att
  // gives plain scaled dot-product attention.
  // With causal=true, query row i only sees key rows <= i.
  Var operator()(const Var& queries, const Var& keys, const Var* att, bool causal = false) const;
  // The row-stochastic attention matrix alone.
  Var weights(const Var& queries, const Var& keys, const Var* att, bool causal = false) const;
};

struct DecoderLayer {
  ModulatedAttention self_attn;  // causal, unmodulated
  nn::Linear self_out;
  nn::LayerNorm ln1;
  ModulatedAttention cross;  // modulated sentence -> video attention
  nn::LayerNorm ln2;
  nn::FeedForward ff;
  nn::LayerNorm ln3;
};

struct RecurrentCell {
  Var w_input;   // in x (gates * H)
  Var w_hidden;  // H x (gates * H)
  Var bias;      // 1 x (gates * H)
};

struct ReconstructionOutput {
  Var encoded;  // F, T x D_h
  Var states;   // H, M x D_h
  Var probs;    // P, M x N_v
};

class VlcModel {
 public:
  // vocab_vectors: N_v x word_dim fixed word vectors of the vocabulary.
  VlcModel(const VlcConfig& config, const Matrix& vocab_vectors, nn::ParameterStore& store, nn::Rng& rng);

  const VlcConfig& config() const { return config_; }
  int vocab_size() const { return static_cast<int>(vocab_vectors_.rows()); }

  // Affine projection to D_h plus sinusoidal positions.
  Var video_embed(const Var& x) const;
  Var attention(const Var& x, nn::Rng* train_rng) const { return attention_(x, train_rng); }
  // Modulated self-attention over the video, stacked encoder_depth times.
  Var encode_video(const Var& video, const Var& att) const;
  // Word-vector lookup, projection to D_h, sinusoidal positions.
  Var embed_sentence(std::span<const int> tokens) const;
  // Causal self-attention -> modulated cross-attention -> feed-forward, each
  // residual + layer norm. Row i depends on sentence rows <= i only.
  Var decode(const Var& sentence, const Var& encoded, const Var& att) const;
  // Per-row softmax of the output head.
  Var word_distribution(const Var& states) const;

  // Full reconstruction for one attention vector (att, ones, or 1 - att).
  ReconstructionOutput reconstruct(const Var& video, const Var& att, const text::MaskedSentence& sentence) const;

  const tsm::AttentionNet& attention_net() const { return attention_; }
  const std::vector<ModulatedAttention>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayer>& decoder_layers() const { return decoder_; }

 private:
  Var recurrent_states(const Var& sentence, const Var& video, const Var& att) const;

  VlcConfig config_;
  Matrix vocab_vectors_;
  nn::Linear video_proj_;
  tsm::AttentionNet attention_;
  nn::Linear word_proj_;
  std::vector<ModulatedAttention> encoder_;
  std::vector<DecoderLayer> decoder_;
  RecurrentCell cell_;
  nn::Linear head_;
};

// -sum_i log P[i][original_i] (log clamped at 1e-8). With masked_only, the
// sum runs over mask positions only.
Var completion_loss(const Var& probs, const text::MaskedSentence& sentence, bool masked_only = false);

inline constexpr double kDefaultGamma1 = 0.1;
inline constexpr double kDefaultGamma2 = 0.2;

// max(L_rec - L_rec_e + g1, 0) + max(L_rec - L_rec_n + g2, 0).
Var contrastive_loss(const Var& rec, const Var& rec_full, const Var& rec_negative, double gamma1, double gamma2);
double contrastive_loss(double rec, double rec_full, double rec_negative, double gamma1, double gamma2);

struct VlcLosses {
  Var rec;           // L_rec with att_r
  Var rec_full;      // L_rec^e, att replaced by ones
  Var rec_negative;  // L_rec^n, att replaced by 1 - att_r
  Var contrastive;   // L_c
};

// Runs the three reconstruction paths sharing all parameters.
VlcLosses vlc_losses(const VlcModel& model, const Var& video, const Var& att, const text::MaskedSentence& sentence,
                     double gamma1, double gamma2, bool with_contrastive = true);

}  // namespace wtal::vlc
