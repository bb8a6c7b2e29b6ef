#include "wtal/vlc.hpp"

#include "wtal/error.hpp"

#include <cmath>

namespace wtal::vlc {

ModulatedAttention ModulatedAttention::create(nn::ParameterStore& store, const std::string& prefix, int width,
                                              nn::Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  ModulatedAttention a;
  a.wq = store.add(prefix + ".wq", nn::uniform_init(width, width, bound, rng));
  a.wk = store.add(prefix + ".wk", nn::uniform_init(width, width, bound, rng));
  a.wv = store.add(prefix + ".wv", nn::uniform_init(width, width, bound, rng));
  return a;
}

Var ModulatedAttention::weights(const Var& queries, const Var& keys, const Var* att, bool causal) const {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  Var logits = ag::scale(ag::matmul_nt(ag::matmul(queries, wq), ag::matmul(keys, wk)), inv_sqrt);
  if (att) logits = ag::mul_row(logits, ag::transpose(*att));
  return ag::softmax_rows(logits, causal);
}

Var ModulatedAttention::operator()(const Var& queries, const Var& keys, const Var* att, bool causal) const {
  return ag::matmul(weights(queries, keys, att, causal), ag::matmul(keys, wv));
}

VlcModel::VlcModel(const VlcConfig& config, const Matrix& vocab_vectors, nn::ParameterStore& store, nn::Rng& rng)
    : config_(config), vocab_vectors_(vocab_vectors) {
  const int H = config.hidden;
  if (vocab_vectors.rows() < 1) throw ValidationError("VLC needs a non-empty vocabulary");
  video_proj_ = nn::Linear::create(store, "vlc.video_proj", config.input_dim, H, rng);
  attention_ = tsm::AttentionNet::create(store, "vlc.attention", config.input_dim, config.attention_hidden,
                                         config.dropout, rng);
  word_proj_ = nn::Linear::create(store, "vlc.word_proj", static_cast<int>(vocab_vectors.cols()), H, rng);
  if (config.reconstructor == Reconstructor::kTransformer) {
    for (int l = 0; l < config.encoder_depth; ++l)
      encoder_.push_back(ModulatedAttention::create(store, "vlc.encoder" + std::to_string(l), H, rng));
    for (int l = 0; l < config.decoder_depth; ++l) {
      const auto p = "vlc.decoder" + std::to_string(l);
      DecoderLayer d;
      d.self_attn = ModulatedAttention::create(store, p + ".self", H, rng);
      d.self_out = nn::Linear::create(store, p + ".self_out", H, H, rng);
      d.ln1 = nn::LayerNorm::create(store, p + ".ln1", H);
      d.cross = ModulatedAttention::create(store, p + ".cross", H, rng);
      d.ln2 = nn::LayerNorm::create(store, p + ".ln2", H);
      d.ff = nn::FeedForward::create(store, p + ".ff", H, config.ff_dim, rng);
      d.ln3 = nn::LayerNorm::create(store, p + ".ln3", H);
      decoder_.push_back(std::move(d));
    }
  } else {
    const int gates = config.reconstructor == Reconstructor::kGru ? 3 : 4;
    const double bound = 1.0 / std::sqrt(static_cast<double>(H));
    cell_.w_input = store.add("vlc.rnn.w_input", nn::uniform_init(2 * H, gates * H, bound, rng));
    cell_.w_hidden = store.add("vlc.rnn.w_hidden", nn::uniform_init(H, gates * H, bound, rng));
    cell_.bias = store.add("vlc.rnn.bias", nn::uniform_init(1, gates * H, bound, rng));
  }
  head_ = nn::Linear::create(store, "vlc.head", H, vocab_size(), rng);
}

Var VlcModel::video_embed(const Var& x) const {
  return ag::add(video_proj_(x), ag::constant(nn::sinusoidal_positions(x.rows(), config_.hidden)));
}

Var VlcModel::encode_video(const Var& video, const Var& att) const {
  Var f = video;
  for (const auto& layer : encoder_) f = layer(f, f, &att);
  return f;
}

Var VlcModel::embed_sentence(std::span<const int> tokens) const {
  Matrix words(static_cast<Eigen::Index>(tokens.size()), vocab_vectors_.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab_size()) throw ValidationError("embed_sentence: token out of range");
    words.row(static_cast<Eigen::Index>(i)) = vocab_vectors_.row(tokens[i]);
  }
  return ag::add(word_proj_(ag::constant(std::move(words))),
                 ag::constant(nn::sinusoidal_positions(static_cast<Eigen::Index>(tokens.size()), config_.hidden)));
}

Var VlcModel::decode(const Var& sentence, const Var& encoded, const Var& att) const {
  Var x = sentence;
  for (const auto& d : decoder_) {
    Var a = d.ln1(ag::add(x, d.self_out(d.self_attn(x, x, nullptr, /*causal=*/true))));
    Var c = d.ln2(ag::add(a, d.cross(a, encoded, &att)));
    x = d.ln3(ag::add(c, d.ff(c)));
  }
  return x;
}

Var VlcModel::recurrent_states(const Var& sentence, const Var& video, const Var& att) const {
  const int H = config_.hidden;
  // Context: att-weighted mean of the video rows.
  Var total = ag::matmul(ag::constant(Matrix::Ones(att.rows(), 1)), ag::sum(att));
  Var context = ag::matmul(ag::transpose(ag::div(att, total)), video);

  Var h = ag::constant(Matrix::Zero(1, H));
  Var cell = ag::constant(Matrix::Zero(1, H));
  std::vector<Var> states;
  for (Eigen::Index i = 0; i < sentence.rows(); ++i) {
    const Var in_parts[] = {ag::slice_rows(sentence, i, 1), context};
    Var input = ag::concat_cols(in_parts);
    Var xi = ag::add_row(ag::matmul(input, cell_.w_input), cell_.bias);
    Var hh = ag::matmul(h, cell_.w_hidden);
    if (config_.reconstructor == Reconstructor::kGru) {
      Var r = ag::sigmoid(ag::add(ag::slice_cols(xi, 0, H), ag::slice_cols(hh, 0, H)));
      Var z = ag::sigmoid(ag::add(ag::slice_cols(xi, H, H), ag::slice_cols(hh, H, H)));
      Var n = ag::tanh(ag::add(ag::slice_cols(xi, 2 * H, H), ag::mul(r, ag::slice_cols(hh, 2 * H, H))));
      // h' = (1 - z) n + z h
      h = ag::add(n, ag::mul(z, ag::sub(h, n)));
    } else {
      Var gates = ag::add(xi, hh);
      Var ig = ag::sigmoid(ag::slice_cols(gates, 0, H));
      Var fg = ag::sigmoid(ag::slice_cols(gates, H, H));
      Var gg = ag::tanh(ag::slice_cols(gates, 2 * H, H));
      Var og = ag::sigmoid(ag::slice_cols(gates, 3 * H, H));
      cell = ag::add(ag::mul(fg, cell), ag::mul(ig, gg));
      h = ag::mul(og, ag::tanh(cell));
    }
    states.push_back(h);
  }
  return ag::concat_rows(states);
}

Var VlcModel::word_distribution(const Var& states) const { return ag::softmax_rows(head_(states)); }

ReconstructionOutput VlcModel::reconstruct(const Var& video, const Var& att,
                                           const text::MaskedSentence& sentence) const {
  if (att.rows() != video.rows() || att.cols() != 1) throw ValidationError("reconstruct: attention length mismatch");
  ReconstructionOutput out;
  Var words = embed_sentence(sentence.tokens);
  if (config_.reconstructor == Reconstructor::kTransformer) {
    out.encoded = encode_video(video, att);
    out.states = decode(words, out.encoded, att);
  } else {
    out.encoded = video;
    out.states = recurrent_states(words, video, att);
  }
  out.probs = word_distribution(out.states);
  return out;
}

Var completion_loss(const Var& probs, const text::MaskedSentence& sentence, bool masked_only) {
  const auto M = static_cast<Eigen::Index>(sentence.original_tokens.size());
  if (probs.rows() != M) throw ValidationError("completion_loss: P has wrong number of rows");
  Matrix select = Matrix::Zero(M, probs.cols());
  if (masked_only) {
    for (int pos : sentence.mask_positions) select(pos, sentence.original_tokens[static_cast<std::size_t>(pos)]) = 1.0;
  } else {
    for (Eigen::Index i = 0; i < M; ++i) select(i, sentence.original_tokens[static_cast<std::size_t>(i)]) = 1.0;
  }
  return ag::scale(ag::sum(ag::mul(ag::constant(std::move(select)), ag::log_clamped(probs, tsm::kLogClamp))), -1.0);
}

Var contrastive_loss(const Var& rec, const Var& rec_full, const Var& rec_negative, double gamma1, double gamma2) {
  Var a = ag::relu(ag::add_scalar(ag::sub(rec, rec_full), gamma1));
  Var b = ag::relu(ag::add_scalar(ag::sub(rec, rec_negative), gamma2));
  return ag::add(a, b);
}

double contrastive_loss(double rec, double rec_full, double rec_negative, double gamma1, double gamma2) {
  return std::max(rec - rec_full + gamma1, 0.0) + std::max(rec - rec_negative + gamma2, 0.0);
}

VlcLosses vlc_losses(const VlcModel& model, const Var& video, const Var& att, const text::MaskedSentence& sentence,
                     double gamma1, double gamma2, bool with_contrastive) {
  const bool masked_only = model.config().masked_only_loss;
  VlcLosses out;
  out.rec = completion_loss(model.reconstruct(video, att, sentence).probs, sentence, masked_only);
  if (!with_contrastive) return out;
  Var ones = ag::constant(Matrix::Ones(att.rows(), 1));
  Var negative = ag::add_scalar(ag::scale(att, -1.0), 1.0);
  out.rec_full = completion_loss(model.reconstruct(video, ones, sentence).probs, sentence, masked_only);
  out.rec_negative = completion_loss(model.reconstruct(video, negative, sentence).probs, sentence, masked_only);
  out.contrastive = contrastive_loss(out.rec, out.rec_full, out.rec_negative, gamma1, gamma2);
  return out;
}

}  // namespace wtal::vlc
