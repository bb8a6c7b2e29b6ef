#include "wtal/joint_training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace wtal::train {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw ValidationError("config key '" + key + "': invalid value '" + value + "'");
}

void parse_into(const std::string& key, const std::string& v, double& out) {
  std::size_t used = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (used != v.size()) bad_value(key, v);
}

void parse_into(const std::string& key, const std::string& v, int& out) {
  std::size_t used = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (used != v.size()) bad_value(key, v);
}

void parse_into(const std::string& key, const std::string& v, std::uint64_t& out) {
  std::size_t used = 0;
  if (v.empty() || v[0] == '-') bad_value(key, v);
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (used != v.size()) bad_value(key, v);
}

void parse_into(const std::string& key, const std::string& v, bool& out) {
  if (v == "1" || v == "true") {
    out = true;
  } else if (v == "0" || v == "false") {
    out = false;
  } else {
    bad_value(key, v);
  }
}

void parse_into(const std::string&, const std::string& v, std::string& out) { out = v; }

std::string render(double v) { return format_double(v); }
std::string render(int v) { return std::to_string(v); }
std::string render(std::uint64_t v) { return std::to_string(v); }
std::string render(bool v) { return v ? "true" : "false"; }
std::string render(const std::string& v) { return v; }

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field field(T TrainConfig::*member) {
  return {[member](const TrainConfig& c) { return render(c.*member); },
          [member](TrainConfig& c, const std::string& key, const std::string& v) { parse_into(key, v, c.*member); }};
}

const std::vector<std::pair<std::string, Field>>& field_table() {
  static const std::vector<std::pair<std::string, Field>> table{
      {"profile", field(&TrainConfig::profile)},
      {"learning_rate", field(&TrainConfig::learning_rate)},
      {"weight_decay", field(&TrainConfig::weight_decay)},
      {"iterations", field(&TrainConfig::iterations)},
      {"batch_size", field(&TrainConfig::batch_size)},
      {"alpha", field(&TrainConfig::alpha)},
      {"beta", field(&TrainConfig::beta)},
      {"lambda", field(&TrainConfig::lambda)},
      {"gamma1", field(&TrainConfig::gamma1)},
      {"gamma2", field(&TrainConfig::gamma2)},
      {"topk_divisor", field(&TrainConfig::topk_divisor)},
      {"t_target", field(&TrainConfig::t_target)},
      {"seed", field(&TrainConfig::seed)},
      {"input_dim", field(&TrainConfig::input_dim)},
      {"coact_weight", field(&TrainConfig::coact_weight)},
      {"norm_weight", field(&TrainConfig::norm_weight)},
      {"guide_weight", field(&TrainConfig::guide_weight)},
      {"head", field(&TrainConfig::head)},
      {"use_vlc", field(&TrainConfig::use_vlc)},
      {"consistency", field(&TrainConfig::consistency)},
      {"reconstructor", field(&TrainConfig::reconstructor)},
      {"tsm_prompt", field(&TrainConfig::tsm_prompt)},
      {"tsm_template", field(&TrainConfig::tsm_template)},
      {"prompt_length", field(&TrainConfig::prompt_length)},
      {"vlc_template", field(&TrainConfig::vlc_template)},
      {"masked_only_loss", field(&TrainConfig::masked_only_loss)},
      {"mask_label_bias", field(&TrainConfig::mask_label_bias)},
      {"fusion", field(&TrainConfig::fusion)},
      {"sampling", field(&TrainConfig::sampling)},
      {"word_vectors", field(&TrainConfig::word_vectors)},
      {"embed_dim", field(&TrainConfig::embed_dim)},
      {"attention_hidden", field(&TrainConfig::attention_hidden)},
      {"text_heads", field(&TrainConfig::text_heads)},
      {"text_ff", field(&TrainConfig::text_ff)},
      {"vlc_hidden", field(&TrainConfig::vlc_hidden)},
      {"vlc_attention_hidden", field(&TrainConfig::vlc_attention_hidden)},
      {"vlc_ff", field(&TrainConfig::vlc_ff)},
      {"encoder_depth", field(&TrainConfig::encoder_depth)},
      {"decoder_depth", field(&TrainConfig::decoder_depth)},
      {"dropout", field(&TrainConfig::dropout)},
      {"divergence_limit", field(&TrainConfig::divergence_limit)},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, f] : field_table())
    if (name == key) return &f;
  return nullptr;
}

std::string join_keys() {
  std::string out;
  for (const auto& k : TrainConfig::keys()) out += (out.empty() ? "" : ", ") + k;
  return out;
}

void require_one_of(const std::string& key, const std::string& value, std::initializer_list<const char*> allowed) {
  std::string list;
  for (const char* a : allowed) {
    if (value == a) return;
    list += (list.empty() ? "" : ", ") + std::string(a);
  }
  throw ValidationError("config key '" + key + "' must be one of {" + list + "}, got '" + value + "'");
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

TrainConfig TrainConfig::profile_defaults(const std::string& profile) {
  TrainConfig c;
  c.profile = profile;
  if (profile == "thumos") return c;
  if (profile == "anet") {
    c.learning_rate = 3e-5;
    c.iterations = 50000;
    c.lambda = 0.25;
    c.t_target = 60;
    return c;
  }
  if (profile == "synthetic") {
    c.learning_rate = 3e-3;
    c.iterations = 500;
    c.t_target = 40;
    c.norm_weight = 0.5;
    c.embed_dim = 64;
    c.attention_hidden = 32;
    c.text_heads = 4;
    c.text_ff = 64;
    c.prompt_length = 4;
    c.vlc_hidden = 32;
    c.vlc_attention_hidden = 32;
    c.vlc_ff = 64;
    c.word_vectors = "hash:32";
    return c;
  }
  throw ValidationError("unknown profile '" + profile + "' (expected thumos, anet or synthetic)");
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : field_table()) out.push_back(name);
    return out;
  }();
  return k;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ValidationError("unknown config key '" + key + "'; valid keys: " + join_keys());
  f->set(*this, key, value);
}

std::string TrainConfig::get(const std::string& key) const {
  const Field* f = find_field(key);
  if (!f) throw ValidationError("unknown config key '" + key + "'; valid keys: " + join_keys());
  return f->get(*this);
}

void TrainConfig::validate() const {
  auto nonneg = [](const char* key, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string("config key '") + key + "' must be >= 0");
  };
  auto positive = [](const char* key, long long v) {
    if (v < 1) throw ValidationError(std::string("config key '") + key + "' must be >= 1");
  };
  require_one_of("profile", profile, {"thumos", "anet", "synthetic"});
  if (!(learning_rate > 0.0)) throw ValidationError("config key 'learning_rate' must be > 0");
  nonneg("weight_decay", weight_decay);
  nonneg("alpha", alpha);
  nonneg("beta", beta);
  nonneg("lambda", lambda);
  nonneg("gamma1", gamma1);
  nonneg("gamma2", gamma2);
  nonneg("coact_weight", coact_weight);
  nonneg("norm_weight", norm_weight);
  nonneg("guide_weight", guide_weight);
  nonneg("mask_label_bias", mask_label_bias);
  positive("iterations", iterations);
  positive("batch_size", batch_size);
  positive("topk_divisor", topk_divisor);
  positive("t_target", t_target);
  positive("input_dim", input_dim);
  positive("prompt_length", prompt_length);
  positive("embed_dim", embed_dim);
  positive("attention_hidden", attention_hidden);
  positive("text_heads", text_heads);
  positive("text_ff", text_ff);
  positive("vlc_hidden", vlc_hidden);
  positive("vlc_attention_hidden", vlc_attention_hidden);
  positive("vlc_ff", vlc_ff);
  positive("decoder_depth", decoder_depth);
  if (encoder_depth < 0) throw ValidationError("config key 'encoder_depth' must be >= 0");
  if (embed_dim % text_heads != 0) throw ValidationError("embed_dim must be divisible by text_heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("config key 'dropout' must be in [0, 1)");
  if (!(divergence_limit > 0.0)) throw ValidationError("config key 'divergence_limit' must be > 0");
  require_one_of("head", head, {"text", "conv"});
  require_one_of("consistency", consistency, {"mse", "kl", "mae", "share", "none"});
  require_one_of("reconstructor", reconstructor, {"transformer", "gru", "lstm"});
  require_one_of("tsm_prompt", tsm_prompt, {"learnable", "handcraft"});
  require_one_of("fusion", fusion, {"concat", "gated"});
  require_one_of("sampling", sampling, {"random", "uniform", "full"});
  if (gated_fusion() && input_dim % 2 != 0) throw ValidationError("gated fusion needs an even input_dim");
  text::validate_template(vlc_template);
  text::validate_template(tsm_template);
}

ConsistencyType TrainConfig::consistency_type() const {
  if (consistency == "mse") return ConsistencyType::kMse;
  if (consistency == "kl") return ConsistencyType::kKl;
  if (consistency == "mae") return ConsistencyType::kMae;
  if (consistency == "share") return ConsistencyType::kShare;
  if (consistency == "none") return ConsistencyType::kNone;
  throw ValidationError("unknown consistency type '" + consistency + "'");
}

vlc::Reconstructor TrainConfig::reconstructor_type() const {
  if (reconstructor == "transformer") return vlc::Reconstructor::kTransformer;
  if (reconstructor == "gru") return vlc::Reconstructor::kGru;
  if (reconstructor == "lstm") return vlc::Reconstructor::kLstm;
  throw ValidationError("unknown reconstructor '" + reconstructor + "'");
}

tsm::HeadType TrainConfig::head_type() const {
  if (head == "text") return tsm::HeadType::kTextMatching;
  if (head == "conv") return tsm::HeadType::kConvClassifier;
  throw ValidationError("unknown head '" + head + "'");
}

data::SamplingMode TrainConfig::sampling_mode() const {
  if (sampling == "random") return data::SamplingMode::kRandom;
  if (sampling == "uniform") return data::SamplingMode::kUniform;
  throw ValidationError("unknown sampling mode '" + sampling + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key=value");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (!find_field(key)) throw ValidationError("unknown config key '" + key + "'; valid keys: " + join_keys());
    pairs.emplace_back(std::move(key), std::move(value));
  }
  for (const auto& [k, v] : pairs)
    if (k == "profile") base = TrainConfig::profile_defaults(v);
  for (const auto& [k, v] : pairs)
    if (k != "profile") base.set(k, v);
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [name, f] : field_table()) out += name + "=" + f.get(config) + "\n";
  return out;
}

std::uint64_t config_hash(const TrainConfig& config) {
  const auto text = serialize_config(config);
  return fnv1a(text.data(), text.size());
}

namespace {

// Mean symmetric Bernoulli KL between p and q.
Var symmetric_kl(const Var& p, const Var& q) {
  constexpr double eps = 1e-8;
  Var one_p = ag::add_scalar(ag::scale(p, -1.0), 1.0);
  Var one_q = ag::add_scalar(ag::scale(q, -1.0), 1.0);
  Var log_ratio = ag::sub(ag::log_clamped(p, eps), ag::log_clamped(q, eps));
  Var log_ratio_c = ag::sub(ag::log_clamped(one_p, eps), ag::log_clamped(one_q, eps));
  // KL(p||q) + KL(q||p) = (p - q) log(p/q) + (q - p) log((1-p)/(1-q))
  Var diff = ag::sub(p, q);
  return ag::mean(ag::sub(ag::mul(diff, log_ratio), ag::mul(diff, log_ratio_c)));
}

Var check_shape(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("consistency_loss: attention lengths differ (" + std::to_string(a.rows()) + " vs " +
                          std::to_string(b.rows()) + ")");
  return a;
}

}  // namespace

Var consistency_loss(const Var& att_m, const Var& att_r, ConsistencyType type) {
  check_shape(att_m, att_r);
  const Var sg_m = ag::detach(att_m);
  const Var sg_r = ag::detach(att_r);
  switch (type) {
    case ConsistencyType::kMse:
      return ag::add(ag::mean(ag::square(ag::sub(att_m, sg_r))), ag::mean(ag::square(ag::sub(att_r, sg_m))));
    case ConsistencyType::kMae:
      return ag::add(ag::mean(ag::abs(ag::sub(att_m, sg_r))), ag::mean(ag::abs(ag::sub(att_r, sg_m))));
    case ConsistencyType::kKl:
      return ag::add(symmetric_kl(att_m, sg_r), symmetric_kl(sg_m, att_r));
    case ConsistencyType::kShare:
    case ConsistencyType::kNone:
      break;
  }
  return ag::scalar(0.0);
}

void check_finite(const LossComponents& c) {
  const std::pair<const char*, const Var*> named[] = {{"L_mil", &c.mil},   {"L_coact", &c.coact},
                                                       {"L_norm", &c.norm}, {"L_guide", &c.guide},
                                                       {"L_rec", &c.rec},   {"L_c", &c.contrastive},
                                                       {"L_con", &c.consistency}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v->item())) throw NumericalError(std::string("non-finite loss component ") + name);
  }
}

Var total_loss(const LossComponents& c, const TrainConfig& config) {
  check_finite(c);
  Var tsm_part = ag::add(c.mil, ag::add(ag::scale(c.coact, config.coact_weight),
                                        ag::add(ag::scale(c.norm, config.norm_weight),
                                                ag::scale(c.guide, config.guide_weight))));
  Var total = ag::add(tsm_part, ag::scale(c.rec, config.alpha));
  total = ag::add(total, ag::scale(c.contrastive, config.beta));
  return ag::add(total, ag::scale(c.consistency, config.lambda));
}

Framework::Framework(const TrainConfig& config, std::vector<std::string> class_names)
    : config_(config), class_names_(std::move(class_names)) {
  config_.validate();
  if (class_names_.empty()) throw ValidationError("framework needs at least one class");
  const auto table = text::load_word_vectors(config_.word_vectors);
  label_vectors_.resize(static_cast<Eigen::Index>(class_names_.size()), table.dimension());
  for (std::size_t c = 0; c < class_names_.size(); ++c)
    label_vectors_.row(static_cast<Eigen::Index>(c)) = text::embed_label(class_names_[c], table).transpose();
  const auto vocab = text::Vocabulary::build(class_names_, {config_.vlc_template});
  vocab_vectors_.resize(vocab.size(), table.dimension());
  for (int i = 0; i < vocab.size(); ++i) vocab_vectors_.row(i) = table.lookup(vocab.word(i)).transpose();
  if (config_.tsm_prompt == "handcraft") {
    std::vector<std::string> words;
    std::istringstream ws(config_.tsm_template);
    for (std::string w; ws >> w;)
      if (w != text::kClassSlot) words.push_back(w);
    if (words.empty()) throw ValidationError("handcrafted prompt template has no words besides [CLS]");
    handcraft_words_.resize(static_cast<Eigen::Index>(words.size()), table.dimension());
    for (std::size_t i = 0; i < words.size(); ++i) {
      std::string lw = words[i];
      std::transform(lw.begin(), lw.end(), lw.begin(), [](unsigned char ch) { return std::tolower(ch); });
      handcraft_words_.row(static_cast<Eigen::Index>(i)) = table.lookup(lw).transpose();
    }
  }
  nn::Rng rng(config_.seed);
  build(rng);
}

Framework::Framework(const TrainConfig& config, std::vector<std::string> class_names, Matrix label_vectors,
                     Matrix vocab_vectors, Matrix handcraft_words)
    : config_(config),
      class_names_(std::move(class_names)),
      label_vectors_(std::move(label_vectors)),
      vocab_vectors_(std::move(vocab_vectors)),
      handcraft_words_(std::move(handcraft_words)) {
  config_.validate();
  if (class_names_.empty()) throw ValidationError("framework needs at least one class");
  if (label_vectors_.rows() != static_cast<Eigen::Index>(class_names_.size()))
    throw ValidationError("label vectors do not match the class count");
  nn::Rng rng(config_.seed);
  build(rng);
}

void Framework::build(nn::Rng& rng) {
  vocab_ = text::Vocabulary::build(class_names_, {config_.vlc_template});
  if (vocab_vectors_.rows() != vocab_.size()) throw ValidationError("vocabulary vectors do not match the vocabulary");
  sentences_.clear();
  for (const auto& name : class_names_) sentences_.push_back(text::render_sentence(name, config_.vlc_template, vocab_));

  if (config_.gated_fusion()) gate_ = tsm::FusionGate::create(store_, "fusion", config_.input_dim / 2);

  tsm::TsmConfig tc;
  tc.input_dim = config_.input_dim;
  tc.embed_dim = config_.embed_dim;
  tc.attention_hidden = config_.attention_hidden;
  tc.text_heads = config_.text_heads;
  tc.text_ff = config_.text_ff;
  tc.prompt_length = config_.prompt_length;
  tc.dropout = config_.dropout;
  tc.topk_divisor = config_.topk_divisor;
  tc.head = config_.head_type();
  tsm_ = std::make_unique<tsm::TsmModel>(tc, label_vectors_, store_, rng,
                                         handcraft_words_.size() > 0 ? &handcraft_words_ : nullptr);

  if (config_.use_vlc) {
    vlc::VlcConfig vc;
    vc.input_dim = config_.input_dim;
    vc.hidden = config_.vlc_hidden;
    vc.attention_hidden = config_.vlc_attention_hidden;
    vc.ff_dim = config_.vlc_ff;
    vc.encoder_depth = config_.encoder_depth;
    vc.decoder_depth = config_.decoder_depth;
    vc.dropout = config_.dropout;
    vc.reconstructor = config_.reconstructor_type();
    vc.masked_only_loss = config_.masked_only_loss;
    vlc_ = std::make_unique<vlc::VlcModel>(vc, vocab_vectors_, store_, rng);
  }
}

Var Framework::model_input(const Matrix& features) const {
  if (features.cols() != config_.input_dim)
    throw ValidationError("feature width " + std::to_string(features.cols()) + " does not match input_dim " +
                          std::to_string(config_.input_dim));
  Var x = ag::constant(features);
  return gate_ ? (*gate_)(x) : x;
}

LossComponents Framework::compute_losses(std::span<const TrainingVideo> batch, nn::Rng* rng) const {
  if (batch.empty()) throw ValidationError("compute_losses: empty batch");
  nn::Rng fixed(config_.seed);
  nn::Rng& draw = rng ? *rng : fixed;
  const auto C = num_classes();
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  std::vector<Var> mil, norm, guide, rec, contrastive, consistency;
  std::vector<tsm::CoactivityInput> coact_inputs;
  LossComponents c;
  for (const auto& video : batch) {
    if (static_cast<int>(video.label.size()) != C) throw ValidationError("video '" + video.id + "': label length");
    Var x = model_input(video.features);
    const auto out = tsm_->forward(x, rng);
    mil.push_back(tsm::mil_loss(out.probs, out.probs_suppressed, tsm::make_mil_targets(video.label)));
    norm.push_back(tsm::norm_loss(out.attention));
    guide.push_back(tsm::guide_loss(out.attention, out.similarity));
    coact_inputs.push_back({out.embedded, out.attention, out.similarity, out.suppressed, video.label});

    if (!vlc_) continue;
    const auto type = config_.consistency_type();
    Var att_r = type == ConsistencyType::kShare ? out.attention : vlc_->attention(x, rng);
    std::vector<int> positives;
    for (int c = 0; c < C; ++c)
      if (video.label[static_cast<std::size_t>(c)] != 0) positives.push_back(c);
    std::uniform_int_distribution<std::size_t> pick(0, positives.size() - 1);
    const int cls = positives[pick(draw)];
    const auto masked = text::mask_sentence(sentences_[static_cast<std::size_t>(cls)], cls, draw,
                                            config_.mask_label_bias);
    const auto losses = vlc::vlc_losses(*vlc_, vlc_->video_embed(x), att_r, masked, config_.gamma1, config_.gamma2,
                                        config_.beta > 0.0);
    rec.push_back(losses.rec);
    if (config_.beta > 0.0) contrastive.push_back(losses.contrastive);
    consistency.push_back(consistency_loss(out.attention, att_r, type));
    c.att_m.push_back(out.attention);
    c.att_r.push_back(att_r);
  }

  auto mean_of = [inv_n](const std::vector<Var>& terms) {
    if (terms.empty()) return ag::scalar(0.0);
    Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
    return ag::scale(acc, inv_n);
  };
  c.mil = mean_of(mil);
  c.norm = mean_of(norm);
  c.guide = mean_of(guide);
  c.coact = tsm::coactivity_loss(coact_inputs);
  c.rec = mean_of(rec);
  c.contrastive = mean_of(contrastive);
  c.consistency = mean_of(consistency);
  return c;
}

InferenceResult Framework::infer(const Matrix& features) const {
  ag::NoGradGuard guard;
  const auto out = tsm_->forward(model_input(features), nullptr);
  InferenceResult r;
  r.attention = out.attention.value().col(0);
  r.similarity = out.similarity.value();
  r.suppressed = out.suppressed.value();
  r.probs_suppressed = out.probs_suppressed.value().row(0).transpose();
  return r;
}

std::string metrics_csv_line(const MetricsRow& row) {
  return std::to_string(row.iteration) + "," + format_double(row.mil) + "," + format_double(row.rec) + "," +
         format_double(row.contrastive) + "," + format_double(row.consistency) + "," + format_double(row.total);
}

Trainer::Trainer(Framework& framework, std::vector<TrainingVideo> videos)
    : framework_(framework),
      videos_(std::move(videos)),
      adam_(framework.parameters(),
            nn::Adam::Options{framework.config().learning_rate, framework.config().weight_decay, 0.9, 0.999, 1e-8}),
      rng_(framework.config().seed ^ 0x9E3779B97F4A7C15ULL) {
  if (videos_.empty()) throw ValidationError("training split is empty");
  for (const auto& v : videos_) {
    if (std::none_of(v.label.begin(), v.label.end(), [](int l) { return l != 0; }))
      throw ValidationError("training video '" + v.id + "' has no positive class");
  }
}

std::vector<TrainingVideo> Trainer::sample_batch() {
  const auto& cfg = framework_.config();
  std::vector<std::size_t> order(videos_.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n = std::min(order.size(), static_cast<std::size_t>(cfg.batch_size));
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng_)]);
  }
  std::vector<TrainingVideo> batch;
  batch.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = videos_[order[i]];
    if (cfg.sampling == "full")
      batch.push_back(v);
    else
      batch.push_back({v.id, data::sample_segments(v.features, cfg.t_target, cfg.sampling_mode(), rng_), v.label});
  }
  return batch;
}

MetricsRow Trainer::step() {
  const auto& cfg = framework_.config();
  const auto batch = sample_batch();
  auto components = framework_.compute_losses(batch, &rng_);
  MetricsRow row;
  row.iteration = iteration_ + 1;
  Var total;
  try {
    total = total_loss(components, cfg);
  } catch (const NumericalError& e) {
    throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(row.iteration), iteration_);
  }
  row.mil = components.mil.item();
  row.rec = components.rec.item();
  row.contrastive = components.contrastive.item();
  row.consistency = components.consistency.item();
  row.total = total.item();
  if (!std::isfinite(row.total) || row.total > cfg.divergence_limit) {
    throw DivergenceError("training diverged at iteration " + std::to_string(row.iteration) + ": L_total = " +
                              format_double(row.total),
                          iteration_);
  }
  framework_.parameters().zero_grad();
  ag::backward(total);
  adam_.step();
  ++iteration_;
  return row;
}

std::vector<MetricsRow> Trainer::run(const std::function<void(const MetricsRow&)>& on_step) {
  std::vector<MetricsRow> rows;
  while (iteration_ < framework_.config().iterations) {
    rows.push_back(step());
    if (on_step) on_step(rows.back());
  }
  return rows;
}

std::vector<TrainingVideo> to_training_videos(std::span<const data::VideoFeatures> videos,
                                              std::span<const data::ManifestEntry> entries) {
  if (videos.size() != entries.size()) throw ValidationError("to_training_videos: size mismatch");
  std::vector<TrainingVideo> out;
  for (std::size_t i = 0; i < videos.size(); ++i)
    out.push_back({entries[i].id, data::fuse_modalities(videos[i]), entries[i].label});
  return out;
}

std::vector<TrainingVideo> load_training_videos(const data::DatasetManifest& manifest) {
  std::vector<TrainingVideo> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back({e.id, data::fuse_modalities(data::load_features(e)), e.label});
  return out;
}

// Checkpoint archive: magic, config hash, config text, class names,
// iteration, optimizer step, named tensors, optimizer moments, FNV-1a
// checksum of everything before it. Integers are little-endian.
namespace {

constexpr char kMagic[8] = {'W', 'T', 'A', 'L', 'C', 'K', 'P', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t begin, std::size_t end) : buf_(buf), end_(end), pos_(begin) {}
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CorruptArchiveError("checkpoint is truncated");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() {
    const auto bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const auto rows = u64();
    const auto cols = u64();
    if (rows > (1u << 24) || cols > (1u << 24)) throw CorruptArchiveError("checkpoint tensor has absurd shape");
    need(rows * cols * 8);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
    return m;
  }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Framework& framework, const Trainer* trainer) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u64(config_hash(framework.config()));
  w.str(serialize_config(framework.config()));
  w.u64(framework.class_names().size());
  for (const auto& n : framework.class_names()) w.str(n);
  w.i64(trainer ? trainer->iteration() : 0);
  w.i64(trainer ? trainer->optimizer().steps() : 0);
  w.matrix(framework.label_vectors());
  w.matrix(framework.vocab_vectors());
  w.matrix(framework.handcraft_words());
  const auto& entries = framework.parameters().entries();
  w.u64(entries.size());
  for (const auto& [name, var] : entries) {
    w.str(name);
    w.matrix(var.value());
  }
  const bool with_moments = trainer != nullptr;
  w.u64(with_moments ? 1 : 0);
  if (with_moments) {
    auto& adam = const_cast<nn::Adam&>(trainer->optimizer());
    for (const auto& m : adam.first_moments()) w.matrix(m);
    for (const auto& v : adam.second_moments()) w.matrix(v);
  }
  const auto sum = fnv1a(w.data().data(), w.data().size());
  w.u64(sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write checkpoint: " + path.string());
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw ValidationError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::vector<std::string>* expected_classes,
                           const TrainConfig* expected_config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic + 8 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw CorruptArchiveError("not a checkpoint archive (bad magic or truncated): " + path.string());
  const std::size_t body = buf.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[body + static_cast<std::size_t>(i)])) << (8 * i);
  if (fnv1a(buf.data(), body) != stored)
    throw CorruptArchiveError("checkpoint checksum mismatch (truncated or corrupted): " + path.string());

  Checkpoint ck;
  Reader rr(buf, sizeof kMagic, body);
  ck.config_hash = rr.u64();
  TrainConfig config;
  try {
    config = parse_config(rr.str(), TrainConfig{});
  } catch (const ValidationError& e) {
    throw CorruptArchiveError(std::string("checkpoint config unreadable: ") + e.what());
  }
  if (config_hash(config) != ck.config_hash) throw CorruptArchiveError("checkpoint config hash does not match its text");
  const auto n_classes = rr.u64();
  if (n_classes > 100000) throw CorruptArchiveError("checkpoint class count is absurd");
  std::vector<std::string> names;
  for (std::uint64_t i = 0; i < n_classes; ++i) names.push_back(rr.str());
  if (expected_classes && expected_classes->size() != names.size()) {
    throw ValidationError("checkpoint has " + std::to_string(names.size()) + " classes but the manifest has " +
                          std::to_string(expected_classes->size()));
  }
  if (expected_config && config_hash(*expected_config) != ck.config_hash) {
    ck.warnings.push_back("warning: checkpoint config hash differs from the requested config");
    std::cerr << ck.warnings.back() << "\n";
  }
  ck.iteration = static_cast<int>(rr.i64());
  ck.optimizer_steps = rr.i64();
  Matrix labels = rr.matrix();
  Matrix vocab = rr.matrix();
  Matrix handcraft = rr.matrix();
  ck.framework = std::make_unique<Framework>(config, std::move(names), std::move(labels), std::move(vocab),
                                             std::move(handcraft));
  auto& store = ck.framework->parameters();
  const auto n_tensors = rr.u64();
  if (n_tensors != store.size())
    throw CorruptArchiveError("checkpoint holds " + std::to_string(n_tensors) + " tensors, model expects " +
                              std::to_string(store.size()));
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    const auto name = rr.str();
    Matrix value = rr.matrix();
    if (!store.contains(name)) throw CorruptArchiveError("checkpoint tensor '" + name + "' is not a model parameter");
    Var p = store.get(name);
    if (p.rows() != value.rows() || p.cols() != value.cols())
      throw CorruptArchiveError("checkpoint tensor '" + name + "' has the wrong shape");
    p.mutable_value() = std::move(value);
  }
  if (rr.u64() == 1) {
    for (std::size_t i = 0; i < store.size(); ++i) ck.first_moments.push_back(rr.matrix());
    for (std::size_t i = 0; i < store.size(); ++i) ck.second_moments.push_back(rr.matrix());
  }
  return ck;
}

void restore_trainer(const Checkpoint& checkpoint, Trainer& trainer) {
  trainer.set_iteration(checkpoint.iteration);
  auto& adam = trainer.optimizer();
  adam.set_steps(checkpoint.optimizer_steps);
  if (!checkpoint.first_moments.empty()) {
    adam.first_moments() = checkpoint.first_moments;
    adam.second_moments() = checkpoint.second_moments;
  }
}

}  // namespace wtal::train
