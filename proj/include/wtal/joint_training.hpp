#pragma once

// Couples the two branches through the stop-gradient consistency term,
// assembles the total objective and runs the optimisation loop.

#include "wtal/dataset_io.hpp"
#include "wtal/error.hpp"
#include "wtal/nn.hpp"
#include "wtal/text_pipeline.hpp"
#include "wtal/tsm.hpp"
#include "wtal/vlc.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace wtal::train {

using ag::Matrix;
using ag::Var;

enum class ConsistencyType { kMse, kKl, kMae, kShare, kNone };

// Every field is a key of the flat key=value config file.
struct TrainConfig {
  std::string profile = "thumos";
  double learning_rate = 5e-4;
  double weight_decay = 1e-3;
  int iterations = 5000;
  int batch_size = 10;
  double alpha = 1.0;
  double beta = 1.0;
  double lambda = 1.5;
  double gamma1 = vlc::kDefaultGamma1;
  double gamma2 = vlc::kDefaultGamma2;
  int topk_divisor = 8;
  int t_target = 320;
  std::uint64_t seed = 0;
  int input_dim = 2 * data::kModalityDim;

  double coact_weight = 1.0;
  double norm_weight = 0.1;
  double guide_weight = 1.0;

  std::string head = "text";  // text | conv
  bool use_vlc = true;
  std::string consistency = "mse";  // mse | kl | mae | share | none
  std::string reconstructor = "transformer";  // transformer | gru | lstm
  std::string tsm_prompt = "learnable";  // learnable | handcraft
  std::string tsm_template = "a video of [CLS]";
  int prompt_length = 10;
  std::string vlc_template = "a video of the [CLS]";
  bool masked_only_loss = false;
  double mask_label_bias = 0.0;
  std::string fusion = "concat";  // concat | gated
  std::string sampling = "random";  // random | uniform | full (native length, no resampling)
  std::string word_vectors = "hash:300";

  int embed_dim = 2048;
  int attention_hidden = 512;
  int text_heads = 8;
  int text_ff = 2048;
  int vlc_hidden = 512;
  int vlc_attention_hidden = 512;
  int vlc_ff = 512;
  int encoder_depth = 1;
  int decoder_depth = 1;
  double dropout = 0.5;
  double divergence_limit = 1e6;

  // Profile defaults: "thumos", "anet" or "synthetic".
  static TrainConfig profile_defaults(const std::string& profile);
  static const std::vector<std::string>& keys();

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;

  ConsistencyType consistency_type() const;
  vlc::Reconstructor reconstructor_type() const;
  tsm::HeadType head_type() const;
  data::SamplingMode sampling_mode() const;
  bool gated_fusion() const { return fusion == "gated"; }
};

// "key = value" lines; '#' starts a comment. Unknown keys throw
// ValidationError listing the valid ones. A "profile" key, if present,
// resets the base to that profile before the other keys apply.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::string serialize_config(const TrainConfig& config);
// FNV-1a of the serialised config.
std::uint64_t config_hash(const TrainConfig& config);

// MSE(att_m, sg(att_r)) + MSE(att_r, sg(att_m)), or the KL / MAE analogue.
// kShare and kNone contribute nothing.
Var consistency_loss(const Var& att_m, const Var& att_r, ConsistencyType type = ConsistencyType::kMse);

struct LossComponents {
  Var mil;
  Var coact;
  Var norm;
  Var guide;
  Var rec;
  Var contrastive;
  Var consistency;
  // Per-video att_m and att_r feeding the consistency term (empty without VLC).
  std::vector<Var> att_m;
  std::vector<Var> att_r;
};

// L_mil + aux + alpha L_rec + beta L_c + lambda L_con. Throws NumericalError
// naming the first non-finite component.
Var total_loss(const LossComponents& components, const TrainConfig& config);
void check_finite(const LossComponents& components);

struct TrainingVideo {
  std::string id;
  Matrix features;  // T x 2D, plain concatenation
  std::vector<int> label;
};

struct InferenceResult {
  Eigen::VectorXd attention;    // att_m
  Eigen::MatrixXd similarity;   // S
  Eigen::MatrixXd suppressed;   // S_bar
  Eigen::VectorXd probs_suppressed;
};

// Parameters and modules of the whole model.
class Framework {
 public:
  // Builds fresh parameters; word vectors come from config.word_vectors.
  Framework(const TrainConfig& config, std::vector<std::string> class_names);
  // Builds with explicit fixed vectors (checkpoint restore).
  Framework(const TrainConfig& config, std::vector<std::string> class_names, Matrix label_vectors,
            Matrix vocab_vectors, Matrix handcraft_words);

  const TrainConfig& config() const { return config_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int num_classes() const { return static_cast<int>(class_names_.size()); }

  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }
  const tsm::TsmModel& tsm() const { return *tsm_; }
  const vlc::VlcModel* vlc() const { return vlc_.get(); }
  const text::Vocabulary& vocabulary() const { return vocab_; }
  const Matrix& label_vectors() const { return label_vectors_; }
  const Matrix& vocab_vectors() const { return vocab_vectors_; }
  const Matrix& handcraft_words() const { return handcraft_words_; }

  // Fused model input for one video (gated fusion applies the trainable gate).
  Var model_input(const Matrix& features) const;

  // Loss terms of one batch. rng drives dropout, the VLC sentence class and
  // its mask; a null rng disables dropout and draws the sentence class and
  // mask from a fixed seed.
  LossComponents compute_losses(std::span<const TrainingVideo> batch, nn::Rng* rng) const;

  // Dropout off, no graph.
  InferenceResult infer(const Matrix& features) const;

 private:
  void build(nn::Rng& rng);

  TrainConfig config_;
  std::vector<std::string> class_names_;
  Matrix label_vectors_;
  Matrix vocab_vectors_;
  Matrix handcraft_words_;
  text::Vocabulary vocab_;
  std::vector<text::RenderedSentence> sentences_;
  nn::ParameterStore store_;
  std::unique_ptr<tsm::TsmModel> tsm_;
  std::unique_ptr<vlc::VlcModel> vlc_;
  std::optional<tsm::FusionGate> gate_;
};

struct MetricsRow {
  int iteration = 0;
  double mil = 0.0;
  double rec = 0.0;
  double contrastive = 0.0;
  double consistency = 0.0;
  double total = 0.0;
};

inline constexpr const char* kMetricsHeader = "iteration,L_mil,L_rec,L_c,L_con,L_total";
std::string metrics_csv_line(const MetricsRow& row);

// Raised when the total loss exceeds the divergence limit or is non-finite.
struct DivergenceError : NumericalError {
  int iteration;
  DivergenceError(const std::string& what, int it) : NumericalError(what), iteration(it) {}
};

class Trainer {
 public:
  Trainer(Framework& framework, std::vector<TrainingVideo> videos);

  // One optimisation step; returns its loss row.
  MetricsRow step();
  // Runs until config.iterations; on_step sees every row.
  std::vector<MetricsRow> run(const std::function<void(const MetricsRow&)>& on_step = {});

  int iteration() const { return iteration_; }
  void set_iteration(int it) { iteration_ = it; }
  nn::Adam& optimizer() { return adam_; }
  const nn::Adam& optimizer() const { return adam_; }

 private:
  std::vector<TrainingVideo> sample_batch();

  Framework& framework_;
  std::vector<TrainingVideo> videos_;
  nn::Adam adam_;
  nn::Rng rng_;
  int iteration_ = 0;
};

// Reads features for every manifest entry and concatenates the modalities.
std::vector<TrainingVideo> load_training_videos(const data::DatasetManifest& manifest);
std::vector<TrainingVideo> to_training_videos(std::span<const data::VideoFeatures> videos,
                                              std::span<const data::ManifestEntry> entries);

struct Checkpoint {
  std::unique_ptr<Framework> framework;
  int iteration = 0;
  std::int64_t optimizer_steps = 0;
  std::vector<Matrix> first_moments;
  std::vector<Matrix> second_moments;
  std::uint64_t config_hash = 0;
  std::vector<std::string> warnings;
};

void save_checkpoint(const std::filesystem::path& path, const Framework& framework, const Trainer* trainer);
// Throws CorruptArchiveError on truncation or checksum failure and
// ValidationError when expected_classes is given and differs in count.
// A config-hash mismatch with *expected_config only adds a warning.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::vector<std::string>* expected_classes = nullptr,
                           const TrainConfig* expected_config = nullptr);
// Restores optimizer moments and counters into a trainer built on
// checkpoint.framework.
void restore_trainer(const Checkpoint& checkpoint, Trainer& trainer);

}  // namespace wtal::train
