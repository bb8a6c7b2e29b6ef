#pragma once

// Word vectors, vocabularies, prompt templates and masked description
// sentences.

#include "wtal/nn.hpp"

#include <Eigen/Dense>

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace wtal::text {

inline constexpr const char* kStartToken = "[START]";
inline constexpr const char* kMaskToken = "[MASK]";
inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kEndToken = "[END]";
inline constexpr const char* kClassSlot = "[CLS]";

inline constexpr int kStartId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kEndId = 3;
inline constexpr int kNumSpecials = 4;

class WordVecTable;
WordVecTable load_word_vectors(const std::string& path_or_spec);

// Word -> vector map with a deterministic out-of-vocabulary fallback.
class WordVecTable {
 public:
  // Offline table: every word maps to its hash-seeded unit vector.
  static WordVecTable hashed(int dimension);

  int dimension() const { return dimension_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(const std::string& word) const { return vectors_.count(word) != 0; }
  // Stored vector, or the fallback for unknown words.
  Eigen::VectorXd lookup(const std::string& word) const;
  void insert(const std::string& word, Eigen::VectorXd vector);

  // Unit vector seeded by a stable 64-bit FNV-1a hash of the word.
  static Eigen::VectorXd fallback(const std::string& word, int dimension);

 private:
  friend WordVecTable load_word_vectors(const std::string& path_or_spec);

  int dimension_ = 0;
  std::unordered_map<std::string, Eigen::VectorXd> vectors_;
};

// Text file with one "word v1 ... vD" line per entry, or "hash:D".
WordVecTable load_word_vectors(const std::string& path_or_spec);

// "HighJump" -> {"high", "jump"}; also splits on whitespace, '_' and '-'.
std::vector<std::string> tokenize_label(const std::string& class_name);
// Mean of the word vectors of the tokenised class name.
Eigen::VectorXd embed_label(const std::string& class_name, const WordVecTable& table);

class Vocabulary {
 public:
  // Specials, then the sorted union of template and class words.
  static Vocabulary build(const std::vector<std::string>& class_names,
                          const std::vector<std::string>& templates);

  int size() const { return static_cast<int>(words_.size()); }
  int index(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::string& word(int index) const { return words_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct PromptConfig {
  int tsm_prompt_length = 10;
  std::string vlc_template = "a video of the [CLS]";

  void validate() const;
};

// Throws ValidationError unless the template has exactly one [CLS] slot.
void validate_template(const std::string& tmpl);

// [START] + template words with [CLS] expanded + [END], lowercase.
std::vector<std::string> render_words(const std::string& class_name, const std::string& tmpl);

struct RenderedSentence {
  std::vector<int> tokens;
  // Positions occupied by the class words.
  std::vector<int> label_positions;
};
RenderedSentence render_sentence(const std::string& class_name, const std::string& tmpl,
                                 const Vocabulary& vocab);

struct MaskedSentence {
  std::vector<int> tokens;
  std::vector<int> mask_positions;  // ascending
  std::vector<int> original_tokens;
  int class_id = 0;

  int length() const { return static_cast<int>(tokens.size()); }
};

// Number of masked words for a sentence with `content_words` non-special words.
int mask_count(int content_words);

// Masks max(1, round(M_content / 3)) content positions without replacement.
// label_bias > 0 raises the sampling weight of label positions to
// (1 + label_bias); 0 keeps the draw uniform.
MaskedSentence mask_sentence(const RenderedSentence& sentence, int class_id, std::mt19937_64& rng,
                             double label_bias = 0.0);

// Learnable pieces of the class text queries [L_s; L_p; L_e].
struct PromptParameters {
  ag::Var start;             // 1 x W, shared by all classes
  ag::Var context;           // N_p x W, shared by all classes
  nn::Linear label_proj;     // word_dim -> W
  ag::Matrix label_vectors;  // C x word_dim, fixed label embeddings
  ag::Var background_label;  // 1 x W, zero at initialisation
  // Handcrafted prompt: fixed context word vectors sent through label_proj
  // instead of the learnable context. Empty for the learnable prompt.
  ag::Matrix context_words;

  // handcraft_words (N x word_dim) selects the handcrafted prompt.
  static PromptParameters create(nn::ParameterStore& store, const std::string& prefix,
                                 const ag::Matrix& label_vectors, int prompt_length, int width,
                                 nn::Rng& rng, const ag::Matrix* handcraft_words = nullptr);
  int num_classes() const { return static_cast<int>(label_vectors.rows()); }
};

// (1 + N_p + 1) x W token embeddings for class_id in [0, C]; C is background.
ag::Var build_query_tokens(int class_id, const PromptParameters& params);

}  // namespace wtal::text
