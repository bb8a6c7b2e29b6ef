#include "wtal/text_pipeline.hpp"

#include "wtal/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace wtal::text {
namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::vector<std::string> split_whitespace(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

WordVecTable WordVecTable::hashed(int dimension) {
  if (dimension < 1) throw ValidationError("word vector dimension must be positive");
  WordVecTable t;
  t.dimension_ = dimension;
  return t;
}

Eigen::VectorXd WordVecTable::fallback(const std::string& word, int dimension) {
  std::mt19937_64 rng(fnv1a(word));
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dimension);
  for (int i = 0; i < dimension; ++i) v[i] = n(rng);
  return v.normalized();
}

Eigen::VectorXd WordVecTable::lookup(const std::string& word) const {
  auto it = vectors_.find(word);
  if (it != vectors_.end()) return it->second;
  return fallback(word, dimension_);
}

void WordVecTable::insert(const std::string& word, Eigen::VectorXd vector) {
  if (vector.size() != dimension_) throw ValidationError("word vector '" + word + "' has wrong dimension");
  vectors_[word] = std::move(vector);
}

WordVecTable load_word_vectors(const std::string& path_or_spec) {
  if (path_or_spec.rfind("hash:", 0) == 0) {
    int dim = 0;
    try {
      dim = std::stoi(path_or_spec.substr(5));
    } catch (const std::exception&) {
      throw ValidationError("bad word vector spec '" + path_or_spec + "', expected hash:D");
    }
    return WordVecTable::hashed(dim);
  }
  std::ifstream in(path_or_spec);
  if (!in) throw ValidationError("cannot open word vectors: " + path_or_spec);
  WordVecTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<double> values;
    for (std::string tok; ls >> tok;) {
      try {
        values.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ValidationError(path_or_spec + ":" + std::to_string(line_no) + ": bad number '" + tok + "'");
      }
    }
    if (table.dimension_ == 0) {
      if (values.empty()) throw ValidationError(path_or_spec + ":" + std::to_string(line_no) + ": no values");
      table.dimension_ = static_cast<int>(values.size());
    }
    if (static_cast<int>(values.size()) != table.dimension_) {
      throw ValidationError(path_or_spec + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(table.dimension_) + " values, found " + std::to_string(values.size()));
    }
    table.vectors_[word] = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  }
  if (table.dimension_ == 0) throw ValidationError("word vector file is empty: " + path_or_spec);
  return table;
}

std::vector<std::string> tokenize_label(const std::string& class_name) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(lower(current));
    current.clear();
  };
  const auto n = class_name.size();
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char c = static_cast<unsigned char>(class_name[i]);
    if (std::isspace(c) || c == '_' || c == '-') {
      flush();
      continue;
    }
    if (std::isupper(c) && !current.empty()) {
      const unsigned char prev = static_cast<unsigned char>(class_name[i - 1]);
      const bool next_lower = i + 1 < n && std::islower(static_cast<unsigned char>(class_name[i + 1]));
      if (std::islower(prev) || std::isdigit(prev) || (std::isupper(prev) && next_lower)) flush();
    }
    current.push_back(static_cast<char>(c));
  }
  flush();
  return words;
}

Eigen::VectorXd embed_label(const std::string& class_name, const WordVecTable& table) {
  const auto words = tokenize_label(class_name);
  if (words.empty()) throw ValidationError("embed_label: empty class name");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(table.dimension());
  for (const auto& w : words) sum += table.lookup(w);
  return sum / static_cast<double>(words.size());
}

Vocabulary Vocabulary::build(const std::vector<std::string>& class_names,
                             const std::vector<std::string>& templates) {
  if (class_names.empty()) throw ValidationError("vocabulary: empty class list");
  std::set<std::string> words;
  for (const auto& t : templates) {
    validate_template(t);
    for (const auto& w : split_whitespace(t))
      if (w != kClassSlot) words.insert(lower(w));
  }
  for (const auto& c : class_names) {
    const auto toks = tokenize_label(c);
    if (toks.empty()) throw ValidationError("vocabulary: empty class name");
    words.insert(toks.begin(), toks.end());
  }
  Vocabulary v;
  v.words_ = {kStartToken, kMaskToken, kPadToken, kEndToken};
  v.words_.insert(v.words_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<int>(i);
  return v;
}

int Vocabulary::index(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw ValidationError("word '" + word + "' is not in the vocabulary");
  return it->second;
}

void validate_template(const std::string& tmpl) {
  const auto words = split_whitespace(tmpl);
  const auto slots = std::count(words.begin(), words.end(), std::string(kClassSlot));
  if (slots != 1) {
    throw ValidationError("prompt template '" + tmpl + "' must contain exactly one " + kClassSlot +
                          " slot (found " + std::to_string(slots) + ")");
  }
}

void PromptConfig::validate() const {
  if (tsm_prompt_length < 1) throw ValidationError("prompt length must be positive");
  validate_template(vlc_template);
}

std::vector<std::string> render_words(const std::string& class_name, const std::string& tmpl) {
  validate_template(tmpl);
  std::vector<std::string> out{kStartToken};
  for (const auto& w : split_whitespace(tmpl)) {
    if (w == kClassSlot) {
      const auto cls = tokenize_label(class_name);
      out.insert(out.end(), cls.begin(), cls.end());
    } else {
      out.push_back(lower(w));
    }
  }
  out.emplace_back(kEndToken);
  return out;
}

RenderedSentence render_sentence(const std::string& class_name, const std::string& tmpl,
                                 const Vocabulary& vocab) {
  validate_template(tmpl);
  RenderedSentence s;
  s.tokens.push_back(kStartId);
  for (const auto& w : split_whitespace(tmpl)) {
    if (w == kClassSlot) {
      for (const auto& cw : tokenize_label(class_name)) {
        s.label_positions.push_back(static_cast<int>(s.tokens.size()));
        s.tokens.push_back(vocab.index(cw));
      }
    } else {
      s.tokens.push_back(vocab.index(lower(w)));
    }
  }
  s.tokens.push_back(kEndId);
  return s;
}

int mask_count(int content_words) {
  if (content_words <= 0) return 0;
  return std::max(1, static_cast<int>(std::lround(content_words / 3.0)));
}

MaskedSentence mask_sentence(const RenderedSentence& sentence, int class_id, std::mt19937_64& rng,
                             double label_bias) {
  MaskedSentence m;
  m.class_id = class_id;
  m.original_tokens = sentence.tokens;
  m.tokens = sentence.tokens;

  std::vector<int> content;
  for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
    const int tok = sentence.tokens[i];
    if (tok >= kNumSpecials) content.push_back(static_cast<int>(i));
  }
  const int count = mask_count(static_cast<int>(content.size()));
  if (label_bias == 0.0) {
    // Partial Fisher-Yates.
    for (int i = 0; i < count; ++i) {
      std::uniform_int_distribution<int> pick(i, static_cast<int>(content.size()) - 1);
      std::swap(content[static_cast<std::size_t>(i)], content[static_cast<std::size_t>(pick(rng))]);
    }
    m.mask_positions.assign(content.begin(), content.begin() + count);
  } else {
    std::vector<double> weight;
    for (int pos : content) {
      const bool is_label = std::find(sentence.label_positions.begin(), sentence.label_positions.end(), pos) !=
                            sentence.label_positions.end();
      weight.push_back(is_label ? 1.0 + label_bias : 1.0);
    }
    for (int i = 0; i < count; ++i) {
      std::discrete_distribution<std::size_t> pick(weight.begin(), weight.end());
      const auto j = pick(rng);
      m.mask_positions.push_back(content[j]);
      weight[j] = 0.0;
    }
  }
  std::sort(m.mask_positions.begin(), m.mask_positions.end());
  for (int pos : m.mask_positions) m.tokens[static_cast<std::size_t>(pos)] = kMaskId;
  return m;
}

PromptParameters PromptParameters::create(nn::ParameterStore& store, const std::string& prefix,
                                          const ag::Matrix& label_vectors, int prompt_length, int width,
                                          nn::Rng& rng, const ag::Matrix* handcraft_words) {
  PromptParameters p;
  p.start = store.add(prefix + ".start", nn::normal_init(1, width, 0.02, rng));
  if (handcraft_words) {
    if (handcraft_words->rows() < 1 || handcraft_words->cols() != label_vectors.cols())
      throw ValidationError("handcrafted prompt words must be non-empty with the label word dimension");
    p.context_words = *handcraft_words;
  } else {
    p.context = store.add(prefix + ".context", nn::normal_init(prompt_length, width, 0.02, rng));
  }
  p.label_proj = nn::Linear::create(store, prefix + ".label_proj", static_cast<int>(label_vectors.cols()), width,
                                    rng, /*with_bias=*/false);
  p.label_vectors = label_vectors;
  p.background_label = store.add(prefix + ".background_label", ag::Matrix::Zero(1, width));
  return p;
}

ag::Var build_query_tokens(int class_id, const PromptParameters& params) {
  const int C = params.num_classes();
  if (class_id < 0 || class_id > C) {
    throw ValidationError("build_query_tokens: class id " + std::to_string(class_id) + " outside [0, " +
                          std::to_string(C) + "]");
  }
  ag::Var label = class_id == C ? params.background_label
                                : params.label_proj(ag::constant(params.label_vectors.row(class_id)));
  ag::Var context = params.context_words.size() > 0 ? params.label_proj(ag::constant(params.context_words))
                                                     : params.context;
  const ag::Var parts[] = {params.start, context, label};
  return ag::concat_rows(parts);
}

}  // namespace wtal::text
