#include "klr/textenc.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "klr/error.hpp"
#include "klr/random.hpp"

namespace klr {

namespace {

constexpr std::uint64_t kVocabStream = 0x766f636162ULL;
constexpr std::uint64_t kProjectionStream = 0x70726f6aULL;
constexpr std::uint64_t kMixStream = 0x6d6978ULL;

}  // namespace

bool is_placeholder(std::string_view token) { return token.size() > 1 && token.back() == '*'; }

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    if (!is_placeholder(tok)) {
      std::transform(tok.begin(), tok.end(), tok.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    }
    out.push_back(std::move(tok));
  }
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<std::string> replace_token(std::vector<std::string> tokens, std::string_view from, std::string_view to) {
  for (auto& t : tokens)
    if (t == from) t = std::string(to);
  return tokens;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> tokens, int d_w, std::uint64_t seed) : tokens_(std::move(tokens)) {
  if (d_w <= 0) throw ContractError("embedding dimension must be positive");
  if (tokens_.empty()) throw ContractError("vocabulary is empty");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty()) throw ContractError("vocabulary contains an empty token");
    if (is_placeholder(t)) throw ContractError("vocabulary may not contain placeholder token '" + t + "'");
    if (!index_.emplace(t, static_cast<int>(i)).second) throw ContractError("duplicate vocabulary token '" + t + "'");
  }
  auto rng = make_rng(seed, kVocabStream);
  embeddings_ = random_normal(static_cast<Eigen::Index>(tokens_.size()), d_w, rng);
}

Vocabulary Vocabulary::from_file(const std::filesystem::path& path, int d_w, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t\r");
    tokens.push_back(line.substr(first, last - first + 1));
  }
  return Vocabulary(std::move(tokens), d_w, seed);
}

std::vector<std::string> Vocabulary::default_tokens() {
  // Exactly 32 words: template words, superclass words, and scene context.
  return {"a",     "good",   "photo",     "of",         "the",        "image",   "photograph", "shown",
          "in",    "photo,", "cat",       "dog",        "teddy",      "chair",   "pot",        "sculpture",
          "toy",   "puppy",  "sunglasses", "teapot",    "tortoise",   "plushy",  "and",        "on",
          "beach", "with",   "red",       "hat",        "painting",   "watercolor", "table",   "wearing"};
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::index_of(std::string_view token) const {
  auto idx = find(token);
  if (!idx) throw VocabularyError(std::string(token));
  return *idx;
}

std::vector<int> EncodedPrompt::positions_of(std::string_view token) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == token) out.push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(Vocabulary vocab, int d_e, double mix_strength, std::uint64_t seed, int max_tokens)
    : vocab_(std::move(vocab)), mix_strength_(mix_strength), max_tokens_(max_tokens) {
  if (d_e <= 0) throw ContractError("encoding dimension must be positive");
  if (!(mix_strength >= 0.0 && mix_strength <= 1.0)) throw ContractError("mix strength must lie in [0, 1]");
  if (max_tokens <= 0) throw ContractError("max_tokens must be positive");
  auto rng = make_rng(seed, kProjectionStream);
  projection_ = random_normal(d_e, vocab_.d_w(), rng, 1.0 / std::sqrt(static_cast<double>(vocab_.d_w())));

  auto mix_rng = make_rng(seed, kMixStream);
  std::uniform_real_distribution<double> weight(0.5, 1.5);
  causal_weights_ = Matrix::Zero(max_tokens, max_tokens);
  for (int r = 0; r < max_tokens; ++r)
    for (int c = 0; c <= r; ++c) causal_weights_(r, c) = weight(mix_rng);
}

Matrix TextEncoder::mixing(int length) const {
  if (length < 0 || length > max_tokens_) {
    throw ContractError("prompt has " + std::to_string(length) + " tokens, limit is " + std::to_string(max_tokens_));
  }
  Matrix causal = causal_weights_.topLeftCorner(length, length);
  for (int r = 0; r < length; ++r) causal.row(r) /= causal.row(r).sum();
  Matrix mix = mix_strength_ * causal;
  mix.diagonal().array() += 1.0 - mix_strength_;
  return mix;
}

EncodedPrompt TextEncoder::encode(const std::vector<std::string>& tokens, const EmbeddingOverrides& overrides) const {
  const int length = static_cast<int>(tokens.size());
  const Matrix mix = mixing(length);
  Matrix words(length, vocab_.d_w());
  EncodedPrompt out;
  for (int m = 0; m < length; ++m) {
    const auto& tok = tokens[static_cast<std::size_t>(m)];
    if (auto it = overrides.find(tok); it != overrides.end()) {
      if (it->second.size() != vocab_.d_w()) {
        throw ContractError("override embedding for '" + tok + "' has wrong dimension");
      }
      words.row(m) = it->second.transpose();
      if (!out.concept_index) out.concept_index = m;
    } else {
      words.row(m) = vocab_.embeddings().row(vocab_.index_of(tok));
    }
  }
  out.encodings = mix * (words * projection_.transpose());
  out.tokens = tokens;
  out.prompt_text = join_tokens(tokens);
  return out;
}

EncodedPrompt TextEncoder::encode(std::string_view prompt, const EmbeddingOverrides& overrides) const {
  return encode(tokenize(prompt), overrides);
}

Vector TextEncoder::embedding_gradient(const EncodedPrompt& prompt, const Matrix& d_encodings,
                                       std::string_view token) const {
  if (d_encodings.rows() != prompt.length() || d_encodings.cols() != d_e()) {
    throw ContractError("encoding gradient shape does not match prompt");
  }
  const Matrix mix = mixing(prompt.length());
  // encodings = Mix * words * P^T  =>  dL/dwords = Mix^T * dL/dE * P
  Vector grad = Vector::Zero(d_w());
  for (int s : prompt.positions_of(token)) {
    const Vector d_projected = d_encodings.transpose() * mix.col(s);  // d_e
    grad.noalias() += projection_.transpose() * d_projected;
  }
  return grad;
}

Vector superclass_target(const TextEncoder& encoder, std::string_view prompt_template, std::string_view superclass,
                         const Matrix& w_k) {
  encoder.vocabulary().index_of(superclass);
  auto tokens = tokenize(prompt_template);
  const auto it = std::find(tokens.begin(), tokens.end(), kPlaceholder);
  if (it == tokens.end()) throw ContractError("template '" + std::string(prompt_template) + "' has no S* slot");
  const auto index = static_cast<Eigen::Index>(it - tokens.begin());
  tokens = replace_token(std::move(tokens), kPlaceholder, superclass);
  const EncodedPrompt ep = encoder.encode(tokens);
  if (w_k.cols() != encoder.d_e()) throw ContractError("W_K columns do not match encoding dimension");
  return w_k * ep.encodings.row(index).transpose();
}

const std::vector<std::string>& training_templates() {
  static const std::vector<std::string> templates = {
      "a photo of a S*",      "a good photo of a S*", "the photo of a S*",
      "a good photo of the S*", "image of a S*",      "image of the S*",
      "A photograph of S*",   "A S* shown in a photo,", "A photo of S*",
  };
  return templates;
}

}  // namespace klr
