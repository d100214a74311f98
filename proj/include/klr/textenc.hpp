#pragma once

// Deterministic toy text encoder. Token embeddings are projected to the
// encoding dimension and blended across positions by a causal row-stochastic
// mixing matrix, so information about one word leaks into the words after it.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace klr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Default placeholder for a personalized concept inside a prompt.
inline constexpr std::string_view kPlaceholder = "S*";

/// Placeholders are tokens ending in '*'; their embeddings are supplied per call.
bool is_placeholder(std::string_view token);

/// Whitespace tokenizer. Lowercases everything except placeholders.
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

class Vocabulary {
 public:
  /// Embeddings are drawn from N(0, 1) with a generator seeded by `seed`.
  Vocabulary(std::vector<std::string> tokens, int d_w, std::uint64_t seed);

  /// One token per line; blank lines and lines starting with '#' are skipped.
  static Vocabulary from_file(const std::filesystem::path& path, int d_w, std::uint64_t seed);
  static std::vector<std::string> default_tokens();

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  int d_w() const noexcept { return static_cast<int>(embeddings_.cols()); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  std::optional<int> find(std::string_view token) const;
  /// Throws VocabularyError for unknown tokens.
  int index_of(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }

  /// V x d_w, one row per token.
  const Matrix& embeddings() const noexcept { return embeddings_; }
  Vector embedding(int index) const { return embeddings_.row(index).transpose(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  Matrix embeddings_;
};

struct EncodedPrompt {
  Matrix encodings;                  // M x d_e
  std::optional<int> concept_index;  // first placeholder position, if any
  std::vector<std::string> tokens;
  std::string prompt_text;

  int length() const noexcept { return static_cast<int>(encodings.rows()); }
  std::vector<int> positions_of(std::string_view token) const;
};

using EmbeddingOverrides = std::map<std::string, Vector, std::less<>>;

class TextEncoder {
 public:
  /// mix_strength alpha in [0, 1]: Mix = (1 - alpha) I + alpha * CausalStochastic.
  TextEncoder(Vocabulary vocab, int d_e, double mix_strength, std::uint64_t seed, int max_tokens = 16);

  const Vocabulary& vocabulary() const noexcept { return vocab_; }
  int d_w() const noexcept { return vocab_.d_w(); }
  int d_e() const noexcept { return static_cast<int>(projection_.rows()); }
  int max_tokens() const noexcept { return max_tokens_; }
  double mix_strength() const noexcept { return mix_strength_; }
  /// d_e x d_w.
  const Matrix& projection() const noexcept { return projection_; }

  /// M x M lower-triangular row-stochastic mixing for a prompt of M tokens.
  Matrix mixing(int length) const;

  /// encodings = Mix * (embeddings * E_proj^T). Placeholders must be overridden.
  EncodedPrompt encode(const std::vector<std::string>& tokens, const EmbeddingOverrides& overrides = {}) const;
  EncodedPrompt encode(std::string_view prompt, const EmbeddingOverrides& overrides = {}) const;

  /// E_proj * embedding: the encoding a token would have with no mixing.
  Vector project(const Vector& embedding) const { return projection_ * embedding; }

  /// dL/d(embedding of `token`) given dL/d(encodings), summed over every
  /// occurrence of the token in the prompt.
  Vector embedding_gradient(const EncodedPrompt& prompt, const Matrix& d_encodings, std::string_view token) const;

 private:
  Vocabulary vocab_;
  Matrix projection_;
  Matrix causal_weights_;  // max_tokens x max_tokens, strictly positive on and below the diagonal
  double mix_strength_;
  int max_tokens_;
};

/// W_K e_superclass, where e_superclass is the encoding at the superclass position
/// of `prompt_template` with its placeholder replaced by `superclass`.
Vector superclass_target(const TextEncoder& encoder, std::string_view prompt_template, std::string_view superclass,
                         const Matrix& w_k);

/// The nine neutral training templates, each containing the placeholder S*.
const std::vector<std::string>& training_templates();

/// Template used to initialize concepts and freeze their K targets.
inline constexpr std::string_view kInitTemplate = "a photo of a S*";

/// Replace every occurrence of `from` in the token list by `to`.
std::vector<std::string> replace_token(std::vector<std::string> tokens, std::string_view from, std::string_view to);

}  // namespace klr
