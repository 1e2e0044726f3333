#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace prefrank::policy {

using TokenId = int;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr int kNumSpecial = 4;

/// Lowercased words (ASCII alphanumerics plus any non-ASCII byte) and single
/// punctuation characters; whitespace only separates.
std::vector<std::string> split_words(const std::string& text);

/// Word-level vocabulary with four reserved ids. Built once, then frozen.
class Vocab {
 public:
  Vocab();

  /// Most frequent words first, ties alphabetical, up to max_size entries
  /// including the specials.
  static Vocab build(const std::vector<std::string>& corpus, std::size_t max_size = 2048);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(const std::string& word) const;
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  const std::string& token(TokenId id) const;

  std::vector<TokenId> tokenize(const std::string& text) const;
  /// [BOS, tokens..., EOS]
  std::vector<TokenId> tokenize_framed(const std::string& text) const;
  /// [BOS, tokens...]: a prompt awaiting its continuation.
  std::vector<TokenId> encode_prompt(const std::string& text) const;
  /// Drops PAD/BOS/EOS and joins with single spaces.
  std::string detokenize(const std::vector<TokenId>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(const std::string& word);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace prefrank::policy
