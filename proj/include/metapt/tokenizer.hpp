// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace metapt {

using TokenId = std::int64_t;

/// Lowercasing whitespace/punctuation tokenizer with a frequency-capped
/// vocabulary. Ids 0..2 are reserved for `<pad>`, `<unk>` and `<mask>`.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kMask = 2;

  /// Splits into lowercase words; every punctuation character is its own token.
  static std::vector<std::string> split(std::string_view text);

  /// Vocabulary: reserved tokens, then `forced` in order, then the most
  /// frequent remaining words (ties broken lexicographically) up to `max_vocab`.
  static Tokenizer build(const std::vector<std::string>& texts, std::size_t max_vocab,
                         const std::vector<std::string>& forced);

  std::vector<TokenId> encode(std::string_view text) const;
  TokenId id(const std::string& word) const;
  std::optional<TokenId> find(const std::string& word) const;
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

 private:
  void add(const std::string& word);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace metapt
