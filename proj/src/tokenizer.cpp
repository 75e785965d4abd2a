// SPDX-License-Identifier: Apache-2.0
#include "metapt/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "metapt/errors.hpp"

namespace metapt {

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && c != '\'') {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

void Tokenizer::add(const std::string& word) {
  if (index_.count(word)) return;
  index_.emplace(word, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(word);
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts, std::size_t max_vocab,
                           const std::vector<std::string>& forced) {
  Tokenizer tok;
  tok.add("<pad>");
  tok.add("<unk>");
  tok.add("<mask>");
  for (const auto& w : forced) {
    auto parts = split(w);
    if (parts.size() != 1) throw DataError("forced token '" + w + "' is not a single word");
    tok.add(parts.front());
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& w : split(t)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, n] : ranked) {
    if (tok.size() >= max_vocab) break;
    tok.add(w);
  }
  return tok;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split(text)) ids.push_back(id(w));
  return ids;
}

TokenId Tokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::optional<TokenId> Tokenizer::find(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

nlohmann::json Tokenizer::to_json() const { return nlohmann::json{{"tokens", tokens_}}; }

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  Tokenizer tok;
  for (const auto& w : j.at("tokens")) tok.add(w.get<std::string>());
  if (tok.size() < 3 || tok.token(kPad) != "<pad>" || tok.token(kUnk) != "<unk>" || tok.token(kMask) != "<mask>") {
    throw DataError("tokenizer: reserved tokens missing from vocabulary file");
  }
  return tok;
}

}  // namespace metapt
