#include "prefrank/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace prefrank::policy {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

Vocab::Vocab() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) push(s);
}

void Vocab::push(const std::string& word) {
  ids_.emplace(word, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(word);
}

Vocab Vocab::build(const std::vector<std::string>& corpus, std::size_t max_size) {
  if (max_size <= kNumSpecial) throw std::invalid_argument("vocab: max_size must exceed the special tokens");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [w, _] : ranked) {
    if (v.size() >= max_size) break;
    if (!v.contains(w)) v.push(w);
  }
  return v;
}

TokenId Vocab::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocab: token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::tokenize(const std::string& text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::vector<TokenId> Vocab::tokenize_framed(const std::string& text) const {
  std::vector<TokenId> ids{kBos};
  for (TokenId t : tokenize(text)) ids.push_back(t);
  ids.push_back(kEos);
  return ids;
}

std::vector<TokenId> Vocab::encode_prompt(const std::string& text) const {
  std::vector<TokenId> ids{kBos};
  for (TokenId t : tokenize(text)) ids.push_back(t);
  return ids;
}

std::string Vocab::detokenize(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (t == kPad || t == kBos || t == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(t);
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("vocab: cannot write " + path.string());
  out << nlohmann::json{{"tokens", tokens_}}.dump() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocab: cannot open " + path.string());
  auto j = nlohmann::json::parse(in);
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < kNumSpecial || tokens[0] != "<pad>" || tokens[1] != "<bos>" || tokens[2] != "<eos>" ||
      tokens[3] != "<unk>") {
    throw std::runtime_error("vocab: " + path.string() + " does not start with the reserved tokens");
  }
  Vocab v;
  for (std::size_t i = kNumSpecial; i < tokens.size(); ++i) v.push(tokens[i]);
  return v;
}

}  // namespace prefrank::policy
