#include "prefrank/knowledge.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "prefrank/checkpoint.hpp"

namespace prefrank::knowledge {

using nk::Tensor;
using nk::Var;

namespace {

const char* const kPlaceholders[] = {"user_fields", "history_items", "genres"};

std::atomic<std::uint64_t> g_degenerate{0};

std::string collapse_spaces(const std::string& s) {
  std::string out;
  bool space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out.push_back(' ');
    space = false;
    out.push_back(ch);
  }
  return out;
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  return s;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

PromptTemplate PromptTemplate::parse(std::string text, std::size_t max_history) {
  if (max_history == 0) throw TemplateError("prompt template: max_history must be positive");
  for (std::size_t pos = 0; (pos = text.find('{', pos)) != std::string::npos;) {
    const auto close = text.find('}', pos);
    if (close == std::string::npos) throw TemplateError("prompt template: unterminated placeholder at offset " + std::to_string(pos));
    const std::string name = text.substr(pos + 1, close - pos - 1);
    if (std::find(std::begin(kPlaceholders), std::end(kPlaceholders), name) == std::end(kPlaceholders)) {
      throw TemplateError("prompt template: unknown placeholder {" + name + "}");
    }
    pos = close + 1;
  }
  PromptTemplate t;
  t.text_ = std::move(text);
  t.max_history_ = max_history;
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path, std::size_t max_history) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("prompt template: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), max_history);
}

PromptTemplate PromptTemplate::default_template(std::size_t max_history) {
  return parse(
      "task : infer the movie preferences of a user . {user_fields} watch history : {history_items} . "
      "genres of liked movies : {genres} . summarize the user preferences :",
      max_history);
}

PromptTemplate PromptTemplate::with_max_history(std::size_t n) const { return parse(text_, n); }

std::vector<std::string> liked_genres(const data::UserProfile& profile, const data::Catalog& catalog,
                                      std::size_t limit) {
  std::map<std::string, std::size_t> counts;
  for (const auto& h : profile.history) {
    if (h.label != 1 || !catalog.contains(h.item)) continue;
    for (const auto& g : catalog.at(h.item).genres) ++counts[g];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (const auto& [g, _] : ranked) {
    if (out.size() >= limit) break;
    out.push_back(g);
  }
  return out;
}

std::string render_prompt(const PromptTemplate& tpl, const data::UserProfile& profile, const data::Catalog& catalog) {
  if (profile.history.empty()) {
    throw std::invalid_argument("render_prompt: user " + std::to_string(profile.user_id) + " has an empty history");
  }
  std::string fields;
  if (!profile.fields.empty()) {
    std::vector<std::string> parts;
    for (const auto& [k, v] : profile.fields) parts.push_back(k + " " + v);
    fields = "user profile : " + join(parts, " , ") + " .";
  }
  const std::size_t n = profile.history.size();
  const std::size_t first = n > tpl.max_history() ? n - tpl.max_history() : 0;
  std::vector<std::string> items;
  for (std::size_t i = first; i < n; ++i) {
    const auto& h = profile.history[i];
    const std::string title = catalog.contains(h.item) ? catalog.at(h.item).title : "item" + std::to_string(h.item);
    items.push_back(title + (h.label ? " liked" : " disliked"));
  }
  auto genres = liked_genres(profile, catalog);
  std::string out = tpl.text();
  out = replace_all(out, "{user_fields}", fields);
  out = replace_all(out, "{history_items}", join(items, " , "));
  out = replace_all(out, "{genres}", genres.empty() ? "none" : join(genres, " , "));
  return collapse_spaces(out);
}

std::string render_prompt_fitting(const PromptTemplate& tpl, const data::UserProfile& profile,
                                  const data::Catalog& catalog, const policy::Vocab& vocab, std::size_t max_tokens) {
  for (std::size_t h = tpl.max_history(); h >= 1; --h) {
    auto text = render_prompt(tpl.with_max_history(h), profile, catalog);
    if (vocab.tokenize(text).size() + 1 <= max_tokens) return text;
  }
  throw std::length_error("render_prompt: prompt for user " + std::to_string(profile.user_id) +
                          " does not fit in " + std::to_string(max_tokens) + " tokens");
}

// ---------------------------------------------------------------------------

void add_knowledge_params(nk::ParamSet& params, const KnowledgeConfig& c, nk::Rng& rng) {
  if (c.vocab_size == 0 || c.d_text == 0 || c.d_feat == 0 || c.adapter_hidden == 0) {
    throw std::invalid_argument("knowledge: vocab_size, d_text, adapter_hidden and d_feat must be positive");
  }
  params.add("know.emb", nk::random_normal({c.vocab_size, c.d_text}, 0.1, rng));
  params.add("know.a1_w", nk::random_normal({c.d_text, c.adapter_hidden}, 1.0 / std::sqrt(double(c.d_text)), rng));
  params.add("know.a1_b", Tensor({1, c.adapter_hidden}, 0.0));
  params.add("know.a2_w",
             nk::random_normal({c.adapter_hidden, c.d_feat}, 1.0 / std::sqrt(double(c.adapter_hidden)), rng));
  params.add("know.a2_b", Tensor({1, c.d_feat}, 0.0));
}

std::uint64_t degenerate_encodings() { return g_degenerate.load(); }
void reset_degenerate_encodings() { g_degenerate.store(0); }

std::vector<std::size_t> content_tokens(const std::vector<policy::TokenId>& ids, std::size_t vocab_size) {
  std::vector<std::size_t> out;
  for (auto t : ids)
    if (t >= policy::kNumSpecial && static_cast<std::size_t>(t) < vocab_size) out.push_back(static_cast<std::size_t>(t));
  // sorted so the mean is bit-identical under any token order
  std::sort(out.begin(), out.end());
  return out;
}

Var encode_text(nk::Graph& g, Var table, const std::vector<policy::TokenId>& ids) {
  auto idx = content_tokens(ids, table.rows());
  if (idx.empty()) {
    ++g_degenerate;
    return g.constant(Tensor({1, table.cols()}, 0.0));
  }
  return nk::mean(nk::embedding(table, idx), 0);
}

Tensor encode_text(const std::vector<policy::TokenId>& ids, const Tensor& table) {
  nk::Graph g(false);
  return encode_text(g, g.constant(table), ids).value();
}

Tensor encode_text(const std::string& text, const policy::Vocab& vocab, const Tensor& table) {
  return encode_text(vocab.tokenize(text), table);
}

Var adapt(nk::Graph& g, const nk::ParamSet& params, Var v) {
  const auto& w1 = params.get("know.a1_w");
  if (v.rows() != 1 || v.cols() != w1.rows()) {
    throw nk::ShapeError("adapt: expected a [1, " + std::to_string(w1.rows()) + "] vector, got " + nk::shape_str(v.shape()));
  }
  Var h = nk::tanh(nk::add(nk::matmul(v, g.param(params, "know.a1_w")), g.param(params, "know.a1_b")));
  return nk::add(nk::matmul(h, g.param(params, "know.a2_w")), g.param(params, "know.a2_b"));
}

Tensor adapt(const nk::ParamSet& params, const Tensor& v) {
  nk::Graph g(false);
  Tensor row = v.rank() == 1 ? Tensor({1, v.size()}, v.vec()) : v;
  return adapt(g, params, g.constant(row)).value();
}

Var knowledge_feature(nk::Graph& g, const nk::ParamSet& params, const std::vector<policy::TokenId>& ids) {
  return adapt(g, params, encode_text(g, g.param(params, "know.emb"), ids));
}

void write_knowledge(const std::filesystem::path& path, const std::vector<KnowledgeRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("knowledge: cannot write " + path.string());
  for (const auto& r : records)
    out << nlohmann::json{{"user", r.user}, {"response_id", r.response_id}, {"text", r.text}}.dump() << '\n';
}

std::vector<KnowledgeRecord> read_knowledge(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("knowledge: cannot open " + path.string());
  std::vector<KnowledgeRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("user").get<data::UserId>(), j.at("response_id").get<std::size_t>(),
                     j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

KnowledgeMap to_knowledge_map(const std::vector<KnowledgeRecord>& records, const policy::Vocab& vocab) {
  KnowledgeMap m;
  for (const auto& r : records) {
    if (!m.emplace(r.user, vocab.tokenize(r.text)).second) {
      throw std::invalid_argument("knowledge: more than one record for user " + std::to_string(r.user));
    }
  }
  return m;
}

}  // namespace prefrank::knowledge
