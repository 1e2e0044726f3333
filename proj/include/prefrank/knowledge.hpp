#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefrank/autodiff.hpp"
#include "prefrank/dataio.hpp"
#include "prefrank/rng.hpp"
#include "prefrank/tensor.hpp"
#include "prefrank/tokenizer.hpp"

namespace prefrank::knowledge {

class TemplateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Prompt text with {user_fields}, {history_items} and {genres}
/// placeholders. Any other {name} is rejected when the template is created.
class PromptTemplate {
 public:
  static PromptTemplate parse(std::string text, std::size_t max_history = 10);
  static PromptTemplate load(const std::filesystem::path& path, std::size_t max_history = 10);
  static PromptTemplate default_template(std::size_t max_history = 10);

  const std::string& text() const { return text_; }
  std::size_t max_history() const { return max_history_; }
  PromptTemplate with_max_history(std::size_t n) const;

 private:
  std::string text_;
  std::size_t max_history_ = 10;
};

/// Genres of the user's liked history items, most frequent first (ties by
/// name), at most `limit`.
std::vector<std::string> liked_genres(const data::UserProfile& profile, const data::Catalog& catalog,
                                      std::size_t limit = 5);

/// Deterministic rendering; history is truncated to the most recent
/// max_history entries and the demographic clause disappears when the
/// profile has no fields. Whitespace runs are collapsed.
std::string render_prompt(const PromptTemplate& tpl, const data::UserProfile& profile, const data::Catalog& catalog);

/// Shrinks the history window until the tokenized prompt (with BOS) fits
/// in max_tokens. Throws if even one history item does not fit.
std::string render_prompt_fitting(const PromptTemplate& tpl, const data::UserProfile& profile,
                                  const data::Catalog& catalog, const policy::Vocab& vocab, std::size_t max_tokens);

// ---------------------------------------------------------------------------

struct KnowledgeConfig {
  std::size_t vocab_size = 0;
  std::size_t d_text = 64;
  std::size_t adapter_hidden = 64;
  std::size_t d_feat = 32;
};

/// Adds "know.emb" [vocab, d_text] and the adapter weights
/// "know.a1_w/a1_b/a2_w/a2_b" to `params`.
void add_knowledge_params(nk::ParamSet& params, const KnowledgeConfig& config, nk::Rng& rng);

/// Number of encodings that fell back to the zero vector because the text
/// had no in-vocabulary token.
std::uint64_t degenerate_encodings();
void reset_degenerate_encodings();

/// Ids that contribute to the mean, sorted: everything except the special
/// tokens.
std::vector<std::size_t> content_tokens(const std::vector<policy::TokenId>& ids, std::size_t vocab_size);

/// Mean of embedding rows over in-vocab tokens, [1, d_text].
nk::Var encode_text(nk::Graph& g, nk::Var table, const std::vector<policy::TokenId>& ids);
nk::Tensor encode_text(const std::vector<policy::TokenId>& ids, const nk::Tensor& table);
nk::Tensor encode_text(const std::string& text, const policy::Vocab& vocab, const nk::Tensor& table);

/// tanh(v W1 + b1) W2 + b2, [1, d_feat].
nk::Var adapt(nk::Graph& g, const nk::ParamSet& params, nk::Var v);
nk::Tensor adapt(const nk::ParamSet& params, const nk::Tensor& v);

/// adapt(encode_text(ids)) on one graph.
nk::Var knowledge_feature(nk::Graph& g, const nk::ParamSet& params, const std::vector<policy::TokenId>& ids);

/// Per-user reasoning text, already tokenized.
using KnowledgeMap = std::map<data::UserId, std::vector<policy::TokenId>>;

struct KnowledgeRecord {
  data::UserId user = 0;
  std::size_t response_id = 0;
  std::string text;
};

void write_knowledge(const std::filesystem::path& path, const std::vector<KnowledgeRecord>& records);
std::vector<KnowledgeRecord> read_knowledge(const std::filesystem::path& path);
KnowledgeMap to_knowledge_map(const std::vector<KnowledgeRecord>& records, const policy::Vocab& vocab);

}  // namespace prefrank::knowledge
