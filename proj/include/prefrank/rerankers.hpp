#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefrank/autodiff.hpp"
#include "prefrank/dataio.hpp"
#include "prefrank/knowledge.hpp"
#include "prefrank/metrics.hpp"
#include "prefrank/tensor.hpp"

namespace prefrank::rerank {

enum class Kind { Dlcm, Prm, SetRank };
const char* kind_name(Kind k);
Kind parse_kind(const std::string& name);

struct RerankerConfig {
  Kind kind = Kind::SetRank;
  std::size_t item_embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 2;
  std::size_t n_layers = 1;
  std::size_t list_len = 10;
  /// d_feat; 0 disables knowledge.
  std::size_t knowledge_dim = 0;
  /// Largest item id + 1.
  std::size_t n_items = 0;
  /// Largest user id + 1 (PRM only). Row 0 also serves unknown users.
  std::size_t n_users = 0;
  /// Text encoder settings, used when knowledge_dim > 0.
  std::size_t text_vocab_size = 0;
  std::size_t d_text = 64;
  std::size_t adapter_hidden = 64;

  void validate() const;
};

nlohmann::json config_to_json(const RerankerConfig& c);
RerankerConfig config_from_json(const nlohmann::json& j);

class RerankerModel {
 public:
  RerankerModel() = default;
  RerankerModel(const RerankerConfig& config, std::uint64_t seed);

  const RerankerConfig& config() const { return config_; }
  nk::ParamSet& params() { return params_; }
  const nk::ParamSet& params() const { return params_; }
  bool uses_knowledge() const { return config_.knowledge_dim > 0; }

  void save(const std::filesystem::path& path) const;
  static RerankerModel load(const std::filesystem::path& path);

 private:
  RerankerConfig config_;
  nk::ParamSet params_;
};

struct ScoredList {
  const data::CandidateList* list = nullptr;
  std::vector<double> scores;
  /// Argsort of scores, descending, ties by ascending original index.
  std::vector<std::size_t> permutation;
};

/// Scores for a batch of lists, shape [B * L, 1]; row b * L + i is item i of
/// list b. `features` holds one [1, d_feat]
/// Var per list when the model uses knowledge and must be empty otherwise.
nk::Var forward(nk::Graph& g, const RerankerModel& model, const std::vector<const data::CandidateList*>& lists,
                const std::vector<nk::Var>& features);

/// Single list with an optional precomputed [1, d_feat] knowledge vector.
ScoredList score(const RerankerModel& model, const data::CandidateList& list,
                 const std::optional<nk::Tensor>& knowledge = std::nullopt);

/// Scores every list. With knowledge, each list's user text goes through the
/// model's encoder and adapter; a user without an entry is an error.
std::vector<std::vector<double>> score_lists(const RerankerModel& model, const std::vector<data::CandidateList>& lists,
                                             const knowledge::KnowledgeMap* knowledge);

/// Scores one list under each of several knowledge texts, batched.
std::vector<std::vector<double>> score_with_texts(const RerankerModel& model, const data::CandidateList& list,
                                                  const std::vector<std::vector<policy::TokenId>>& texts);

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pointwise BCE of sigmoid(score) against labels. Returns the mean loss of
/// each epoch.
std::vector<double> train_reranker(RerankerModel& model, const std::vector<data::CandidateList>& lists,
                                   const knowledge::KnowledgeMap* knowledge, const TrainConfig& config);

struct EvalResult {
  double ndcg = 0.0;
  double map = 0.0;
  std::size_t users = 0;
  std::size_t lists = 0;
};

/// Metrics per list, averaged per user, then across users with equal weight.
EvalResult evaluate(const RerankerModel& model, const std::vector<data::CandidateList>& lists,
                    const knowledge::KnowledgeMap* knowledge, std::size_t k = 5);

}  // namespace prefrank::rerank
