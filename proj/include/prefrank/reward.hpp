#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "prefrank/dataio.hpp"
#include "prefrank/metrics.hpp"
#include "prefrank/policy.hpp"
#include "prefrank/rerankers.hpp"

namespace prefrank::reward {

struct ScoredResponse {
  std::size_t sample_index = 0;
  double reward = 0.0;
  friend bool operator==(const ScoredResponse&, const ScoredResponse&) = default;
};

struct ResponseScoreTable {
  /// Per user: descending reward, ties by ascending sample_index.
  std::map<data::UserId, std::vector<ScoredResponse>> rows;
  std::size_t skipped_users = 0;

  /// Mean over users of the best reward among samples 0..n-1 (all when n = 0).
  double mean_best(std::size_t n = 0) const;
  double mean_reward() const;
};

using ResponsesByUser = std::map<data::UserId, std::vector<policy::ReasoningResponse>>;
using ListsByUser = std::map<data::UserId, std::vector<data::CandidateList>>;

ListsByUser group_lists(const std::vector<data::CandidateList>& lists, data::SplitTag only);

/// reward(u, k) = NDCG@k of the knowledge-augmented reranker on u's eval
/// lists (averaged when there are several) with response k as the user's
/// knowledge. Users without eval lists are skipped and counted. Every user
/// must carry the same number of responses; test-tagged lists are refused.
ResponseScoreTable score_responses(const rerank::RerankerModel& reranker, const ResponsesByUser& responses,
                                   const ListsByUser& eval_lists, std::size_t k = 5);

/// Copies table rewards onto the matching responses.
void attach_rewards(ResponsesByUser& responses, const ResponseScoreTable& table);

void write_score_table(const std::filesystem::path& path, const ResponseScoreTable& table);
ResponseScoreTable read_score_table(const std::filesystem::path& path);

}  // namespace prefrank::reward
