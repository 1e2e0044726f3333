#include "prefrank/reward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace prefrank::reward {

namespace {

void sort_row(std::vector<ScoredResponse>& row) {
  std::sort(row.begin(), row.end(), [](const ScoredResponse& a, const ScoredResponse& b) {
    if (a.reward != b.reward) return a.reward > b.reward;
    return a.sample_index < b.sample_index;
  });
}

}  // namespace

double ResponseScoreTable::mean_best(std::size_t n) const {
  if (rows.empty()) throw std::invalid_argument("score table: no users");
  double total = 0.0;
  for (const auto& [u, row] : rows) {
    double best = -1.0;
    for (const auto& e : row)
      if (n == 0 || e.sample_index < n) best = std::max(best, e.reward);
    if (best < 0.0) throw std::invalid_argument("score table: user " + std::to_string(u) + " has no sample below " + std::to_string(n));
    total += best;
  }
  return total / static_cast<double>(rows.size());
}

double ResponseScoreTable::mean_reward() const {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [_, row] : rows)
    for (const auto& e : row) {
      total += e.reward;
      ++count;
    }
  if (count == 0) throw std::invalid_argument("score table: no entries");
  return total / static_cast<double>(count);
}

ListsByUser group_lists(const std::vector<data::CandidateList>& lists, data::SplitTag only) {
  ListsByUser out;
  for (const auto& l : lists)
    if (l.split == only) out[l.user_id].push_back(l);
  return out;
}

ResponseScoreTable score_responses(const rerank::RerankerModel& reranker, const ResponsesByUser& responses,
                                   const ListsByUser& eval_lists, std::size_t k) {
  if (!reranker.uses_knowledge()) throw std::invalid_argument("score_responses: reranker has knowledge_dim = 0");
  for (const auto& [u, lists] : eval_lists)
    for (const auto& l : lists)
      if (l.split == data::SplitTag::Test) {
        throw data::LeakageError("score_responses: test-tagged list for user " + std::to_string(u) +
                                 " passed as a reward evaluation list");
      }
  std::optional<std::size_t> n;
  for (const auto& [u, rs] : responses) {
    if (n && rs.size() != *n) {
      throw std::invalid_argument("score_responses: user " + std::to_string(u) + " has " + std::to_string(rs.size()) +
                                  " responses, expected " + std::to_string(*n));
    }
    n = rs.size();
  }
  ResponseScoreTable table;
  for (const auto& [u, rs] : responses) {
    auto it = eval_lists.find(u);
    if (it == eval_lists.end() || it->second.empty()) {
      ++table.skipped_users;
      continue;
    }
    std::vector<std::vector<policy::TokenId>> texts;
    texts.reserve(rs.size());
    for (const auto& r : rs) texts.push_back(r.tokens);
    std::vector<double> reward(rs.size(), 0.0);
    for (const auto& list : it->second) {
      auto scores = rerank::score_with_texts(reranker, list, texts);
      for (std::size_t i = 0; i < rs.size(); ++i) reward[i] += ndcg_at_k(ranked_labels(scores[i], list.labels), k);
    }
    auto& row = table.rows[u];
    for (std::size_t i = 0; i < rs.size(); ++i) {
      row.push_back({rs[i].sample_index, reward[i] / static_cast<double>(it->second.size())});
    }
    sort_row(row);
  }
  return table;
}

void attach_rewards(ResponsesByUser& responses, const ResponseScoreTable& table) {
  for (auto& [u, rs] : responses) {
    auto it = table.rows.find(u);
    if (it == table.rows.end()) continue;
    for (auto& r : rs)
      for (const auto& e : it->second)
        if (e.sample_index == r.sample_index) r.reward = e.reward;
  }
}

void write_score_table(const std::filesystem::path& path, const ResponseScoreTable& table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("score table: cannot write " + path.string());
  for (const auto& [u, row] : table.rows)
    for (const auto& e : row) out << nlohmann::json{{"user", u}, {"k", e.sample_index}, {"reward", e.reward}}.dump() << '\n';
}

ResponseScoreTable read_score_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("score table: cannot open " + path.string());
  ResponseScoreTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const double r = j.at("reward").get<double>();
      if (!std::isfinite(r)) throw std::runtime_error("non-finite reward");
      table.rows[j.at("user").get<data::UserId>()].push_back({j.at("k").get<std::size_t>(), r});
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (auto& [_, row] : table.rows) sort_row(row);
  return table;
}

}  // namespace prefrank::reward
