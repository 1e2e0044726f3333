#pragma once

#include <cstdint>
#include <vector>

namespace prefrank::reward {

struct MetricResult {
  double ndcg_at_k = 0.0;
  double map_at_k = 0.0;
  std::size_t k = 5;
};

/// Binary labels in ranked order. DCG uses rel_i / log2(i + 1) with 1-based
/// ranks; lists without positives score 0 and bump zero_positive_lists().
double ndcg_at_k(const std::vector<int>& ranked_labels, std::size_t k);
/// AP@k = sum_{i<=k} precision@i * rel_i / min(#relevant, k); 0 without
/// positives (counted by ndcg_at_k only, so a list is counted once).
double map_at_k(const std::vector<int>& ranked_labels, std::size_t k);

std::uint64_t zero_positive_lists();
void reset_zero_positive_lists();

/// Indices sorted by descending score, ties by ascending index.
std::vector<std::size_t> argsort_desc(const std::vector<double>& scores);
std::vector<int> ranked_labels(const std::vector<double>& scores, const std::vector<int>& labels);

MetricResult evaluate_ranking(const std::vector<double>& scores, const std::vector<int>& labels, std::size_t k = 5);

}  // namespace prefrank::reward
