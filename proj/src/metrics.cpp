#include "prefrank/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace prefrank::reward {

namespace {

std::atomic<std::uint64_t> g_zero_positive{0};

std::size_t count_positives(const std::vector<int>& labels, const char* who) {
  if (labels.empty()) throw std::invalid_argument(std::string(who) + ": empty label list");
  std::size_t n = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument(std::string(who) + ": labels must be binary");
    n += static_cast<std::size_t>(l);
  }
  return n;
}

void check_k(std::size_t k, const char* who) {
  if (k == 0) throw std::invalid_argument(std::string(who) + ": k must be >= 1");
}

}  // namespace

double ndcg_at_k(const std::vector<int>& ranked, std::size_t k) {
  check_k(k, "ndcg_at_k");
  const std::size_t pos = count_positives(ranked, "ndcg_at_k");
  if (pos == 0) {
    ++g_zero_positive;
    return 0.0;
  }
  double dcg = 0.0, idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i)
    if (ranked[i]) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  for (std::size_t i = 0; i < std::min(k, pos); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

double map_at_k(const std::vector<int>& ranked, std::size_t k) {
  check_k(k, "map_at_k");
  const std::size_t pos = count_positives(ranked, "map_at_k");
  if (pos == 0) return 0.0;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (!ranked[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(std::min(pos, k));
}

std::uint64_t zero_positive_lists() { return g_zero_positive.load(); }
void reset_zero_positive_lists() { g_zero_positive.store(0); }

std::vector<std::size_t> argsort_desc(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

std::vector<int> ranked_labels(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("ranked_labels: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
  }
  std::vector<int> out;
  out.reserve(labels.size());
  for (std::size_t i : argsort_desc(scores)) out.push_back(labels[i]);
  return out;
}

MetricResult evaluate_ranking(const std::vector<double>& scores, const std::vector<int>& labels, std::size_t k) {
  auto r = ranked_labels(scores, labels);
  return {ndcg_at_k(r, k), map_at_k(r, k), k};
}

}  // namespace prefrank::reward
