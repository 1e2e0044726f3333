#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "prefrank/reward.hpp"
#include "support/worlds.hpp"

using namespace prefrank;
using namespace prefrank::reward;
namespace fs = std::filesystem;

namespace {

// Direct-formula oracles, written without the library's helpers.
double oracle_ndcg(const std::vector<int>& labels, std::size_t k) {
  double dcg = 0.0, idcg = 0.0;
  std::vector<int> ideal = labels;
  std::sort(ideal.rbegin(), ideal.rend());
  for (std::size_t i = 0; i < std::min(k, labels.size()); ++i) {
    dcg += labels[i] / std::log2(static_cast<double>(i) + 2.0);
    idcg += ideal[i] / std::log2(static_cast<double>(i) + 2.0);
  }
  return idcg == 0.0 ? 0.0 : dcg / idcg;
}

double oracle_map(const std::vector<int>& labels, std::size_t k) {
  const int total = std::accumulate(labels.begin(), labels.end(), 0);
  if (total == 0) return 0.0;
  double sum = 0.0;
  int hits = 0;
  for (std::size_t i = 0; i < std::min(k, labels.size()); ++i) {
    if (labels[i]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / std::min<double>(total, static_cast<double>(k));
}

std::vector<int> bits(unsigned mask, std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (mask >> i) & 1u;
  return v;
}

}  // namespace

TEST_CASE("hand-worked metric values") {
  CHECK(ndcg_at_k({1, 1, 0, 0, 0}, 5) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ndcg_at_k({1, 0, 1, 0, 0}, 5) == doctest::Approx(0.91972).epsilon(1e-5));
  CHECK(ndcg_at_k({0, 0, 0, 0, 0}, 5) == 0.0);
  CHECK(map_at_k({1, 1, 0, 0, 0}, 5) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(map_at_k({1, 0, 1, 0, 0}, 5) == doctest::Approx(0.83333).epsilon(1e-5));
  CHECK(map_at_k({0, 1, 0, 0, 0}, 5) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("metric errors and the zero-positive counter") {
  CHECK_THROWS(ndcg_at_k({}, 5));
  CHECK_THROWS(map_at_k({}, 5));
  CHECK_THROWS(ndcg_at_k({1, 0}, 0));
  CHECK_THROWS(ndcg_at_k({1, 2}, 5));
  reset_zero_positive_lists();
  evaluate_ranking({0.3, 0.1}, {0, 0});
  CHECK(zero_positive_lists() == 1);
}

TEST_CASE("brute force over every label vector of length 10") {
  for (unsigned mask = 0; mask < 1024; ++mask) {
    auto l = bits(mask, 10);
    CHECK(std::abs(ndcg_at_k(l, 5) - oracle_ndcg(l, 5)) < 1e-12);
    CHECK(std::abs(map_at_k(l, 5) - oracle_map(l, 5)) < 1e-12);
    const int pos = std::accumulate(l.begin(), l.end(), 0);
    const std::size_t need = std::min<std::size_t>(5, static_cast<std::size_t>(pos));
    bool top_all_pos = pos > 0;
    for (std::size_t i = 0; i < need; ++i) top_all_pos = top_all_pos && l[i] == 1;
    CHECK((std::abs(ndcg_at_k(l, 5) - 1.0) < 1e-12) == top_all_pos);
  }
}

TEST_CASE("promoting a positive never lowers NDCG") {
  for (unsigned mask = 0; mask < 1024; ++mask) {
    auto l = bits(mask, 10);
    for (std::size_t i = 0; i + 1 < l.size(); ++i) {
      if (l[i] == 0 && l[i + 1] == 1) {
        auto s = l;
        std::swap(s[i], s[i + 1]);
        CHECK(ndcg_at_k(s, 5) >= ndcg_at_k(l, 5) - 1e-15);
      }
    }
  }
}

TEST_CASE("metrics depend only on the induced order") {
  nk::Rng rng(4);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> s(10);
    std::vector<int> labels(10);
    for (std::size_t i = 0; i < 10; ++i) {
      s[i] = rng.normal();
      labels[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    std::vector<double> t(10);
    for (std::size_t i = 0; i < 10; ++i) t[i] = std::exp(3.0 * s[i]) + 7.0;
    auto a = evaluate_ranking(s, labels), b = evaluate_ranking(t, labels);
    CHECK(a.ndcg_at_k == b.ndcg_at_k);
    CHECK(a.map_at_k == b.map_at_k);
  }
}

TEST_CASE("random scoring matches the exact expectation") {
  // Exact mean NDCG@5 over all C(10,2) placements of two positives.
  double exact = 0.0;
  int placements = 0;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = i + 1; j < 10; ++j) {
      std::vector<int> l(10, 0);
      l[i] = l[j] = 1;
      exact += oracle_ndcg(l, 5);
      ++placements;
    }
  exact /= placements;
  nk::Rng rng(11);
  std::vector<int> labels{1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
  double mean = 0.0;
  const int lists = 10000;
  for (int r = 0; r < lists; ++r) {
    std::vector<double> s(10);
    for (auto& v : s) v = rng.uniform();
    mean += evaluate_ranking(s, labels).ndcg_at_k;
  }
  mean /= lists;
  INFO("exact " << exact << " sampled " << mean);
  CHECK(std::abs(mean - exact) < 0.01);
}

namespace {

struct RewardFixture {
  testing::ListWorld w = testing::make_list_world(90, 0.0, 5);
  policy::Vocab vocab = testing::genre_vocab();
  rerank::RerankerModel model;

  RewardFixture() {
    model = rerank::RerankerModel(testing::config_for(w, rerank::Kind::SetRank, 16, vocab.size()), 1);
    auto km = testing::genre_knowledge(w, vocab, true);
    rerank::TrainConfig tc;
    tc.epochs = 15;
    tc.seed = 2;
    rerank::train_reranker(model, w.train, &km, tc);
  }

  policy::ReasoningResponse response(data::UserId u, std::size_t k, const std::vector<policy::TokenId>& tokens) const {
    policy::ReasoningResponse r;
    r.user_id = u;
    r.sample_index = k;
    r.tokens = tokens;
    r.text = vocab.detokenize(tokens);
    return r;
  }
};

}  // namespace

TEST_CASE("reward separates informative from shuffled knowledge") {
  RewardFixture f;
  auto truthful = testing::genre_knowledge(f.w, f.vocab, true);
  auto wrong = testing::genre_knowledge(f.w, f.vocab, false);
  ResponsesByUser responses;
  for (data::UserId u : f.w.split.train) {
    responses[u].push_back(f.response(u, 0, truthful.at(u)));
    responses[u].push_back(f.response(u, 1, wrong.at(u)));
    responses[u].push_back(f.response(u, 2, truthful.at(u)));
  }
  auto valid = group_lists(f.w.valid, data::SplitTag::Valid);
  auto table = score_responses(f.model, responses, valid);
  REQUIRE(table.rows.size() >= 50);
  double good = 0.0, bad = 0.0;
  for (const auto& [u, row] : table.rows) {
    REQUIRE(row.size() == 3);
    for (std::size_t i = 1; i < row.size(); ++i) {
      CHECK(row[i - 1].reward >= row[i].reward);
      if (row[i - 1].reward == row[i].reward) CHECK(row[i - 1].sample_index < row[i].sample_index);
    }
    double r0 = 0.0, r1 = 0.0, r2 = 0.0;
    for (const auto& e : row) {
      if (e.sample_index == 0) r0 = e.reward;
      if (e.sample_index == 1) r1 = e.reward;
      if (e.sample_index == 2) r2 = e.reward;
    }
    CHECK(r0 == r2);  // identical texts, identical rewards
    good += r0;
    bad += r1;
  }
  good /= table.rows.size();
  bad /= table.rows.size();
  INFO("informative " << good << " shuffled " << bad);
  CHECK(good > bad);
  CHECK(table.skipped_users == responses.size() - table.rows.size());
}

TEST_CASE("ten responses give ten entries, caches round-trip") {
  RewardFixture f;
  auto truthful = testing::genre_knowledge(f.w, f.vocab, true);
  ResponsesByUser responses;
  nk::Rng rng(3);
  for (std::size_t i = 0; i < 5; ++i) {
    data::UserId u = f.w.valid[i].user_id;
    for (std::size_t k = 0; k < 10; ++k) {
      auto t = truthful.at(u);
      t.push_back(static_cast<policy::TokenId>(4 + rng.below(f.vocab.size() - 4)));
      responses[u].push_back(f.response(u, k, t));
    }
  }
  auto table = score_responses(f.model, responses, group_lists(f.w.valid, data::SplitTag::Valid));
  for (const auto& [_, row] : table.rows) {
    CHECK(row.size() == 10);
    for (const auto& e : row) CHECK(std::isfinite(e.reward));
  }
  CHECK(table.mean_best() >= table.mean_best(1));
  CHECK(table.mean_best() >= table.mean_reward());

  auto path = fs::temp_directory_path() / "prefrank_scores.jsonl";
  write_score_table(path, table);
  CHECK(read_score_table(path).rows == table.rows);

  attach_rewards(responses, table);
  for (const auto& [_, rs] : responses)
    for (const auto& r : rs) CHECK(r.reward.has_value());
}

TEST_CASE("reward scoring refuses test lists and ragged inputs") {
  RewardFixture f;
  auto truthful = testing::genre_knowledge(f.w, f.vocab, true);
  ResponsesByUser responses;
  data::UserId u = f.w.test[0].user_id;
  responses[u].push_back(f.response(u, 0, truthful.at(u)));
  ListsByUser leaked;
  leaked[u].push_back(f.w.test[0]);
  CHECK_THROWS_AS(score_responses(f.model, responses, leaked), data::LeakageError);

  data::UserId v = f.w.valid[0].user_id;
  responses[v].push_back(f.response(v, 0, truthful.at(v)));
  responses[v].push_back(f.response(v, 1, truthful.at(v)));
  CHECK_THROWS_AS(score_responses(f.model, responses, group_lists(f.w.valid, data::SplitTag::Valid)),
                  std::invalid_argument);

  rerank::RerankerModel plain(testing::config_for(f.w, rerank::Kind::SetRank), 0);
  CHECK_THROWS(score_responses(plain, {}, {}));
}
