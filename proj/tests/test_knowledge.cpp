#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "prefrank/checkpoint.hpp"
#include "prefrank/knowledge.hpp"
#include "support/fd_oracle.hpp"

using namespace prefrank;
using namespace prefrank::knowledge;
namespace fs = std::filesystem;

namespace {

data::Catalog small_catalog() {
  data::Catalog c;
  c.add({1, "toy story", {"animation", "comedy"}});
  c.add({2, "heat", {"action", "crime"}});
  c.add({3, "casino", {"drama", "crime"}});
  c.add({4, "alien", {"horror"}});
  return c;
}

data::UserProfile profile_with(std::vector<data::HistoryEntry> h, bool fields = true) {
  data::UserProfile p;
  p.user_id = 7;
  if (fields) p.fields = {{"gender", "f"}, {"age", "25"}, {"occupation", "4"}};
  p.history = std::move(h);
  return p;
}

policy::Vocab text_vocab() { return policy::Vocab::build({"comedy drama horror action crime the user likes"}); }

}  // namespace

TEST_CASE("prompt lists every history title in order") {
  auto cat = small_catalog();
  auto p = profile_with({{1, 1, 10}, {2, 0, 20}, {3, 1, 30}});
  auto text = render_prompt(PromptTemplate::default_template(50), p, cat);
  const auto a = text.find("toy story liked"), b = text.find("heat disliked"), c = text.find("casino liked");
  REQUIRE(a != std::string::npos);
  REQUIRE(b != std::string::npos);
  REQUIRE(c != std::string::npos);
  CHECK(a < b);
  CHECK(b < c);
  CHECK(text.find('{') == std::string::npos);
  CHECK(text.find("gender f") != std::string::npos);
  CHECK(render_prompt(PromptTemplate::default_template(50), p, cat) == text);
}

TEST_CASE("prompt drops the demographic clause without fields") {
  auto cat = small_catalog();
  auto text = render_prompt(PromptTemplate::default_template(), profile_with({{1, 1, 10}}, false), cat);
  CHECK(text.find("gender") == std::string::npos);
  CHECK(text.find("age") == std::string::npos);
  CHECK(text.find("  ") == std::string::npos);
}

TEST_CASE("prompt keeps only the most recent history items") {
  auto cat = small_catalog();
  auto p = profile_with({{1, 1, 10}, {2, 1, 20}, {3, 1, 30}, {4, 1, 40}});
  auto text = render_prompt(PromptTemplate::default_template(2), p, cat);
  CHECK(text.find("toy story") == std::string::npos);
  CHECK(text.find("heat") == std::string::npos);
  CHECK(text.find("casino liked , alien liked") != std::string::npos);
}

TEST_CASE("prompt rendering is injective on history order") {
  auto cat = small_catalog();
  auto a = render_prompt(PromptTemplate::default_template(), profile_with({{1, 1, 10}, {2, 1, 20}}), cat);
  auto b = render_prompt(PromptTemplate::default_template(), profile_with({{2, 1, 10}, {1, 1, 20}}), cat);
  CHECK(a != b);
}

TEST_CASE("liked genres are ranked by count") {
  auto cat = small_catalog();
  auto g = liked_genres(profile_with({{2, 1, 1}, {3, 1, 2}, {4, 0, 3}, {1, 1, 4}}), cat);
  REQUIRE(g.size() == 5);
  CHECK(g[0] == "crime");
  CHECK(std::find(g.begin(), g.end(), "horror") == g.end());
}

TEST_CASE("unknown placeholders fail at template load") {
  CHECK_THROWS_AS(PromptTemplate::parse("hello {user_name}"), TemplateError);
  CHECK_THROWS_AS(PromptTemplate::parse("hello {genres"), TemplateError);
  CHECK_NOTHROW(PromptTemplate::parse("{genres} {history_items} {user_fields}"));
  CHECK_THROWS_AS(render_prompt(PromptTemplate::default_template(), profile_with({}), small_catalog()),
                  std::invalid_argument);
}

TEST_CASE("fitting shrinks history until the prompt fits") {
  auto cat = small_catalog();
  auto p = profile_with({{1, 1, 10}, {2, 1, 20}, {3, 1, 30}, {4, 1, 40}});
  auto v = text_vocab();
  auto full = render_prompt(PromptTemplate::default_template(), p, cat);
  const std::size_t full_len = v.tokenize(full).size() + 1;
  auto fit = render_prompt_fitting(PromptTemplate::default_template(), p, cat, v, full_len - 1);
  CHECK(v.tokenize(fit).size() + 1 <= full_len - 1);
  CHECK(fit.find("toy story") == std::string::npos);
  CHECK_THROWS(render_prompt_fitting(PromptTemplate::default_template(), p, cat, v, 5));
}

TEST_CASE("bag-of-embeddings encoding") {
  auto v = text_vocab();
  nk::Rng rng(3);
  auto table = nk::random_normal({v.size(), 6}, 1.0, rng);
  auto one = encode_text("comedy", v, table);
  for (std::size_t i = 0; i < 6; ++i) CHECK(one[i] == table.at(static_cast<std::size_t>(v.id("comedy")), i));
  CHECK(encode_text("comedy drama", v, table) == encode_text("comedy drama comedy drama", v, table));
  CHECK(encode_text("the user likes comedy", v, table) == encode_text("comedy likes user the", v, table));

  reset_degenerate_encodings();
  auto zero = encode_text("qqq zzz", v, table);
  CHECK(zero == nk::Tensor({1, 6}, 0.0));
  CHECK(encode_text("", v, table) == nk::Tensor({1, 6}, 0.0));
  CHECK(degenerate_encodings() == 2);
}

TEST_CASE("adapter shapes and the zero adapter") {
  nk::ParamSet ps;
  nk::Rng rng(5);
  add_knowledge_params(ps, {20, 64, 64, 32}, rng);
  auto out = adapt(ps, nk::Tensor({1, 64}, 0.3));
  CHECK(out.shape() == nk::Shape{1, 32});
  CHECK(out.all_finite());
  for (auto& [_, t] : ps.tensors())
    if (&t != &ps.get("know.emb")) t.fill(0.0);
  CHECK(adapt(ps, nk::Tensor({1, 64}, 0.3)) == nk::Tensor({1, 32}, 0.0));
  CHECK_THROWS_AS(adapt(ps, nk::Tensor({1, 63}, 0.3)), nk::ShapeError);
}

TEST_CASE("encoder plus adapter gradient agrees with finite differences") {
  nk::ParamSet ps;
  nk::Rng rng(9);
  add_knowledge_params(ps, {12, 8, 6, 4}, rng);
  std::vector<policy::TokenId> ids{4, 7, 7, 11, 2};
  nk::Tensor target = nk::random_normal({1, 4}, 1.0, rng);
  auto loss_of = [&](nk::Graph& g) {
    auto d = nk::sub(knowledge_feature(g, ps, ids), g.constant(target));
    return nk::sum(nk::mul(d, d));
  };
  nk::Graph g;
  auto loss = loss_of(g);
  auto grads = g.backward(loss, ps);
  auto res = testing::check_gradients(ps, grads, [&] {
    nk::Graph h(false);
    return loss_of(h).value().item();
  });
  CHECK(res.max_rel_error < 1e-4);
  // rows of tokens not in the text receive no gradient
  CHECK(grads.get("know.emb").at(5, 0) == 0.0);
}

TEST_CASE("knowledge cache round-trip") {
  auto path = fs::temp_directory_path() / "prefrank_knowledge.jsonl";
  std::vector<KnowledgeRecord> recs{{1, 0, "the user likes comedy"}, {2, 3, "drama"}};
  write_knowledge(path, recs);
  auto back = read_knowledge(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].response_id == 3);
  CHECK(back[0].text == recs[0].text);
  auto v = text_vocab();
  auto m = to_knowledge_map(back, v);
  CHECK(m.at(2) == std::vector<policy::TokenId>{v.id("drama")});
  recs.push_back({1, 1, "again"});
  CHECK_THROWS(to_knowledge_map(recs, v));
}
