#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "prefrank/policy.hpp"
#include "support/fd_oracle.hpp"

using namespace prefrank;
using namespace prefrank::policy;
namespace fs = std::filesystem;

namespace {

Vocab small_vocab() {
  return Vocab::build({"the user prefers comedy and drama films .", "this user enjoys horror movies the most .",
                       "recommend action movies to this user ."});
}

PolicyConfig tiny_config(std::size_t vocab_size) {
  PolicyConfig c;
  c.vocab_size = vocab_size;
  c.model_dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_dim = 24;
  c.context = 48;
  c.init_std = 0.3;
  return c;
}

std::vector<TokenId> prompt_of(const Vocab& v, const std::string& text) {
  std::vector<TokenId> p{kBos};
  for (TokenId t : v.tokenize(text)) p.push_back(t);
  return p;
}

}  // namespace

TEST_CASE("tokenizer round-trips in-vocab text and maps unknown words to UNK") {
  Vocab v = small_vocab();
  CHECK(v.detokenize(v.tokenize("comedy drama")) == "comedy drama");
  CHECK(v.detokenize(v.tokenize("The user PREFERS comedy.")) == "the user prefers comedy .");
  CHECK(v.tokenize("zyzzyva") == std::vector<TokenId>{kUnk});
  CHECK(v.tokenize_framed("") == std::vector<TokenId>{kBos, kEos});
  CHECK(v.token(kPad) == "<pad>");
  CHECK(v.id("<eos>") == kEos);
}

TEST_CASE("vocab is bijective, capped and survives save/load") {
  Vocab v = small_vocab();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
    seen.insert(v.token(static_cast<TokenId>(i)));
  }
  CHECK(seen.size() == v.size());
  CHECK(Vocab::build({"a b c d e f g"}, 6).size() == 6);
  auto path = fs::temp_directory_path() / "prefrank_policy_vocab.json";
  v.save(path);
  CHECK(Vocab::load(path) == v);
}

TEST_CASE("uniform-logit model gives -T ln V") {
  Vocab v = small_vocab();
  for (bool mask : {false, true}) {
    auto cfg = tiny_config(v.size());
    cfg.mask_special_tokens = mask;
    PolicyModel m(cfg, 1);
    m.params().get("tok_emb").fill(0.0);
    auto prompt = prompt_of(v, "the user");
    std::vector<TokenId> resp{v.id("comedy"), v.id("films"), kEos};
    const double V = static_cast<double>(mask ? v.size() - 3 : v.size());
    const double expect = -3.0 * std::log(V);
    CHECK(sequence_logprob(m, prompt, resp) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("graph logprob matches the step-by-step decoder") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 3);
  auto prompt = prompt_of(v, "this user enjoys horror");
  std::vector<TokenId> resp = v.tokenize("the user prefers comedy and drama films .");
  resp.push_back(kEos);
  const double graph = sequence_logprob(m, prompt, resp);
  const double steps = stepwise_logprob(m, prompt, resp);
  // independent product of per-step probabilities
  StepDecoder dec(m);
  for (TokenId t : prompt) dec.feed(t);
  double prod = 1.0;
  for (std::size_t i = 0; i < resp.size(); ++i) {
    prod *= std::exp(dec.next_logprobs()[static_cast<std::size_t>(resp[i])]);
    if (i + 1 < resp.size()) dec.feed(resp[i]);
  }
  CHECK(std::abs(graph - steps) / std::abs(steps) < 1e-10);
  CHECK(std::abs(std::exp(graph) - prod) / prod < 1e-10);
  CHECK(graph < 0.0);
}

TEST_CASE("next-token distributions sum to one") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 5);
  StepDecoder dec(m);
  for (TokenId t : prompt_of(v, "recommend action movies")) {
    dec.feed(t);
    double s = 0.0;
    for (double lp : dec.next_logprobs()) s += std::exp(lp);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  nk::Graph g(false);
  auto logits = forward_logits(g, m, prompt_of(v, "recommend action movies"));
  auto p = nk::softmax(logits, 1).value();
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) s += p.at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("sequence logprob gradient agrees with finite differences") {
  Vocab v = small_vocab();
  auto cfg = tiny_config(v.size());
  cfg.model_dim = 8;
  cfg.ffn_dim = 12;
  cfg.context = 16;
  cfg.n_layers = 1;
  PolicyModel m(cfg, 11);
  auto prompt = prompt_of(v, "the user");
  std::vector<TokenId> resp{v.id("prefers"), v.id("drama"), kEos};
  nk::Graph g;
  auto lp = sequence_logprob(g, m, prompt, resp);
  auto grads = g.backward(lp, m.params());
  // The key bias only shifts each score row by a constant, so its true
  // gradient is zero and the numeric estimate is pure rounding noise.
  auto res = testing::check_gradients(m.params(), grads, [&] { return sequence_logprob(m, prompt, resp); }, 1e-5, 24,
                                      7, 1e-7);
  INFO("worst " << res.worst_param << "[" << res.worst_index << "] " << res.worst_analytic << " vs "
                << res.worst_numeric);
  CHECK(res.max_rel_error < 1e-4);
  CHECK(res.max_abs_error_below_floor < 1e-9);
}

TEST_CASE("greedy decoding is deterministic and locally optimal") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 7);
  auto prompt = prompt_of(v, "the user prefers");
  SampleConfig greedy{8, 0.0};
  auto a = sample_n(m, v, prompt, 1, greedy, 1, 42);
  auto b = sample_n(m, v, prompt, 1, greedy, 99, 42);
  REQUIRE(a.size() == 1);
  CHECK(a[0].tokens == b[0].tokens);
  CHECK(a[0].text == b[0].text);
  const auto& y = a[0].tokens;
  CHECK(a[0].logprob_policy == doctest::Approx(sequence_logprob(m, prompt, y)).epsilon(1e-10));
  for (std::size_t pos = 0; pos < y.size(); ++pos) {
    for (TokenId alt = 0; alt < static_cast<TokenId>(v.size()); ++alt) {
      if (alt == y[pos]) continue;
      // compare the step-wise term at the substituted position
      std::vector<TokenId> ctx(prompt);
      ctx.insert(ctx.end(), y.begin(), y.begin() + static_cast<std::ptrdiff_t>(pos));
      const double keep = sequence_logprob(m, ctx, {y[pos]});
      const double swap = sequence_logprob(m, ctx, {alt});
      CHECK(keep >= swap);
    }
  }
}

TEST_CASE("sample_n draws reproducible independent streams") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 13);
  auto prompt = prompt_of(v, "this user enjoys");
  SampleConfig cfg{12, 1.0};
  auto a = sample_n(m, v, prompt, 10, cfg, 5, 3);
  auto b = sample_n(m, v, prompt, 10, cfg, 5, 3);
  REQUIRE(a.size() == 10);
  std::set<std::size_t> idx;
  std::set<std::vector<TokenId>> distinct;
  for (std::size_t k = 0; k < 10; ++k) {
    idx.insert(a[k].sample_index);
    distinct.insert(a[k].tokens);
    CHECK(a[k].tokens == b[k].tokens);
    CHECK(a[k].tokens.size() <= cfg.max_new_tokens);
    CHECK(a[k].logprob_policy <= 0.0);
    CHECK(std::isfinite(a[k].logprob_policy));
    CHECK(a[k].logprob_policy == doctest::Approx(sequence_logprob(m, prompt, a[k].tokens)).epsilon(1e-10));
  }
  CHECK(idx.size() == 10);
  CHECK(distinct.size() > 1);
  // sample k does not depend on how many samples were requested
  auto one = sample_n(m, v, prompt, 4, cfg, 5, 3);
  CHECK(one[3].tokens == a[3].tokens);
}

TEST_CASE("near-zero temperature reproduces greedy") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 17);
  auto prompt = prompt_of(v, "recommend");
  auto greedy = sample_n(m, v, prompt, 1, {10, 0.0}, 0, 1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cold = sample_n(m, v, prompt, 3, {10, 1e-6}, seed, 1);
    for (const auto& r : cold) CHECK(r.tokens == greedy[0].tokens);
  }
}

TEST_CASE("single-word vocabulary only ever emits that word") {
  Vocab v = Vocab::build({"comedy"});
  REQUIRE(v.size() == 5);
  PolicyModel m(tiny_config(v.size()), 19);
  auto res = sample_n(m, v, {kBos}, 10, {6, 1.0}, 2, 0);
  for (const auto& r : res)
    for (TokenId t : r.tokens) CHECK((t == v.id("comedy") || t == kEos));
}

TEST_CASE("context overflow is rejected before generation") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 23);
  std::vector<TokenId> long_prompt(40, v.id("user"));
  long_prompt[0] = kBos;
  CHECK_THROWS_AS(sample_n(m, v, long_prompt, 1, {9, 0.8}, 0, 0), ContextOverflow);
  std::vector<TokenId> resp(9, v.id("comedy"));
  CHECK_THROWS_AS(sequence_logprob(m, long_prompt, resp), ContextOverflow);
  CHECK_NOTHROW(sequence_logprob(m, long_prompt, std::vector<TokenId>(8, v.id("comedy"))));
}

TEST_CASE("policy checkpoint and response cache round-trip") {
  Vocab v = small_vocab();
  PolicyModel m(tiny_config(v.size()), 29);
  auto path = fs::temp_directory_path() / "prefrank_policy.ckpt";
  m.save(path);
  auto back = PolicyModel::load(path);
  CHECK(back == m);
  CHECK(back.config().context == m.config().context);
  auto prompt = prompt_of(v, "the user");
  auto rs = sample_n(m, v, prompt, 3, {8, 0.8}, 1, 9);
  auto rp = fs::temp_directory_path() / "prefrank_responses.jsonl";
  write_responses(rp, rs);
  auto rs2 = read_responses(rp, v);
  REQUIRE(rs2.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rs2[i].text == rs[i].text);
    CHECK(rs2[i].logprob_policy == rs[i].logprob_policy);
    CHECK(rs2[i].sample_index == i);
  }
}

TEST_CASE("warm start lowers training perplexity for three epochs") {
  std::vector<std::string> texts;
  for (std::size_t u = 0; u < 40; ++u) {
    std::vector<std::string> g{u % 2 ? "comedy" : "horror"};
    if (u % 3 == 0) g.push_back("drama");
    texts.push_back(preference_sentence(g, u));
  }
  texts.push_back("history : item1 liked , item2 disliked");
  Vocab v = Vocab::build(texts);
  auto cfg = tiny_config(v.size());
  PolicyModel m(cfg, 31);
  std::vector<LmExample> corpus;
  for (std::size_t u = 0; u < 40; ++u) {
    LmExample ex;
    ex.prompt = prompt_of(v, u % 2 ? "history : item1 liked" : "history : item2 liked");
    ex.target = v.tokenize(texts[u]);
    ex.target.push_back(kEos);
    corpus.push_back(ex);
  }
  WarmStartConfig wc;
  wc.epochs = 3;
  wc.learning_rate = 1e-3;
  wc.batch_size = 8;
  wc.seed = 4;
  auto ppl = warm_start(m, corpus, wc);
  REQUIRE(ppl.size() == 3);
  CHECK(ppl[1] < ppl[0]);
  CHECK(ppl[2] < ppl[1]);
}

TEST_CASE("preference sentences use three templates") {
  std::set<std::string> s;
  for (std::size_t k = 0; k < 6; ++k) s.insert(preference_sentence({"comedy", "drama"}, k));
  CHECK(s.size() == 3);
  CHECK(preference_sentence({"comedy", "drama"}, 0) == "the user prefers comedy and drama films .");
}
