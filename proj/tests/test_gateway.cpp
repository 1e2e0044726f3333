#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "prefrank/gateway.hpp"

using namespace prefrank;
using namespace prefrank::llm;
namespace fs = std::filesystem;

namespace {

// Scripted transport: replays canned results and records what was sent.
struct FakeTransport : Transport {
  std::vector<HttpResult> script;
  std::size_t calls = 0;
  std::vector<std::string> bodies;
  std::vector<std::map<std::string, std::string>> headers;
  std::mutex mu;

  HttpResult post(const std::string&, const std::map<std::string, std::string>& h, const std::string& body,
                  double) override {
    std::lock_guard lock(mu);
    bodies.push_back(body);
    headers.push_back(h);
    const auto& r = script[std::min(calls, script.size() - 1)];
    ++calls;
    return r;
  }
};

std::string choices(const std::vector<std::string>& texts) {
  nlohmann::json j;
  j["choices"] = nlohmann::json::array();
  for (const auto& t : texts) j["choices"].push_back({{"message", {{"role", "assistant"}, {"content", t}}}});
  return j.dump();
}

RemoteConfig remote_cfg() {
  RemoteConfig c;
  c.endpoint = "http://127.0.0.1:9/v1/chat/completions";
  c.model = "m";
  c.token_env = "PREFRANK_TEST_TOKEN";
  c.retry_budget = 3;
  c.backoff_base_seconds = 0.1;
  c.jitter_seed = 7;
  return c;
}

GenRequest req(const std::string& prompt, std::size_t n, double t = 0.8) {
  GenRequest r;
  r.prompt = prompt;
  r.n = n;
  r.temperature = t;
  return r;
}

}  // namespace

TEST_CASE("request keys separate prompt, n and temperature") {
  const auto k = request_key(req("a", 3));
  CHECK(k.size() == 16);
  CHECK(k == request_key(req("a", 3)));
  CHECK(k != request_key(req("b", 3)));
  CHECK(k != request_key(req("a", 4)));
  CHECK(k != request_key(req("a", 3, 0.7)));
  CHECK(request_key(req("a", 1, 0.0)) == request_key(req("a", 1, -0.0)));
}

TEST_CASE("request validation") {
  CHECK_THROWS_AS(req("a", 0).validate(), std::invalid_argument);
  CHECK_THROWS_AS(req("a", 1, -0.1).validate(), std::invalid_argument);
  CHECK_NOTHROW(req("a", 1, 0.0).validate());
}

TEST_CASE("replay returns fixture texts verbatim") {
  auto path = fs::temp_directory_path() / "prefrank_fixture.jsonl";
  write_fixture(path, {{request_key(req("p", 3)), {"one", "two  spaced", "three\nlines"}}});
  ReplayGenerator g(path);
  auto r = g.generate(req("p", 3));
  CHECK(r.texts == std::vector<std::string>{"one", "two  spaced", "three\nlines"});
  try {
    g.generate(req("q", 3));
    FAIL("expected a miss");
  } catch (const FixtureMiss& e) {
    CHECK(e.key == request_key(req("q", 3)));
    CHECK(std::string(e.what()).find(e.key) != std::string::npos);
  }
}

TEST_CASE("remote request body and auth header") {
  ::setenv("PREFRANK_TEST_TOKEN", "sekrit", 1);
  auto t = std::make_unique<FakeTransport>();
  auto* fake = t.get();
  fake->script = {{200, choices({"x", "y"}), ""}};
  RemoteGenerator g(remote_cfg(), std::move(t), [](double) {});
  auto r = g.generate(req("hello", 2, 0.5));
  CHECK(r.texts == std::vector<std::string>{"x", "y"});
  auto body = nlohmann::json::parse(fake->bodies.at(0));
  CHECK(body["model"] == "m");
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["messages"][0]["content"] == "hello");
  CHECK(body["n"] == 2);
  CHECK(body["temperature"] == 0.5);
  CHECK(body["max_tokens"] == 32);
  CHECK(fake->headers.at(0).at("Authorization") == "Bearer sekrit");
  ::unsetenv("PREFRANK_TEST_TOKEN");
}

TEST_CASE("remote undercount is a structured error") {
  auto t = std::make_unique<FakeTransport>();
  t->script = {{200, choices({"a", "b"}), ""}};
  RemoteGenerator g(remote_cfg(), std::move(t), [](double) {});
  try {
    g.generate(req("p", 3));
    FAIL("expected undercount");
  } catch (const UndercountError& e) {
    CHECK(e.wanted == 3);
    CHECK(e.got == 2);
  }
}

TEST_CASE("remote retries with seeded exponential backoff") {
  std::vector<double> slept;
  auto t = std::make_unique<FakeTransport>();
  auto* fake = t.get();
  t->script = {{503, "busy", ""}};
  RemoteGenerator g(remote_cfg(), std::move(t), [&](double s) { slept.push_back(s); });
  try {
    g.generate(req("p", 1));
    FAIL("expected failure");
  } catch (const GatewayError& e) {
    CHECK(e.attempts() == 4);
  }
  CHECK(fake->calls == 4);
  REQUIRE(slept.size() == 3);
  for (std::size_t a = 0; a < 3; ++a) {
    const double base = 0.1 * static_cast<double>(1u << a);
    CHECK(slept[a] >= base);
    CHECK(slept[a] < 2.0 * base);
    CHECK(slept[a] == g.backoff(a + 1, request_key(req("p", 1))));
  }

  // same seed, same delays; another seed, different jitter
  auto cfg = remote_cfg();
  RemoteGenerator same(cfg, std::make_unique<FakeTransport>(), [](double) {});
  cfg.jitter_seed = 8;
  RemoteGenerator other(cfg, std::make_unique<FakeTransport>(), [](double) {});
  CHECK(same.backoff(2, "k") == g.backoff(2, "k"));
  CHECK(other.backoff(2, "k") != g.backoff(2, "k"));
}

TEST_CASE("remote recovers after transient failures and stops on client errors") {
  auto t = std::make_unique<FakeTransport>();
  auto* fake = t.get();
  t->script = {{0, "", "connection refused"}, {429, "", ""}, {200, choices({"ok"}), ""}};
  RemoteGenerator g(remote_cfg(), std::move(t), [](double) {});
  CHECK(g.generate(req("p", 1)).texts == std::vector<std::string>{"ok"});
  CHECK(fake->calls == 3);

  auto t2 = std::make_unique<FakeTransport>();
  auto* fake2 = t2.get();
  t2->script = {{401, "bad token", ""}};
  RemoteGenerator g2(remote_cfg(), std::move(t2), [](double) {});
  try {
    g2.generate(req("p", 1));
    FAIL("expected failure");
  } catch (const GatewayError& e) {
    CHECK(e.attempts() == 1);
  }
  CHECK(fake2->calls == 1);
}

TEST_CASE("record then replay reproduces responses") {
  auto t = std::make_unique<FakeTransport>();
  t->script = {{200, choices({"r1", "r2"}), ""}};
  RemoteGenerator remote(remote_cfg(), std::move(t), [](double) {});
  auto path = fs::temp_directory_path() / "prefrank_record.jsonl";
  std::vector<GenRequest> reqs{req("a", 2), req("b", 2), req("a", 2)};
  auto rep = record(remote, reqs, path);
  CHECK(rep.written == 2);
  CHECK(rep.failures.empty());
  ReplayGenerator replay(path);
  CHECK(replay.size() == 2);
  for (const auto& r : reqs) CHECK(replay.generate(r) == remote.generate(r));

  auto empty = fs::temp_directory_path() / "prefrank_record_empty.jsonl";
  CHECK(record(remote, {}, empty).written == 0);
  CHECK(fs::file_size(empty) == 0);
}

TEST_CASE("record keeps successes and lists failures") {
  auto t = std::make_unique<FakeTransport>();
  t->script = {{200, choices({"ok", "ok"}), ""}, {200, choices({"short"}), ""}};
  RemoteGenerator remote(remote_cfg(), std::move(t), [](double) {});
  auto path = fs::temp_directory_path() / "prefrank_record_partial.jsonl";
  auto rep = record(remote, {req("a", 2), req("b", 2)}, path);
  CHECK(rep.written == 1);
  REQUIRE(rep.failures.size() == 1);
  CHECK(rep.failures[0].first == request_key(req("b", 2)));
  CHECK(ReplayGenerator(path).generate(req("a", 2)).texts.size() == 2);
}

TEST_CASE("builtin greedy gives identical texts") {
  auto vocab = policy::Vocab::build({"the user prefers comedy films and drama movies ."});
  policy::PolicyConfig pc;
  pc.vocab_size = vocab.size();
  pc.model_dim = 16;
  pc.ffn_dim = 32;
  pc.context = 48;
  policy::PolicyModel model(pc, 3);
  BuiltinGenerator g(model, vocab, 5);
  auto r = g.generate(req("the user", 2, 0.0));
  REQUIRE(r.texts.size() == 2);
  CHECK(r.texts[0] == r.texts[1]);
  REQUIRE(r.logprobs[0].has_value());
  auto s = g.generate(req("the user", 3, 1.0));
  CHECK(s.texts.size() == 3);
}

TEST_CASE("concurrent generation keeps request order") {
  auto path = fs::temp_directory_path() / "prefrank_fixture_many.jsonl";
  std::map<std::string, std::vector<std::string>> table;
  std::vector<GenRequest> reqs;
  for (int i = 0; i < 12; ++i) {
    reqs.push_back(req("p" + std::to_string(i), 1));
    table[request_key(reqs.back())] = {"t" + std::to_string(i)};
  }
  write_fixture(path, table);
  ReplayGenerator g(path);
  auto out = generate_all(g, reqs, 4);
  for (int i = 0; i < 12; ++i) CHECK(out[static_cast<std::size_t>(i)].texts[0] == "t" + std::to_string(i));
  reqs.push_back(req("missing", 1));
  CHECK_THROWS_AS(generate_all(g, reqs, 4), FixtureMiss);
}
