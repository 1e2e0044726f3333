#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "prefrank/pipeline.hpp"

using namespace prefrank;
using namespace prefrank::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("prefrank_pl_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough that a full round takes a couple of seconds.
PipelineConfig tiny(const fs::path& dir) {
  PipelineConfig c;
  c.synthetic.n_users = 60;
  c.synthetic.n_items = 80;
  c.n_samples = 4;
  c.rounds = 1;
  c.max_new_tokens = 12;
  c.policy_dim = 16;
  c.policy_layers = 1;
  c.policy_ffn = 32;
  c.policy_context = 64;
  c.max_history = 5;
  c.warm_epochs = 2;
  c.reranker_embed = 8;
  c.reranker_hidden = 16;
  c.reranker_epochs = 3;
  c.knowledge_dim = 8;
  c.d_text = 16;
  c.adapter_hidden = 16;
  c.dpo_config.epochs = 1;
  c.dpo_config.learning_rate = 1e-3;
  c.out_dir = dir.string();
  return c;
}

const std::vector<std::string> kReports = {"setup.json",          "round_1.json",          "round_2.json",
                                           "summary.csv",         "lists.jsonl",           "prompts.jsonl",
                                           "round_1.scores.jsonl", "round_1.pairs.jsonl",  "round_2.responses.jsonl",
                                           "round_2.knowledge.jsonl"};

}  // namespace

TEST_CASE("config text, JSON and overrides") {
  auto c = parse_config_text("# comment\nseed = 7\nknowledge = off\nreranker = prm  # trailing\ndpo=off\n");
  CHECK(c.seed == 7);
  CHECK_FALSE(c.knowledge);
  CHECK_FALSE(c.dpo);
  CHECK(c.reranker == rerank::Kind::Prm);

  auto j = config_to_json(c);
  auto back = config_from_json(j);
  CHECK(config_to_json(back) == j);
  CHECK(parse_config_text(j.dump()).seed == 7);

  CHECK_THROWS_AS(parse_config_text("no_such_key = 1"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("seed = abc"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("reranker = lambdamart"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"bogus", 1}}), std::invalid_argument);

  PipelineConfig d;
  apply_override(d, "dpo.beta=0.5");
  CHECK(d.dpo_config.beta == 0.5);
  CHECK_THROWS_AS(apply_override(d, "dpo.beta"), std::invalid_argument);

  auto path = scratch("cfg.txt");
  { std::ofstream(path) << "synthetic.users = 42\nbackend = replay\nfixture = x.jsonl\n"; }
  auto loaded = load_config(path);
  CHECK(loaded.synthetic.n_users == 42);
  CHECK(loaded.backend == Backend::Replay);
  fs::remove(path);
}

TEST_CASE("fingerprint ignores run length and output location only") {
  PipelineConfig a;
  auto b = a;
  b.rounds = 9;
  b.out_dir = "elsewhere";
  b.workers = 3;
  b.in_flight = 16;
  CHECK(config_fingerprint(a) == config_fingerprint(b));
  b.seed = 1;
  CHECK(config_fingerprint(a) != config_fingerprint(b));
  auto c = a;
  c.dpo_config.beta = 0.1;
  CHECK(config_fingerprint(a) != config_fingerprint(c));
}

TEST_CASE("validation") {
  PipelineConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.rounds = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.n_samples = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.dpo = false;
  bad.knowledge = false;
  CHECK_NOTHROW(bad.validate());
  bad = c;
  bad.knowledge = false;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.max_new_tokens = bad.policy_context;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.backend = Backend::Replay;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.backend = Backend::Remote;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.dpo_config.beta = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.temperature = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("knowledge and dpo off is exactly the plain reranker") {
  auto dir = scratch("backbone");
  auto cfg = tiny(dir);
  cfg.knowledge = false;
  cfg.dpo = false;
  auto res = run_pipeline(cfg);
  REQUIRE(res.rounds.size() == 1);

  // the same thing by hand
  auto world = data::generate_synthetic_world(cfg.synthetic);
  auto split = data::split_by_user(world.dataset.profiles, cfg.train_fraction, cfg.seed);
  auto build = data::build_candidate_lists(world.dataset, split, cfg.lists, cfg.seed);
  std::vector<data::CandidateList> train, test;
  for (const auto& l : build.lists) {
    if (l.split == data::SplitTag::Train) train.push_back(l);
    if (l.split == data::SplitTag::Test) test.push_back(l);
  }
  rerank::RerankerConfig rc;
  rc.kind = cfg.reranker;
  rc.item_embed_dim = cfg.reranker_embed;
  rc.hidden_dim = cfg.reranker_hidden;
  rc.n_heads = cfg.reranker_heads;
  rc.n_layers = cfg.reranker_layers;
  rc.n_items = static_cast<std::size_t>(world.dataset.catalog.max_id()) + 1;
  rc.n_users = static_cast<std::size_t>(world.dataset.profiles.rbegin()->first) + 1;
  const auto seeds = stage_seeds(cfg);
  rerank::RerankerModel m(rc, seeds.reranker_init());
  rerank::TrainConfig tc;
  tc.epochs = cfg.reranker_epochs;
  tc.learning_rate = cfg.reranker_lr;
  tc.batch_size = cfg.reranker_batch;
  tc.seed = seeds.reranker_train();
  auto curve = rerank::train_reranker(m, train, nullptr, tc);
  auto ev = rerank::evaluate(m, test, nullptr, cfg.eval_k);

  CHECK(res.setup.reranker_loss == curve);
  CHECK(res.rounds[0].test.ndcg == ev.ndcg);
  CHECK(res.rounds[0].test.map == ev.map);
  CHECK(res.rounds[0].test.users == ev.users);
  CHECK(res.setup.warm_perplexity.empty());
  CHECK_FALSE(fs::exists(dir / "round_1.responses.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("two rounds: reports, determinism and resume") {
  auto a = scratch("resume_a"), b = scratch("resume_b"), c = scratch("resume_c");
  auto cfg = tiny(b);
  cfg.rounds = 2;
  auto full = run_pipeline(cfg);
  REQUIRE(full.rounds.size() == 2);
  for (const auto& r : full.rounds) {
    CHECK(r.users_scored > 0);
    CHECK(r.pairs + r.skipped_flat + r.skipped_identical == r.users_scored);
    CHECK(r.best_of_n >= r.mean_reward);
    CHECK(r.post_dpo_best_of_n.has_value());
    if (r.pairs > 0) {
      CHECK_FALSE(r.dpo_loss.empty());
      CHECK(r.dpo_loss.size() == r.dpo_margin.size());
      CHECK(r.pair_loss_after.has_value());
    }
    CHECK_FALSE(r.reranker_loss.empty());
    CHECK(r.test.users > 0);
  }
  CHECK(full.setup.warm_perplexity.size() == cfg.warm_epochs);
  CHECK(fs::exists(b / "timings.json"));
  CHECK(fs::exists(b / "state" / "round_2.policy"));

  // same config, fresh directory: every report byte-identical
  cfg.out_dir = c.string();
  run_pipeline(cfg);
  for (const auto& f : kReports) CHECK_MESSAGE(slurp(b / f) == slurp(c / f), f);

  // one round, then extend to two
  cfg.out_dir = a.string();
  cfg.rounds = 1;
  run_pipeline(cfg);
  CHECK_FALSE(fs::exists(a / "round_2.json"));
  cfg.rounds = 2;
  auto resumed = run_pipeline(cfg);
  CHECK(resumed.resumed_rounds == 1);
  for (const auto& f : kReports) CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);

  auto other = cfg;
  other.dpo_config.beta = 0.2;
  CHECK_THROWS_AS(run_pipeline(other), std::runtime_error);

  // held-out users never reach responses, rewards or pairs
  auto world = data::generate_synthetic_world(cfg.synthetic);
  auto split = data::split_by_user(world.dataset.profiles, cfg.train_fraction, cfg.seed);
  REQUIRE_FALSE(split.test.empty());
  std::set<data::UserId> held(split.test.begin(), split.test.end());
  auto vocab = policy::Vocab::load(a / "state" / "vocab.json");
  for (int r = 1; r <= 2; ++r) {
    const std::string tag = "round_" + std::to_string(r);
    for (const auto& resp : policy::read_responses(a / (tag + ".responses.jsonl"), vocab))
      CHECK(held.count(resp.user_id) == 0);
    for (const auto& [u, _] : reward::read_score_table(a / (tag + ".scores.jsonl")).rows) CHECK(held.count(u) == 0);
    for (const auto& p : dpo::read_pairs(a / (tag + ".pairs.jsonl"), vocab)) CHECK(held.count(p.user_id) == 0);
  }
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("a failing stage leaves a partial report") {
  auto base = scratch("partial_base"), dir = scratch("partial");
  auto cfg = tiny(base);
  run_pipeline(cfg);

  // fixture holds only the greedy knowledge requests, so setup replays fine
  // and round sampling misses
  auto vocab = policy::Vocab::load(base / "state" / "vocab.json");
  auto model = policy::PolicyModel::load(base / "state" / "setup.policy");
  std::vector<llm::GenRequest> reqs;
  for (const auto& [u, prompt] : read_prompts(base / "prompts.jsonl")) {
    llm::GenRequest r;
    r.prompt = prompt;
    r.n = 1;
    r.temperature = 0.0;
    r.max_tokens = cfg.max_new_tokens;
    r.user_id = u;
    reqs.push_back(r);
  }
  llm::BuiltinGenerator gen(model, vocab, 0);
  const auto fixture = dir.string() + ".fixture.jsonl";
  auto rep = llm::record(gen, reqs, fixture);
  CHECK(rep.failures.empty());

  auto replay = cfg;
  replay.out_dir = dir.string();
  replay.backend = Backend::Replay;
  replay.fixture = fixture;
  CHECK_THROWS_AS(run_pipeline(replay), llm::FixtureMiss);
  REQUIRE(fs::exists(dir / "setup.json"));
  REQUIRE(fs::exists(dir / "round_1.partial.json"));
  CHECK_FALSE(fs::exists(dir / "round_1.json"));
  auto partial = nlohmann::json::parse(slurp(dir / "round_1.partial.json"));
  CHECK(partial.at("failed_stage") == "generate");
  CHECK(partial.at("error").get<std::string>().size() > 0);

  // the replayed setup matches the builtin one it was recorded from
  CHECK(slurp(dir / "setup.json") == slurp(base / "setup.json"));
  fs::remove_all(base);
  fs::remove_all(dir);
  fs::remove(fixture);
}

TEST_CASE("ablation arms share lists") {
  auto dir = scratch("ablation");
  auto cfg = tiny(dir);
  auto rows = run_ablation(cfg);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].arm == "backbone");
  CHECK(rows[1].arm == "+knowledge");
  CHECK(rows[2].arm == "+knowledge+dpo");
  for (const auto& r : rows) CHECK(r.test.users == rows[0].test.users);
  CHECK(slurp(dir / "backbone" / "lists.jsonl") == slurp(dir / "knowledge_dpo" / "lists.jsonl"));
  CHECK(fs::exists(dir / "ablation.csv"));
  auto j = nlohmann::json::parse(slurp(dir / "ablation.json"));
  CHECK(j.size() == 3);
  fs::remove_all(dir);
}

TEST_CASE("best-of-N sweep") {
  auto dir = scratch("sweep");
  auto cfg = tiny(dir);
  auto rows = sweep_n(cfg, {1, 2, 4}, 1);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].n == 1);
  CHECK(rows[0].best_of_n == doctest::Approx(rows[0].mean_reward).epsilon(1e-12));
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].best_of_n >= rows[i - 1].best_of_n);
  for (const auto& r : rows) CHECK(r.generation_seconds > 0.0);
  CHECK(fs::exists(dir / "sweep_n.json"));
  CHECK_THROWS_AS(sweep_n(cfg, {}, 1), std::invalid_argument);
  CHECK_THROWS_AS(sweep_n(cfg, {0}, 1), std::invalid_argument);
  fs::remove_all(dir);
}
