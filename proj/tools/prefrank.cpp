// prefrank: command-line entry point for ingestion, single stages and full runs.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "prefrank/dataio.hpp"
#include "prefrank/dpo.hpp"
#include "prefrank/gateway.hpp"
#include "prefrank/knowledge.hpp"
#include "prefrank/pipeline.hpp"
#include "prefrank/policy.hpp"
#include "prefrank/rerankers.hpp"
#include "prefrank/reward.hpp"

using namespace prefrank;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> parse_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(static_cast<std::size_t>(std::stoul(part)));
  return out;
}

pipeline::PipelineConfig config_from(const std::string& path, const std::vector<std::string>& sets) {
  pipeline::PipelineConfig c = path.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(path);
  for (const auto& s : sets) pipeline::apply_override(c, s);
  return c;
}

void print_round(const pipeline::RoundReport& r) {
  std::cout << "round " << r.round << ": pairs " << r.pairs << ", mean reward " << r.mean_reward << ", best-of-N "
            << r.best_of_n;
  if (r.post_dpo_best_of_n) std::cout << " -> " << *r.post_dpo_best_of_n << " after DPO";
  std::cout << ", test NDCG@5 " << r.test.ndcg << ", MAP@5 " << r.test.map << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefrank: preference-optimised reasoning knowledge for reranking"};
  app.require_subcommand(1);

  // ingest ------------------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "Convert MovieLens-1M .dat files, or a synthetic world, to JSONL");
  std::string format = "ml1m", ingest_in, ratings, movies, users, ingest_out;
  bool synth = false;
  data::SyntheticConfig sc;
  ingest->add_option("--format", format, "Input format")->check(CLI::IsMember({"ml1m", "jsonl"}));
  ingest->add_option("--in", ingest_in, "Input directory (ratings.dat, movies.dat, users.dat or JSONL)");
  ingest->add_option("--seed", sc.seed, "Seed of the synthetic world");
  ingest->add_option("--ratings", ratings, "ratings.dat");
  ingest->add_option("--movies", movies, "movies.dat");
  ingest->add_option("--users", users, "users.dat (optional)");
  ingest->add_flag("--synthetic", synth, "Generate the synthetic world instead");
  ingest->add_option("--synthetic-users", sc.n_users);
  ingest->add_option("--synthetic-items", sc.n_items);
  ingest->add_option("--synthetic-genres", sc.n_genres);
  ingest->add_option("--synthetic-noise", sc.noise);
  ingest->add_option("--synthetic-seed", sc.seed);
  ingest->add_option("--out", ingest_out, "Output directory")->required();

  // pipeline / ablation / sweep-n ---------------------------------------------
  std::string config_path;
  std::vector<std::string> sets;
  std::string refresh, rounds_opt, seed_opt, out_opt;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Config file (JSON or key = value lines)");
    sub->add_option("--set", sets, "Override, e.g. --set rounds=3 (repeatable)");
    sub->add_option("--refresh-reranker", refresh, "Retrain the reward reranker each round")
        ->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--rounds", rounds_opt);
    sub->add_option("--seed", seed_opt);
    sub->add_option("--out", out_opt, "Run directory");
  };
  auto* pipe = app.add_subcommand("pipeline", "Run the iterative generate/score/DPO loop");
  add_config(pipe);
  auto* abl = app.add_subcommand("ablation", "backbone vs +knowledge vs +knowledge+dpo");
  add_config(abl);
  auto* sweep = app.add_subcommand("sweep-n", "Best-of-N reward and generation time across N");
  add_config(sweep);
  std::string n_values = "5,10,15";
  std::size_t reps = 3;
  sweep->add_option("--n", n_values, "Comma-separated N values");
  sweep->add_option("--reps", reps, "Timing repetitions (fastest kept)");

  // single stages over a run directory's artifacts ----------------------------
  auto* gen = app.add_subcommand("generate", "Sample N responses per prompt");
  std::string backend = "builtin", policy_path, vocab_path, prompts_path, gen_out, fixture, record_to;
  std::size_t n = 10, max_tokens = 32, in_flight = 4;
  double temperature = 0.8;
  std::uint64_t seed = 0;
  llm::RemoteConfig remote;
  gen->add_option("--backend", backend)->check(CLI::IsMember({"builtin", "remote", "replay"}));
  gen->add_option("--policy", policy_path, "Policy checkpoint (builtin)");
  gen->add_option("--vocab", vocab_path)->required();
  gen->add_option("--prompts", prompts_path, "prompts.jsonl")->required();
  gen->add_option("--n", n);
  gen->add_option("--temperature", temperature);
  gen->add_option("--max-tokens", max_tokens);
  gen->add_option("--seed", seed);
  gen->add_option("--fixture", fixture, "Replay fixture");
  gen->add_option("--record", record_to, "Remote only: also write a replay fixture here");
  gen->add_option("--endpoint", remote.endpoint);
  gen->add_option("--model", remote.model);
  gen->add_option("--token-env", remote.token_env);
  gen->add_option("--retries", remote.retry_budget);
  gen->add_option("--in-flight", in_flight);
  gen->add_option("--out", gen_out)->required();

  auto* score = app.add_subcommand("score", "Reward each response with the knowledge reranker");
  std::string reranker_path, responses_path, lists_path, score_out;
  score->add_option("--reranker", reranker_path)->required();
  score->add_option("--responses", responses_path)->required();
  score->add_option("--lists", lists_path, "lists.jsonl; only valid-tagged lists are used")->required();
  score->add_option("--vocab", vocab_path)->required();
  score->add_option("--out", score_out)->required();

  auto* mine = app.add_subcommand("mine-pairs", "Chosen/rejected pairs from a score table");
  std::string scores_path, pairs_out;
  mine->add_option("--scores", scores_path)->required();
  mine->add_option("--responses", responses_path)->required();
  mine->add_option("--prompts", prompts_path)->required();
  mine->add_option("--lists", lists_path)->required();
  mine->add_option("--vocab", vocab_path)->required();
  mine->add_option("--out", pairs_out)->required();

  auto* train = app.add_subcommand("train-reranker", "Train one reranker backbone on an ingested dataset");
  std::string kind = "setrank", knowledge_flag = "off", data_dir, knowledge_path, ckpt_out;
  std::size_t epochs = 30, batch = 16, eval_k = 5;
  double lr = 1e-3, train_fraction = 0.9;
  pipeline::PipelineConfig shapes;  // layer sizes come from the pipeline defaults
  train->add_option("--kind", kind)->check(CLI::IsMember({"dlcm", "prm", "setrank"}));
  train->add_option("--knowledge", knowledge_flag)->check(CLI::IsMember({"on", "off"}));
  train->add_option("--knowledge-file", knowledge_path, "Knowledge JSONL {user, response_id, text}");
  train->add_option("--vocab", vocab_path, "Vocabulary for the knowledge texts");
  train->add_option("--epochs", epochs);
  train->add_option("--lr", lr);
  train->add_option("--batch", batch);
  train->add_option("--seed", seed);
  train->add_option("--train-fraction", train_fraction);
  train->add_option("--k", eval_k, "Cutoff for NDCG and MAP");
  train->add_option("--data", data_dir, "Ingested JSONL directory; the synthetic world when omitted");
  train->add_option("--out", ckpt_out)->required();

  auto* dpo_cmd = app.add_subcommand("dpo-train", "Fine-tune a policy on preference pairs");
  std::string pairs_path, policy_out;
  dpo::DpoConfig dc;
  dpo_cmd->add_option("--policy", policy_path)->required();
  dpo_cmd->add_option("--pairs", pairs_path)->required();
  dpo_cmd->add_option("--vocab", vocab_path)->required();
  dpo_cmd->add_option("--beta", dc.beta);
  dpo_cmd->add_option("--lr", dc.learning_rate);
  dpo_cmd->add_option("--epochs", dc.epochs);
  dpo_cmd->add_option("--accum", dc.grad_accumulation);
  dpo_cmd->add_option("--batch", dc.batch_size);
  dpo_cmd->add_option("--seed", seed);
  dpo_cmd->add_option("--out", policy_out)->required();

  CLI11_PARSE(app, argc, argv);
  if (!refresh.empty()) sets.push_back("refresh_reranker=" + refresh);
  if (!rounds_opt.empty()) sets.push_back("rounds=" + rounds_opt);
  if (!seed_opt.empty()) sets.push_back("seed=" + seed_opt);
  if (!out_opt.empty()) sets.push_back("out_dir=" + out_opt);

  try {
    if (ingest->parsed()) {
      data::Dataset d;
      if (synth) {
        d = data::generate_synthetic_world(sc).dataset;
      } else if (format == "jsonl") {
        if (ingest_in.empty()) throw CLI::ValidationError("--format jsonl needs --in");
        d = data::ingest_jsonl(ingest_in);
      } else {
        if (!ingest_in.empty()) {
          const fs::path dir = ingest_in;
          if (ratings.empty()) ratings = (dir / "ratings.dat").string();
          if (movies.empty()) movies = (dir / "movies.dat").string();
          if (users.empty() && fs::exists(dir / "users.dat")) users = (dir / "users.dat").string();
        }
        if (ratings.empty() || movies.empty()) throw CLI::ValidationError("give --in DIR or --ratings and --movies");
        d = data::ingest_ml1m(ratings, movies, users);
      }
      data::write_jsonl(ingest_out, d);
      std::cout << "users " << d.report.users << ", items " << d.report.items << ", interactions "
                << d.report.interactions << ", rejected lines " << d.report.rejected.size() << ", dropped (unknown item) "
                << d.report.dropped_missing_item << '\n';
      for (const auto& r : d.report.rejected) std::cerr << r.file << ':' << r.line << ": " << r.reason << '\n';
    } else if (train->parsed()) {
      auto ds = data_dir.empty() ? data::generate_synthetic_world({}).dataset : data::ingest_jsonl(data_dir);
      auto split = data::split_by_user(ds.profiles, train_fraction, seed);
      auto build = data::build_candidate_lists(ds, split, {}, seed);
      std::vector<data::CandidateList> train_lists, valid_lists, test_lists;
      for (const auto& l : build.lists) {
        if (l.split == data::SplitTag::Train) train_lists.push_back(l);
        if (l.split == data::SplitTag::Valid) valid_lists.push_back(l);
        if (l.split == data::SplitTag::Test) test_lists.push_back(l);
      }
      rerank::RerankerConfig rc;
      rc.kind = rerank::parse_kind(kind);
      rc.item_embed_dim = shapes.reranker_embed;
      rc.hidden_dim = shapes.reranker_hidden;
      rc.n_heads = shapes.reranker_heads;
      rc.n_layers = shapes.reranker_layers;
      rc.n_items = static_cast<std::size_t>(ds.catalog.max_id()) + 1;
      rc.n_users = ds.profiles.empty() ? 1 : static_cast<std::size_t>(ds.profiles.rbegin()->first) + 1;
      knowledge::KnowledgeMap km;
      const bool with_knowledge = knowledge_flag == "on";
      if (with_knowledge) {
        if (knowledge_path.empty() || vocab_path.empty())
          throw CLI::ValidationError("--knowledge on needs --knowledge-file and --vocab");
        auto vocab = policy::Vocab::load(vocab_path);
        km = knowledge::to_knowledge_map(knowledge::read_knowledge(knowledge_path), vocab);
        rc.knowledge_dim = shapes.knowledge_dim;
        rc.text_vocab_size = vocab.size();
        rc.d_text = shapes.d_text;
        rc.adapter_hidden = shapes.adapter_hidden;
      }
      rerank::RerankerModel model(rc, seed);
      rerank::TrainConfig tc;
      tc.epochs = epochs;
      tc.learning_rate = lr;
      tc.batch_size = batch;
      tc.seed = seed;
      const auto* kmp = with_knowledge ? &km : nullptr;
      auto curve = rerank::train_reranker(model, train_lists, kmp, tc);
      model.save(ckpt_out);
      std::cout << "bce " << curve.front() << " -> " << curve.back() << '\n';
      for (const auto& [name, lists] : {std::pair{"valid", &valid_lists}, std::pair{"test", &test_lists}}) {
        if (lists->empty()) continue;
        if (kmp && std::any_of(lists->begin(), lists->end(), [&](const auto& l) { return !km.count(l.user_id); })) {
          std::cout << name << ": skipped, the knowledge file does not cover its users\n";
          continue;
        }
        auto ev = rerank::evaluate(model, *lists, kmp, eval_k);
        std::cout << name << ": NDCG@" << eval_k << ' ' << ev.ndcg << ", MAP@" << eval_k << ' ' << ev.map << " ("
                  << ev.users << " users)\n";
      }
    } else if (pipe->parsed()) {
      auto res = pipeline::run_pipeline(config_from(config_path, sets));
      std::cout << "setup: test NDCG@5 " << res.setup.test.ndcg << ", MAP@5 " << res.setup.test.map << '\n';
      if (res.resumed_rounds) std::cout << "resumed " << res.resumed_rounds << " completed round(s)\n";
      for (const auto& r : res.rounds) print_round(r);
    } else if (abl->parsed()) {
      auto rows = pipeline::run_ablation(config_from(config_path, sets));
      for (const auto& r : rows)
        std::cout << r.arm << ": NDCG@5 " << r.test.ndcg << ", MAP@5 " << r.test.map << " (" << r.test.users << " users)\n";
    } else if (sweep->parsed()) {
      auto rows = pipeline::sweep_n(config_from(config_path, sets), parse_sizes(n_values), reps);
      for (const auto& r : rows)
        std::cout << "N=" << r.n << ": best-of-N " << r.best_of_n << ", mean " << r.mean_reward << ", generation "
                  << r.generation_seconds << " s\n";
    } else if (gen->parsed()) {
      auto vocab = policy::Vocab::load(vocab_path);
      auto prompts = pipeline::read_prompts(prompts_path);
      std::unique_ptr<llm::Generator> g;
      policy::PolicyModel model;
      if (backend == "builtin") {
        if (policy_path.empty()) throw CLI::ValidationError("--policy is required for the builtin backend");
        model = policy::PolicyModel::load(policy_path);
        g = std::make_unique<llm::BuiltinGenerator>(model, vocab, seed);
      } else if (backend == "replay") {
        g = std::make_unique<llm::ReplayGenerator>(fixture);
      } else {
        remote.jitter_seed = seed;
        g = std::make_unique<llm::RemoteGenerator>(remote, llm::make_http_transport());
      }
      std::vector<llm::GenRequest> reqs;
      for (const auto& [u, p] : prompts) reqs.push_back({p, n, temperature, max_tokens, u});
      if (!record_to.empty()) {
        auto rep = llm::record(*g, reqs, record_to);
        std::cout << "recorded " << rep.written << " request(s)\n";
        for (const auto& [k, msg] : rep.failures) std::cerr << "failed " << k << ": " << msg << '\n';
        g = std::make_unique<llm::ReplayGenerator>(record_to);
      }
      auto out = llm::generate_all(*g, reqs, in_flight);
      std::vector<policy::ReasoningResponse> flat;
      std::size_t i = 0;
      for (const auto& [u, p] : prompts) {
        for (std::size_t k = 0; k < out[i].texts.size(); ++k) {
          policy::ReasoningResponse r;
          r.user_id = u;
          r.sample_index = k;
          r.text = out[i].texts[k];
          r.logprob_policy = out[i].logprobs[k].value_or(0.0);
          flat.push_back(std::move(r));
        }
        ++i;
      }
      policy::write_responses(gen_out, flat);
      std::cout << "wrote " << flat.size() << " responses for " << prompts.size() << " users\n";
    } else if (score->parsed()) {
      auto vocab = policy::Vocab::load(vocab_path);
      auto model = rerank::RerankerModel::load(reranker_path);
      reward::ResponsesByUser by_user;
      for (auto& r : policy::read_responses(responses_path, vocab)) by_user[r.user_id].push_back(std::move(r));
      auto valid = reward::group_lists(data::read_lists(lists_path), data::SplitTag::Valid);
      auto table = reward::score_responses(model, by_user, valid);
      reward::write_score_table(score_out, table);
      std::cout << "scored " << table.rows.size() << " users (skipped " << table.skipped_users
                << " without a held-in list), mean best-of-N " << table.mean_best() << '\n';
    } else if (mine->parsed()) {
      auto vocab = policy::Vocab::load(vocab_path);
      auto table = reward::read_score_table(scores_path);
      reward::ResponsesByUser by_user;
      for (auto& r : policy::read_responses(responses_path, vocab)) by_user[r.user_id].push_back(std::move(r));
      auto valid = reward::group_lists(data::read_lists(lists_path), data::SplitTag::Valid);
      auto res = dpo::mine_pairs(table, by_user, pipeline::read_prompts(prompts_path), vocab, valid);
      dpo::write_pairs(pairs_out, res.pairs);
      std::cout << "pairs " << res.pairs.size() << ", skipped flat " << res.skipped_flat << ", skipped identical "
                << res.skipped_identical << '\n';
    } else if (dpo_cmd->parsed()) {
      auto vocab = policy::Vocab::load(vocab_path);
      auto model = policy::PolicyModel::load(policy_path);
      const auto reference = model;
      auto pairs = dpo::read_pairs(pairs_path, vocab);
      auto trace = dpo::dpo_train(model, reference, pairs, dc, seed);
      model.save(policy_out);
      std::cout << "steps " << trace.optimizer_steps;
      if (!trace.loss.empty()) std::cout << ", loss " << trace.loss.front() << " -> " << trace.loss.back();
      std::cout << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
