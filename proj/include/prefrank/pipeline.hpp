#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefrank/dataio.hpp"
#include "prefrank/dpo.hpp"
#include "prefrank/gateway.hpp"
#include "prefrank/knowledge.hpp"
#include "prefrank/policy.hpp"
#include "prefrank/rerankers.hpp"
#include "prefrank/reward.hpp"

namespace prefrank::pipeline {

enum class Backend { Builtin, Remote, Replay };

struct PipelineConfig {
  std::uint64_t seed = 0;

  // data: an ingested JSONL directory, or the synthetic world when empty
  std::string data_dir;
  data::SyntheticConfig synthetic;
  double train_fraction = 0.9;
  data::ListConfig lists;
  std::string template_path;  // empty = built-in template
  std::size_t max_history = 10;

  // generation
  Backend backend = Backend::Builtin;
  std::string fixture;
  llm::RemoteConfig remote;
  std::size_t in_flight = 4;
  std::size_t n_samples = 10;
  std::size_t rounds = 2;
  double temperature = 0.8;
  std::size_t max_new_tokens = 32;

  // builtin policy and its warm start
  std::size_t policy_dim = 64;
  std::size_t policy_layers = 2;
  std::size_t policy_heads = 2;
  std::size_t policy_ffn = 128;
  std::size_t policy_context = 128;
  std::size_t warm_epochs = 30;
  double warm_lr = 1e-3;
  std::size_t warm_batch = 16;
  std::size_t warm_genres = 2;

  // reranker and knowledge
  rerank::Kind reranker = rerank::Kind::SetRank;
  std::size_t reranker_embed = 32;
  std::size_t reranker_hidden = 64;
  std::size_t reranker_heads = 2;
  std::size_t reranker_layers = 1;
  std::size_t reranker_epochs = 30;
  double reranker_lr = 1e-3;
  std::size_t reranker_batch = 16;
  bool knowledge = true;
  std::size_t knowledge_dim = 32;
  std::size_t d_text = 64;
  std::size_t adapter_hidden = 64;

  // preference optimisation
  bool dpo = true;
  dpo::DpoConfig dpo_config;
  bool refresh_reranker = true;
  bool measure_post_dpo = true;

  std::size_t eval_k = 5;
  std::size_t workers = 1;
  std::string out_dir = "runs/default";

  void validate() const;
};

nlohmann::json config_to_json(const PipelineConfig& c);
/// Flat keys as produced by config_to_json; unknown keys are errors and
/// missing keys keep their defaults.
PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base = {});
/// JSON object, or one `key = value` per line (# comments allowed).
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config_text(const std::string& text);
/// Applies one `key=value` override.
void apply_override(PipelineConfig& c, const std::string& assignment);

/// Fingerprint of everything that determines results; excludes rounds,
/// out_dir, workers and in_flight so a longer run can resume a shorter one.
std::string config_fingerprint(const PipelineConfig& c);

/// Seeds every stage derives from config.seed.
struct StageSeeds {
  std::uint64_t base = 0;
  std::uint64_t policy_init() const;
  std::uint64_t warm_start() const;
  std::uint64_t reranker_init() const;
  std::uint64_t reranker_train() const;
  std::uint64_t sampling(std::size_t round) const;
  std::uint64_t dpo(std::size_t round) const;
};
inline StageSeeds stage_seeds(const PipelineConfig& c) { return {c.seed}; }

// ---------------------------------------------------------------------------

struct EvalMetrics {
  double ndcg = 0.0;
  double map = 0.0;
  std::size_t users = 0;
  std::size_t lists = 0;
};

struct SetupReport {
  std::vector<double> warm_perplexity;
  std::vector<double> reranker_loss;
  EvalMetrics valid, test;
  std::size_t train_users = 0, test_users = 0;
  std::size_t degenerate_knowledge = 0;
};

struct RoundReport {
  std::size_t round = 0;
  std::size_t users_scored = 0;
  std::size_t skipped_no_eval = 0;
  std::size_t pairs = 0;
  std::size_t skipped_flat = 0;
  std::size_t skipped_identical = 0;
  double mean_reward = 0.0;
  double best_of_n = 0.0;
  std::optional<double> post_dpo_mean_reward;
  std::optional<double> post_dpo_best_of_n;
  std::vector<double> dpo_loss, dpo_margin;
  /// DPO loss and mean margin over all of the round's pairs after training.
  std::optional<double> pair_loss_after, pair_margin_after;
  std::vector<double> reranker_loss;
  EvalMetrics valid, test;
};

nlohmann::json to_json(const SetupReport& r);
nlohmann::json to_json(const RoundReport& r);
RoundReport round_from_json(const nlohmann::json& j);

struct PipelineResult {
  SetupReport setup;
  std::vector<RoundReport> rounds;
  policy::PolicyModel policy;  // empty when knowledge is off
  rerank::RerankerModel reranker;
  std::size_t resumed_rounds = 0;
};

/// Warm start, reward reranker, then `rounds` iterations of generate, score,
/// mine, DPO, refresh and evaluate. Reports and checkpoints go to out_dir
/// after every stage; an existing out_dir with a matching fingerprint is
/// resumed from its last completed round.
PipelineResult run_pipeline(const PipelineConfig& config);

struct AblationRow {
  std::string arm;
  EvalMetrics test;
};

/// backbone, +knowledge and +knowledge+dpo on the same lists and seeds.
std::vector<AblationRow> run_ablation(const PipelineConfig& config);

struct SweepRow {
  std::size_t n = 0;
  double best_of_n = 0.0;
  double mean_reward = 0.0;
  double generation_seconds = 0.0;  // fastest of `reps` timed runs
};

/// Reward of the best of the first n samples per held-in user. Sample k
/// always comes from stream (seed, user, k), so smaller sets are prefixes
/// of larger ones.
std::vector<SweepRow> sweep_n(const PipelineConfig& config, const std::vector<std::size_t>& n_values,
                              std::size_t reps = 3);

/// prompts.jsonl rows {"user","prompt"} as written into a run directory.
std::map<data::UserId, std::string> read_prompts(const std::filesystem::path& path);

}  // namespace prefrank::pipeline
