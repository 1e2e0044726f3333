#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefrank/autodiff.hpp"
#include "prefrank/policy.hpp"
#include "prefrank/reward.hpp"

namespace prefrank::dpo {

struct PreferencePair {
  data::UserId user_id = 0;
  std::vector<policy::TokenId> prompt;  // starts with BOS
  std::vector<policy::TokenId> chosen;
  std::vector<policy::TokenId> rejected;
  double chosen_reward = 0.0;
  double rejected_reward = 0.0;
  std::string prompt_text, chosen_text, rejected_text;
};

struct MineResult {
  std::vector<PreferencePair> pairs;
  std::size_t skipped_flat = 0;        // max reward == min reward
  std::size_t skipped_identical = 0;   // chosen and rejected token sequences equal
};

/// One pair per user: argmax reward vs argmin reward, ties to the lowest
/// sample_index. `eval_lists` are the lists the rewards came from; any
/// test-tagged list among them is a LeakageError.
MineResult mine_pairs(const reward::ResponseScoreTable& table, const reward::ResponsesByUser& responses,
                      const std::map<data::UserId, std::string>& prompts, const policy::Vocab& vocab,
                      const reward::ListsByUser& eval_lists);

struct DpoConfig {
  double beta = 0.01;
  double learning_rate = 5e-5;
  std::size_t grad_accumulation = 8;
  std::size_t batch_size = 2;
  std::size_t epochs = 3;

  void validate() const;
};

/// Policy log-probabilities of a pair under the frozen reference.
struct ReferenceLogprobs {
  double chosen = 0.0;
  double rejected = 0.0;
};

ReferenceLogprobs reference_logprobs(const policy::PolicyModel& reference, const PreferencePair& pair);

struct LossVars {
  nk::Var loss;    // softplus(-margin)
  nk::Var margin;  // beta * ((lp(y1) - ref(y1)) - (lp(y2) - ref(y2)))
};

LossVars dpo_loss(nk::Graph& g, const policy::PolicyModel& policy, const PreferencePair& pair,
                  const ReferenceLogprobs& ref, double beta);

/// softplus(-margin) in the stable form; exposed for the scalar checks.
double dpo_loss_from_margin(double margin);

struct LossValue {
  double loss = 0.0;
  double margin = 0.0;
};
LossValue dpo_loss_value(const policy::PolicyModel& policy, const policy::PolicyModel& reference,
                         const PreferencePair& pair, double beta);

class DpoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DpoTrace {
  /// Mean micro-batch loss and margin of each optimizer step.
  std::vector<double> loss;
  std::vector<double> margin;
  std::size_t optimizer_steps = 0;
};

/// Trains `policy` in place; `reference` is only read. Micro-batches of
/// batch_size pairs; an optimizer step every grad_accumulation micro-batches
/// and at the end of each epoch.
DpoTrace dpo_train(policy::PolicyModel& policy, const policy::PolicyModel& reference,
                   const std::vector<PreferencePair>& pairs, const DpoConfig& config, std::uint64_t seed);

/// JSONL {"user","prompt","chosen","rejected","cr","rr"}; reading retokenizes
/// (prompt gets BOS, responses get EOS).
void write_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_pairs(const std::filesystem::path& path, const policy::Vocab& vocab);

}  // namespace prefrank::dpo
