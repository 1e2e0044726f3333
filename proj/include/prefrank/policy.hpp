#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefrank/autodiff.hpp"
#include "prefrank/optim.hpp"
#include "prefrank/tensor.hpp"
#include "prefrank/tokenizer.hpp"

namespace prefrank::policy {

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct PolicyConfig {
  std::size_t vocab_size = 0;
  std::size_t model_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t context = 128;
  double init_std = 0.02;
  /// PAD/BOS/UNK never appear in a response, so they get -1e9 logits in
  /// every next-token distribution.
  bool mask_special_tokens = true;
};

/// Pre-norm decoder-only transformer with learned positions and an output
/// projection tied to the token embeddings.
class PolicyModel {
 public:
  PolicyModel() = default;
  PolicyModel(const PolicyConfig& config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  nk::ParamSet& params() { return params_; }
  const nk::ParamSet& params() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static PolicyModel load(const std::filesystem::path& path);

  friend bool operator==(const PolicyModel& a, const PolicyModel& b) { return a.params_ == b.params_; }

 private:
  PolicyConfig config_;
  nk::ParamSet params_;
};

/// Next-token logits for every position of `ids`, shape [len, vocab].
nk::Var forward_logits(nk::Graph& g, const PolicyModel& model, const std::vector<TokenId>& ids);

/// Differentiable log pi(response | prompt): sum over response tokens of the
/// log next-token probability. The prompt is used as given (callers put BOS
/// first); the response should end with EOS.
nk::Var sequence_logprob(nk::Graph& g, const PolicyModel& model, const std::vector<TokenId>& prompt,
                         const std::vector<TokenId>& response);
double sequence_logprob(const PolicyModel& model, const std::vector<TokenId>& prompt,
                        const std::vector<TokenId>& response);

/// Incremental decoder that keeps per-layer keys and values, so each new
/// token costs one row of work. Plain loops, no graph.
class StepDecoder {
 public:
  explicit StepDecoder(const PolicyModel& model);

  /// Appends a token and returns log-probabilities of the next token.
  const std::vector<double>& feed(TokenId token);
  const std::vector<double>& next_logprobs() const { return logprobs_; }
  const std::vector<double>& next_logits() const { return logits_; }
  std::size_t position() const { return pos_; }

 private:
  const PolicyModel* model_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> logits_, logprobs_;
};

/// Step-by-step log-probability via StepDecoder.
double stepwise_logprob(const PolicyModel& model, const std::vector<TokenId>& prompt,
                        const std::vector<TokenId>& response);

struct ReasoningResponse {
  std::int64_t user_id = 0;
  std::size_t sample_index = 0;
  std::vector<TokenId> tokens;  // EOS-terminated unless max_new_tokens was hit
  std::string text;
  double logprob_policy = 0.0;
  std::optional<double> reward;
};

struct SampleConfig {
  std::size_t max_new_tokens = 32;
  double temperature = 0.8;
};

/// Sample k uses the RNG stream (seed, user_id, k). Temperature 0 is greedy
/// argmax with ties to the lowest id.
std::vector<ReasoningResponse> sample_n(const PolicyModel& model, const Vocab& vocab,
                                        const std::vector<TokenId>& prompt, std::size_t n,
                                        const SampleConfig& config, std::uint64_t seed, std::int64_t user_id);

void write_responses(const std::filesystem::path& path, const std::vector<ReasoningResponse>& responses);
std::vector<ReasoningResponse> read_responses(const std::filesystem::path& path, const Vocab& vocab);

// ---------------------------------------------------------------------------

/// Genre-preference sentence from one of three fixed templates.
std::string preference_sentence(const std::vector<std::string>& genres, std::size_t variant);
inline constexpr std::size_t kPreferenceTemplates = 3;

struct LmExample {
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;  // EOS-terminated
};

struct WarmStartConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

/// Next-token cross-entropy on target tokens only. Returns the training
/// perplexity of each epoch.
std::vector<double> warm_start(PolicyModel& model, const std::vector<LmExample>& corpus,
                               const WarmStartConfig& config);

}  // namespace prefrank::policy
