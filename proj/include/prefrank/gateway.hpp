#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefrank/policy.hpp"

namespace prefrank::llm {

struct GenRequest {
  std::string prompt;
  std::size_t n = 1;
  double temperature = 0.8;
  std::size_t max_tokens = 32;
  /// Selects the builtin sampler's stream; ignored by the other backends.
  std::int64_t user_id = 0;

  void validate() const;
};

struct GenResponse {
  std::vector<std::string> texts;
  std::vector<std::optional<double>> logprobs;
  friend bool operator==(const GenResponse&, const GenResponse&) = default;
};

/// Fixture key: FNV-1a 64 over the prompt, n and the temperature's bit pattern, as hex.
std::string request_key(const GenRequest& r);

class GatewayError : public std::runtime_error {
 public:
  GatewayError(const std::string& what, std::size_t attempts) : std::runtime_error(what), attempts_(attempts) {}
  std::size_t attempts() const { return attempts_; }

 private:
  std::size_t attempts_;
};

class UndercountError : public std::runtime_error {
 public:
  UndercountError(std::size_t wanted, std::size_t got);
  std::size_t wanted, got;
};

class FixtureMiss : public std::runtime_error {
 public:
  explicit FixtureMiss(const std::string& key);
  std::string key;
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual GenResponse generate(const GenRequest& request) = 0;
  virtual const char* kind() const = 0;
};

class BuiltinGenerator : public Generator {
 public:
  BuiltinGenerator(const policy::PolicyModel& model, const policy::Vocab& vocab, std::uint64_t seed)
      : model_(model), vocab_(vocab), seed_(seed) {}
  GenResponse generate(const GenRequest& request) override;
  const char* kind() const override { return "builtin"; }

 private:
  const policy::PolicyModel& model_;
  const policy::Vocab& vocab_;
  std::uint64_t seed_;
};

struct HttpResult {
  int status = 0;  // 0 = transport failure
  std::string body;
  std::string error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResult post(const std::string& url, const std::map<std::string, std::string>& headers,
                          const std::string& body, double timeout_seconds) = 0;
};

/// cpp-httplib client. https needs the library built with OpenSSL.
std::unique_ptr<Transport> make_http_transport();

struct RemoteConfig {
  std::string endpoint;  // full URL of the chat-completions route
  std::string model;
  std::string token_env = "PREFRANK_LLM_TOKEN";
  double timeout_seconds = 60.0;
  std::size_t retry_budget = 3;
  double backoff_base_seconds = 0.5;
  std::uint64_t jitter_seed = 0;
};

class RemoteGenerator : public Generator {
 public:
  using Sleeper = std::function<void(double seconds)>;
  RemoteGenerator(RemoteConfig config, std::unique_ptr<Transport> transport, Sleeper sleeper = {});
  GenResponse generate(const GenRequest& request) override;
  const char* kind() const override { return "remote"; }

  static std::string request_body(const RemoteConfig& config, const GenRequest& request);
  static GenResponse parse_body(const std::string& body, std::size_t n);
  /// Delay before retry `attempt` (1-based): base * 2^(attempt-1) * (1 + u), u from the seeded stream.
  double backoff(std::size_t attempt, const std::string& key) const;

 private:
  RemoteConfig config_;
  std::unique_ptr<Transport> transport_;
  Sleeper sleeper_;
};

/// Answers only from a fixture; never touches the network.
class ReplayGenerator : public Generator {
 public:
  explicit ReplayGenerator(const std::filesystem::path& fixture);
  GenResponse generate(const GenRequest& request) override;
  const char* kind() const override { return "replay"; }
  std::size_t size() const { return table_.size(); }

 private:
  std::map<std::string, std::vector<std::string>> table_;
};

/// Fixture JSONL rows {"key","texts"}, sorted by key.
void write_fixture(const std::filesystem::path& path, const std::map<std::string, std::vector<std::string>>& table);
std::map<std::string, std::vector<std::string>> read_fixture(const std::filesystem::path& path);

struct RecordReport {
  std::size_t written = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // key, message
};

/// Runs each distinct request once and writes what succeeded.
RecordReport record(Generator& source, const std::vector<GenRequest>& requests, const std::filesystem::path& fixture);

/// Issues requests with up to `in_flight` running at once; results keep request order.
/// The first failure is rethrown after all workers finish.
std::vector<GenResponse> generate_all(Generator& gen, const std::vector<GenRequest>& requests, std::size_t in_flight = 1);

}  // namespace prefrank::llm
