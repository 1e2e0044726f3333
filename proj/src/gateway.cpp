#include "prefrank/gateway.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "prefrank/rng.hpp"

namespace prefrank::llm {

using nlohmann::json;

void GenRequest::validate() const {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  if (!(temperature >= 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("generate: temperature must be finite and >= 0");
  if (max_tokens < 1) throw std::invalid_argument("generate: max_tokens must be >= 1");
}

std::string request_key(const GenRequest& r) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  feed(r.prompt.data(), r.prompt.size());
  const std::uint64_t sep = 0, n = r.n;
  // a zero separator plus fixed-width fields keeps the encoding unambiguous
  feed(&sep, 1);
  feed(&n, sizeof n);
  const std::uint64_t tbits = std::bit_cast<std::uint64_t>(r.temperature == 0.0 ? 0.0 : r.temperature);
  feed(&tbits, sizeof tbits);
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

UndercountError::UndercountError(std::size_t w, std::size_t g)
    : std::runtime_error("generate: asked for " + std::to_string(w) + " texts, backend returned " + std::to_string(g)),
      wanted(w),
      got(g) {}

FixtureMiss::FixtureMiss(const std::string& k) : std::runtime_error("replay: no fixture entry for key " + k), key(k) {}

GenResponse BuiltinGenerator::generate(const GenRequest& request) {
  request.validate();
  policy::SampleConfig sc;
  sc.max_new_tokens = request.max_tokens;
  sc.temperature = request.temperature;
  auto samples = policy::sample_n(model_, vocab_, vocab_.encode_prompt(request.prompt), request.n, sc, seed_,
                                  request.user_id);
  GenResponse out;
  for (auto& s : samples) {
    out.texts.push_back(std::move(s.text));
    out.logprobs.emplace_back(s.logprob_policy);
  }
  return out;
}

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("remote: endpoint needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttplibTransport : public Transport {
 public:
  HttpResult post(const std::string& url, const std::map<std::string, std::string>& headers, const std::string& body,
                  double timeout_seconds) override {
    auto [origin, path] = split_url(url);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (origin.rfind("https://", 0) == 0) return {0, "", "https endpoint but built without OpenSSL"};
#endif
    httplib::Client cli(origin);
    const auto secs = static_cast<time_t>(timeout_seconds);
    const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers h(headers.begin(), headers.end());
    auto res = cli.Post(path, h, body, "application/json");
    if (!res) return {0, "", httplib::to_string(res.error())};
    return {res->status, res->body, ""};
  }
};

}  // namespace

std::unique_ptr<Transport> make_http_transport() { return std::make_unique<HttplibTransport>(); }

RemoteGenerator::RemoteGenerator(RemoteConfig config, std::unique_ptr<Transport> transport, Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
  if (!transport_) throw std::invalid_argument("remote: transport is null");
  if (config_.endpoint.empty()) throw std::invalid_argument("remote: endpoint is empty");
  if (!sleeper_) {
    sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
  }
}

std::string RemoteGenerator::request_body(const RemoteConfig& config, const GenRequest& request) {
  json j{{"model", config.model},
         {"messages", json::array({json{{"role", "user"}, {"content", request.prompt}}})},
         {"n", request.n},
         {"temperature", request.temperature},
         {"max_tokens", request.max_tokens}};
  return j.dump();
}

GenResponse RemoteGenerator::parse_body(const std::string& body, std::size_t n) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("remote: response is not JSON: ") + e.what());
  }
  if (!j.contains("choices") || !j["choices"].is_array()) throw std::runtime_error("remote: response has no choices array");
  GenResponse out;
  for (const auto& c : j["choices"]) {
    if (!c.contains("message") || !c["message"].contains("content") || !c["message"]["content"].is_string())
      throw std::runtime_error("remote: choice without message.content");
    out.texts.push_back(c["message"]["content"].get<std::string>());
    out.logprobs.emplace_back(std::nullopt);
  }
  if (out.texts.size() < n) throw UndercountError(n, out.texts.size());
  out.texts.resize(n);
  out.logprobs.resize(n);
  return out;
}

double RemoteGenerator::backoff(std::size_t attempt, const std::string& key) const {
  nk::Rng rng(config_.jitter_seed, std::hash<std::string>{}(key), attempt);
  return config_.backoff_base_seconds * std::ldexp(1.0, static_cast<int>(attempt) - 1) * (1.0 + rng.uniform());
}

GenResponse RemoteGenerator::generate(const GenRequest& request) {
  request.validate();
  std::map<std::string, std::string> headers;
  if (!config_.token_env.empty()) {
    if (const char* tok = std::getenv(config_.token_env.c_str()); tok && *tok)
      headers["Authorization"] = std::string("Bearer ") + tok;
  }
  const std::string body = request_body(config_, request);
  const std::string key = request_key(request);
  std::string last;
  const std::size_t max_attempts = config_.retry_budget + 1;
  for (std::size_t attempt = 1; attempt <= max_attempts; ++attempt) {
    if (attempt > 1) sleeper_(backoff(attempt - 1, key));
    HttpResult res = transport_->post(config_.endpoint, headers, body, config_.timeout_seconds);
    if (res.status == 200) return parse_body(res.body, request.n);
    if (res.status == 0) {
      last = "transport: " + res.error;
    } else {
      last = "HTTP " + std::to_string(res.status);
      // client errors other than rate limiting will not improve on retry
      if (res.status >= 400 && res.status < 500 && res.status != 408 && res.status != 429)
        throw GatewayError("remote: " + last + ": " + res.body.substr(0, 200), attempt);
    }
  }
  throw GatewayError("remote: giving up after " + std::to_string(max_attempts) + " attempts, last error " + last,
                     max_attempts);
}

void write_fixture(const std::filesystem::path& path, const std::map<std::string, std::vector<std::string>>& table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("fixture: cannot write " + path.string());
  for (const auto& [k, texts] : table) out << json{{"key", k}, {"texts", texts}}.dump() << '\n';
}

std::map<std::string, std::vector<std::string>> read_fixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("fixture: cannot open " + path.string());
  std::map<std::string, std::vector<std::string>> table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      table[j.at("key").get<std::string>()] = j.at("texts").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return table;
}

ReplayGenerator::ReplayGenerator(const std::filesystem::path& fixture) : table_(read_fixture(fixture)) {}

GenResponse ReplayGenerator::generate(const GenRequest& request) {
  request.validate();
  const auto key = request_key(request);
  auto it = table_.find(key);
  if (it == table_.end()) throw FixtureMiss(key);
  if (it->second.size() < request.n) throw UndercountError(request.n, it->second.size());
  GenResponse out;
  out.texts.assign(it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(request.n));
  out.logprobs.assign(request.n, std::nullopt);
  return out;
}

RecordReport record(Generator& source, const std::vector<GenRequest>& requests, const std::filesystem::path& fixture) {
  RecordReport report;
  std::map<std::string, std::vector<std::string>> table;
  std::set<std::string> seen;
  for (const auto& r : requests) {
    const auto key = request_key(r);
    if (!seen.insert(key).second) continue;
    try {
      table[key] = source.generate(r).texts;
    } catch (const std::exception& e) {
      report.failures.emplace_back(key, e.what());
    }
  }
  write_fixture(fixture, table);
  report.written = table.size();
  return report;
}

std::vector<GenResponse> generate_all(Generator& gen, const std::vector<GenRequest>& requests, std::size_t in_flight) {
  std::vector<GenResponse> out(requests.size());
  if (requests.empty()) return out;
  in_flight = std::max<std::size_t>(1, std::min(in_flight, requests.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        out[i] = gen.generate(requests[i]);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  if (in_flight == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < in_flight; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace prefrank::llm
