#include "prefrank/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "prefrank/checkpoint.hpp"
#include "prefrank/rng.hpp"

namespace prefrank::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;
using data::UserId;

// ---------------------------------------------------------------------------
// config

namespace {

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::Builtin: return "builtin";
    case Backend::Remote: return "remote";
    case Backend::Replay: return "replay";
  }
  return "?";
}

Backend parse_backend(const std::string& s) {
  if (s == "builtin") return Backend::Builtin;
  if (s == "remote") return Backend::Remote;
  if (s == "replay") return Backend::Replay;
  throw std::invalid_argument("config: unknown backend '" + s + "' (builtin, remote, replay)");
}

struct Field {
  std::function<json(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const json&)> set;
};

template <typename T, typename Access>
Field field(Access access) {
  return {[access](const PipelineConfig& c) { return json(access(const_cast<PipelineConfig&>(c))); },
          [access](PipelineConfig& c, const json& j) { access(c) = j.get<T>(); }};
}

#define PF_FIELD(T, expr) field<T>([](PipelineConfig& c) -> T& { return expr; })

const std::vector<std::pair<std::string, Field>>& registry() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"seed", PF_FIELD(std::uint64_t, c.seed)},
      {"data_dir", PF_FIELD(std::string, c.data_dir)},
      {"synthetic.users", PF_FIELD(std::size_t, c.synthetic.n_users)},
      {"synthetic.items", PF_FIELD(std::size_t, c.synthetic.n_items)},
      {"synthetic.genres", PF_FIELD(std::size_t, c.synthetic.n_genres)},
      {"synthetic.noise", PF_FIELD(double, c.synthetic.noise)},
      {"synthetic.seed", PF_FIELD(std::uint64_t, c.synthetic.seed)},
      {"synthetic.min_interactions", PF_FIELD(std::size_t, c.synthetic.min_interactions)},
      {"synthetic.max_interactions", PF_FIELD(std::size_t, c.synthetic.max_interactions)},
      {"synthetic.preferred_bias", PF_FIELD(double, c.synthetic.preferred_bias)},
      {"train_fraction", PF_FIELD(double, c.train_fraction)},
      {"lists.len", PF_FIELD(std::size_t, c.lists.list_len)},
      {"lists.negatives_per_positive", PF_FIELD(std::size_t, c.lists.negatives_per_positive)},
      {"lists.train_per_user", PF_FIELD(std::size_t, c.lists.train_lists_per_user)},
      {"lists.valid_per_user", PF_FIELD(std::size_t, c.lists.valid_lists_per_user)},
      {"template", PF_FIELD(std::string, c.template_path)},
      {"max_history", PF_FIELD(std::size_t, c.max_history)},
      {"backend", {[](const PipelineConfig& c) { return json(backend_name(c.backend)); },
                   [](PipelineConfig& c, const json& j) { c.backend = parse_backend(j.get<std::string>()); }}},
      {"fixture", PF_FIELD(std::string, c.fixture)},
      {"remote.endpoint", PF_FIELD(std::string, c.remote.endpoint)},
      {"remote.model", PF_FIELD(std::string, c.remote.model)},
      {"remote.token_env", PF_FIELD(std::string, c.remote.token_env)},
      {"remote.timeout", PF_FIELD(double, c.remote.timeout_seconds)},
      {"remote.retries", PF_FIELD(std::size_t, c.remote.retry_budget)},
      {"remote.backoff", PF_FIELD(double, c.remote.backoff_base_seconds)},
      {"in_flight", PF_FIELD(std::size_t, c.in_flight)},
      {"n_samples", PF_FIELD(std::size_t, c.n_samples)},
      {"rounds", PF_FIELD(std::size_t, c.rounds)},
      {"temperature", PF_FIELD(double, c.temperature)},
      {"max_new_tokens", PF_FIELD(std::size_t, c.max_new_tokens)},
      {"policy.dim", PF_FIELD(std::size_t, c.policy_dim)},
      {"policy.layers", PF_FIELD(std::size_t, c.policy_layers)},
      {"policy.heads", PF_FIELD(std::size_t, c.policy_heads)},
      {"policy.ffn", PF_FIELD(std::size_t, c.policy_ffn)},
      {"policy.context", PF_FIELD(std::size_t, c.policy_context)},
      {"warm.epochs", PF_FIELD(std::size_t, c.warm_epochs)},
      {"warm.lr", PF_FIELD(double, c.warm_lr)},
      {"warm.batch", PF_FIELD(std::size_t, c.warm_batch)},
      {"warm.genres", PF_FIELD(std::size_t, c.warm_genres)},
      {"reranker", {[](const PipelineConfig& c) { return json(rerank::kind_name(c.reranker)); },
                    [](PipelineConfig& c, const json& j) { c.reranker = rerank::parse_kind(j.get<std::string>()); }}},
      {"reranker.embed", PF_FIELD(std::size_t, c.reranker_embed)},
      {"reranker.hidden", PF_FIELD(std::size_t, c.reranker_hidden)},
      {"reranker.heads", PF_FIELD(std::size_t, c.reranker_heads)},
      {"reranker.layers", PF_FIELD(std::size_t, c.reranker_layers)},
      {"reranker.epochs", PF_FIELD(std::size_t, c.reranker_epochs)},
      {"reranker.lr", PF_FIELD(double, c.reranker_lr)},
      {"reranker.batch", PF_FIELD(std::size_t, c.reranker_batch)},
      {"knowledge", PF_FIELD(bool, c.knowledge)},
      {"knowledge.dim", PF_FIELD(std::size_t, c.knowledge_dim)},
      {"knowledge.d_text", PF_FIELD(std::size_t, c.d_text)},
      {"knowledge.adapter_hidden", PF_FIELD(std::size_t, c.adapter_hidden)},
      {"dpo", PF_FIELD(bool, c.dpo)},
      {"dpo.beta", PF_FIELD(double, c.dpo_config.beta)},
      {"dpo.lr", PF_FIELD(double, c.dpo_config.learning_rate)},
      {"dpo.accum", PF_FIELD(std::size_t, c.dpo_config.grad_accumulation)},
      {"dpo.batch", PF_FIELD(std::size_t, c.dpo_config.batch_size)},
      {"dpo.epochs", PF_FIELD(std::size_t, c.dpo_config.epochs)},
      {"refresh_reranker", PF_FIELD(bool, c.refresh_reranker)},
      {"measure_post_dpo", PF_FIELD(bool, c.measure_post_dpo)},
      {"eval_k", PF_FIELD(std::size_t, c.eval_k)},
      {"workers", PF_FIELD(std::size_t, c.workers)},
      {"out_dir", PF_FIELD(std::string, c.out_dir)},
  };
  return fields;
}

#undef PF_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& [k, f] : registry())
    if (k == key) return f;
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// key=value values: JSON scalars when they parse, otherwise bare strings.
json scalar_value(const std::string& raw) {
  if (raw == "on") return true;
  if (raw == "off") return false;
  try {
    auto j = json::parse(raw);
    if (j.is_primitive()) return j;
  } catch (const json::exception&) {
  }
  return raw;
}

}  // namespace

void PipelineConfig::validate() const {
  if (rounds < 1) throw std::invalid_argument("config: rounds must be >= 1");
  if (dpo && n_samples < 2) throw std::invalid_argument("config: n_samples must be >= 2 when dpo is on");
  if (dpo && !knowledge) throw std::invalid_argument("config: dpo needs knowledge (the reward model is the knowledge reranker)");
  if (!(temperature >= 0.0)) throw std::invalid_argument("config: temperature must be >= 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("config: train_fraction must be in (0, 1)");
  if (max_new_tokens < 1 || max_new_tokens >= policy_context)
    throw std::invalid_argument("config: max_new_tokens must be in [1, policy.context)");
  if (knowledge && knowledge_dim == 0) throw std::invalid_argument("config: knowledge.dim must be > 0");
  if (eval_k < 1) throw std::invalid_argument("config: eval_k must be >= 1");
  if (backend == Backend::Replay && fixture.empty()) throw std::invalid_argument("config: replay backend needs fixture");
  if (backend == Backend::Remote && remote.endpoint.empty())
    throw std::invalid_argument("config: remote backend needs remote.endpoint");
  if (dpo) dpo_config.validate();
}

json config_to_json(const PipelineConfig& c) {
  json j = json::object();
  for (const auto& [k, f] : registry()) j[k] = f.get(c);
  return j;
}

PipelineConfig config_from_json(const json& j, PipelineConfig base) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    try {
      find_field(k).set(base, v);
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for '" + k + "': " + e.what());
    }
  }
  return base;
}

void apply_override(PipelineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("config: expected key=value, got '" + assignment + "'");
  const auto key = trim(assignment.substr(0, eq));
  const auto value = trim(assignment.substr(eq + 1));
  try {
    find_field(key).set(c, scalar_value(value));
  } catch (const json::exception&) {
    // a string where a number was expected, e.g. "seed = abc"
    throw std::invalid_argument("config: bad value for '" + key + "': " + value);
  }
}

PipelineConfig parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') return config_from_json(json::parse(text));
  PipelineConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    apply_override(c, line);
  }
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_fingerprint(const PipelineConfig& c) {
  auto j = config_to_json(c);
  for (const char* k : {"rounds", "out_dir", "workers", "in_flight"}) j.erase(k);
  const auto s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// reports

namespace {

json metrics_json(const EvalMetrics& m) {
  return {{"ndcg", m.ndcg}, {"map", m.map}, {"users", m.users}, {"lists", m.lists}};
}

EvalMetrics metrics_from(const json& j) {
  return {j.at("ndcg").get<double>(), j.at("map").get<double>(), j.at("users").get<std::size_t>(),
          j.at("lists").get<std::size_t>()};
}

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

SetupReport setup_from_json(const json& j) {
  SetupReport r;
  r.warm_perplexity = j.at("warm_perplexity").get<std::vector<double>>();
  r.reranker_loss = j.at("reranker_loss").get<std::vector<double>>();
  r.valid = metrics_from(j.at("valid"));
  r.test = metrics_from(j.at("test"));
  r.train_users = j.at("train_users").get<std::size_t>();
  r.test_users = j.at("test_users").get<std::size_t>();
  r.degenerate_knowledge = j.at("degenerate_knowledge").get<std::size_t>();
  return r;
}

}  // namespace

json to_json(const SetupReport& r) {
  return {{"warm_perplexity", r.warm_perplexity},
          {"reranker_loss", r.reranker_loss},
          {"valid", metrics_json(r.valid)},
          {"test", metrics_json(r.test)},
          {"train_users", r.train_users},
          {"test_users", r.test_users},
          {"degenerate_knowledge", r.degenerate_knowledge}};
}

json to_json(const RoundReport& r) {
  return {{"round", r.round},
          {"users_scored", r.users_scored},
          {"skipped_no_eval", r.skipped_no_eval},
          {"pairs", r.pairs},
          {"skipped_flat", r.skipped_flat},
          {"skipped_identical", r.skipped_identical},
          {"mean_reward", r.mean_reward},
          {"best_of_n", r.best_of_n},
          {"post_dpo_mean_reward", opt(r.post_dpo_mean_reward)},
          {"post_dpo_best_of_n", opt(r.post_dpo_best_of_n)},
          {"dpo_loss", r.dpo_loss},
          {"dpo_margin", r.dpo_margin},
          {"pair_loss_after", opt(r.pair_loss_after)},
          {"pair_margin_after", opt(r.pair_margin_after)},
          {"reranker_loss", r.reranker_loss},
          {"valid", metrics_json(r.valid)},
          {"test", metrics_json(r.test)}};
}

RoundReport round_from_json(const json& j) {
  RoundReport r;
  r.round = j.at("round").get<std::size_t>();
  r.users_scored = j.at("users_scored").get<std::size_t>();
  r.skipped_no_eval = j.at("skipped_no_eval").get<std::size_t>();
  r.pairs = j.at("pairs").get<std::size_t>();
  r.skipped_flat = j.at("skipped_flat").get<std::size_t>();
  r.skipped_identical = j.at("skipped_identical").get<std::size_t>();
  r.mean_reward = j.at("mean_reward").get<double>();
  r.best_of_n = j.at("best_of_n").get<double>();
  r.post_dpo_mean_reward = opt_double(j, "post_dpo_mean_reward");
  r.post_dpo_best_of_n = opt_double(j, "post_dpo_best_of_n");
  r.dpo_loss = j.at("dpo_loss").get<std::vector<double>>();
  r.dpo_margin = j.at("dpo_margin").get<std::vector<double>>();
  r.pair_loss_after = opt_double(j, "pair_loss_after");
  r.pair_margin_after = opt_double(j, "pair_margin_after");
  r.reranker_loss = j.at("reranker_loss").get<std::vector<double>>();
  r.valid = metrics_from(j.at("valid"));
  r.test = metrics_from(j.at("test"));
  return r;
}

// ---------------------------------------------------------------------------
// run state

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint64_t tag, std::uint64_t i = 0) { return nk::Rng(seed, tag, i).next_u64(); }

}  // namespace

std::uint64_t StageSeeds::policy_init() const { return derive(base, 0x9011); }
std::uint64_t StageSeeds::warm_start() const { return derive(base, 0x3a11); }
std::uint64_t StageSeeds::reranker_init() const { return derive(base, 0x4e4a); }
std::uint64_t StageSeeds::reranker_train() const { return derive(base, 0x7a17); }
std::uint64_t StageSeeds::sampling(std::size_t round) const { return derive(base, 0x5a3b, round); }
std::uint64_t StageSeeds::dpo(std::size_t round) const { return derive(base, 0xd90, round); }

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("pipeline: cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);  // a report is either complete or absent
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("pipeline: cannot open " + path.string());
  return json::parse(in);
}

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Everything derived deterministically from the config before any training.
struct Workspace {
  PipelineConfig cfg;
  data::Dataset dataset;
  data::UserSplit split;
  data::ListBuild build;
  std::vector<data::CandidateList> train_lists, valid_lists, test_lists;
  reward::ListsByUser valid_by_user;
  std::vector<UserId> train_users, test_users;  // users with at least one list
  std::map<UserId, data::UserProfile> profiles;  // held-out items removed
  knowledge::PromptTemplate tpl = knowledge::PromptTemplate::default_template();
  policy::Vocab vocab;
  std::map<UserId, std::string> prompts;
  std::map<UserId, std::vector<policy::TokenId>> prompt_ids;
  std::unique_ptr<llm::Generator> gateway;
};

void prepare(Workspace& ws, const PipelineConfig& cfg) {
  ws.cfg = cfg;
  if (cfg.data_dir.empty()) {
    ws.dataset = data::generate_synthetic_world(cfg.synthetic).dataset;
  } else {
    ws.dataset = data::ingest_jsonl(cfg.data_dir);
  }
  ws.split = data::split_by_user(ws.dataset.profiles, cfg.train_fraction, cfg.seed);
  ws.build = data::build_candidate_lists(ws.dataset, ws.split, cfg.lists, cfg.seed);
  std::set<UserId> tr, te;
  for (const auto& l : ws.build.lists) {
    switch (l.split) {
      case data::SplitTag::Train: ws.train_lists.push_back(l); tr.insert(l.user_id); break;
      case data::SplitTag::Valid: ws.valid_lists.push_back(l); tr.insert(l.user_id); break;
      case data::SplitTag::Test: ws.test_lists.push_back(l); te.insert(l.user_id); break;
    }
  }
  if (ws.train_lists.empty() || ws.test_lists.empty())
    throw data::DataError("pipeline: need train and test lists; check the dataset and list settings");
  ws.valid_by_user = reward::group_lists(ws.valid_lists, data::SplitTag::Valid);
  ws.train_users.assign(tr.begin(), tr.end());
  ws.test_users.assign(te.begin(), te.end());
  ws.profiles = data::strip_held_out(ws.dataset.profiles, ws.build.held_out);
  if (!cfg.template_path.empty()) {
    ws.tpl = knowledge::PromptTemplate::load(cfg.template_path, cfg.max_history);
  } else {
    ws.tpl = knowledge::PromptTemplate::default_template(cfg.max_history);
  }
  if (!cfg.knowledge) return;

  // vocabulary: full prompts of every listed user plus the preference templates
  std::vector<std::string> corpus;
  std::vector<UserId> everyone(ws.train_users);
  everyone.insert(everyone.end(), ws.test_users.begin(), ws.test_users.end());
  for (UserId u : everyone) corpus.push_back(knowledge::render_prompt(ws.tpl, ws.profiles.at(u), ws.dataset.catalog));
  const auto& genres = ws.dataset.catalog.genre_vocab();
  for (std::size_t v = 0; v < policy::kPreferenceTemplates; ++v) corpus.push_back(policy::preference_sentence(genres, v));
  ws.vocab = policy::Vocab::build(corpus);
  const std::size_t budget = cfg.policy_context - cfg.max_new_tokens;
  for (UserId u : everyone) {
    ws.prompts[u] = knowledge::render_prompt_fitting(ws.tpl, ws.profiles.at(u), ws.dataset.catalog, ws.vocab, budget);
    ws.prompt_ids[u] = ws.vocab.encode_prompt(ws.prompts[u]);
  }
  if (cfg.backend == Backend::Replay) ws.gateway = std::make_unique<llm::ReplayGenerator>(cfg.fixture);
  if (cfg.backend == Backend::Remote) {
    auto rc = cfg.remote;
    rc.jitter_seed = derive(cfg.seed, 0x7177);
    ws.gateway = std::make_unique<llm::RemoteGenerator>(rc, llm::make_http_transport());
  }
}

policy::PolicyConfig policy_config(const Workspace& ws) {
  policy::PolicyConfig pc;
  pc.vocab_size = ws.vocab.size();
  pc.model_dim = ws.cfg.policy_dim;
  pc.n_layers = ws.cfg.policy_layers;
  pc.n_heads = ws.cfg.policy_heads;
  pc.ffn_dim = ws.cfg.policy_ffn;
  pc.context = ws.cfg.policy_context;
  return pc;
}

rerank::RerankerConfig reranker_config(const Workspace& ws) {
  rerank::RerankerConfig rc;
  rc.kind = ws.cfg.reranker;
  rc.item_embed_dim = ws.cfg.reranker_embed;
  rc.hidden_dim = ws.cfg.reranker_hidden;
  rc.n_heads = ws.cfg.reranker_heads;
  rc.n_layers = ws.cfg.reranker_layers;
  rc.list_len = ws.cfg.lists.list_len;
  rc.n_items = static_cast<std::size_t>(ws.dataset.catalog.max_id()) + 1;
  rc.n_users = ws.dataset.profiles.empty() ? 1 : static_cast<std::size_t>(ws.dataset.profiles.rbegin()->first) + 1;
  if (ws.cfg.knowledge) {
    rc.knowledge_dim = ws.cfg.knowledge_dim;
    rc.text_vocab_size = ws.vocab.size();
    rc.d_text = ws.cfg.d_text;
    rc.adapter_hidden = ws.cfg.adapter_hidden;
  }
  return rc;
}

// N responses per user. The builtin policy samples directly so token ids and
// log-probabilities stay exact; gateway texts are retokenized.
reward::ResponsesByUser generate(const Workspace& ws, const policy::PolicyModel& model, const std::vector<UserId>& users,
                                 std::size_t n, double temperature, std::uint64_t seed) {
  policy::SampleConfig sc;
  sc.max_new_tokens = ws.cfg.max_new_tokens;
  sc.temperature = temperature;
  std::vector<std::vector<policy::ReasoningResponse>> out(users.size());
  if (!ws.gateway) {
    parallel_for(users.size(), ws.cfg.workers, [&](std::size_t i) {
      out[i] = policy::sample_n(model, ws.vocab, ws.prompt_ids.at(users[i]), n, sc, seed, users[i]);
    });
  } else {
    std::vector<llm::GenRequest> reqs;
    for (UserId u : users) {
      llm::GenRequest r;
      r.prompt = ws.prompts.at(u);
      r.n = n;
      r.temperature = temperature;
      r.max_tokens = ws.cfg.max_new_tokens;
      r.user_id = u;
      reqs.push_back(std::move(r));
    }
    auto res = llm::generate_all(*ws.gateway, reqs, ws.cfg.in_flight);
    parallel_for(users.size(), ws.cfg.workers, [&](std::size_t i) {
      const auto& p = ws.prompt_ids.at(users[i]);
      for (std::size_t k = 0; k < n; ++k) {
        policy::ReasoningResponse r;
        r.user_id = users[i];
        r.sample_index = k;
        r.tokens = ws.vocab.tokenize(res[i].texts[k]);
        if (r.tokens.size() >= ws.cfg.max_new_tokens) {
          r.tokens.resize(ws.cfg.max_new_tokens);
        } else {
          r.tokens.push_back(policy::kEos);
        }
        r.text = ws.vocab.detokenize(r.tokens);
        r.logprob_policy = policy::sequence_logprob(model, p, r.tokens);
        out[i].push_back(std::move(r));
      }
    });
  }
  reward::ResponsesByUser by_user;
  for (std::size_t i = 0; i < users.size(); ++i) by_user[users[i]] = std::move(out[i]);
  return by_user;
}

knowledge::KnowledgeMap greedy_knowledge(const Workspace& ws, const policy::PolicyModel& model,
                                         const std::vector<UserId>& users, std::vector<knowledge::KnowledgeRecord>* records) {
  auto rs = generate(ws, model, users, 1, 0.0, 0);
  knowledge::KnowledgeMap km;
  for (auto& [u, list] : rs) {
    if (records) records->push_back({u, 0, list[0].text});
    km[u] = std::move(list[0].tokens);
  }
  return km;
}

std::vector<policy::LmExample> warm_corpus(const Workspace& ws) {
  std::vector<policy::LmExample> corpus;
  for (UserId u : ws.train_users) {
    auto genres = knowledge::liked_genres(ws.profiles.at(u), ws.dataset.catalog, ws.cfg.warm_genres);
    const std::size_t variant = nk::Rng(ws.cfg.seed, 0x3a7e, static_cast<std::uint64_t>(u)).below(policy::kPreferenceTemplates);
    auto target = ws.vocab.tokenize(policy::preference_sentence(genres, variant));
    target.push_back(policy::kEos);
    if (target.size() > ws.cfg.max_new_tokens) target.resize(ws.cfg.max_new_tokens);
    corpus.push_back({ws.prompt_ids.at(u), std::move(target)});
  }
  return corpus;
}

rerank::TrainConfig reranker_train_config(const PipelineConfig& cfg) {
  rerank::TrainConfig tc;
  tc.epochs = cfg.reranker_epochs;
  tc.learning_rate = cfg.reranker_lr;
  tc.batch_size = cfg.reranker_batch;
  tc.seed = stage_seeds(cfg).reranker_train();
  return tc;
}

EvalMetrics to_metrics(const rerank::EvalResult& r) { return {r.ndcg, r.map, r.users, r.lists}; }

struct TrainedReranker {
  rerank::RerankerModel model;
  std::vector<double> curve;
};

// Fresh initialisation from the same seed every time, so only the knowledge differs.
TrainedReranker train_fresh_reranker(const Workspace& ws, const knowledge::KnowledgeMap* km) {
  TrainedReranker t{rerank::RerankerModel(reranker_config(ws), stage_seeds(ws.cfg).reranker_init()), {}};
  t.curve = rerank::train_reranker(t.model, ws.train_lists, km, reranker_train_config(ws.cfg));
  return t;
}

EvalMetrics eval_on(const Workspace& ws, const rerank::RerankerModel& m, const std::vector<data::CandidateList>& lists,
                    const knowledge::KnowledgeMap* km) {
  if (lists.empty()) return {};
  return to_metrics(rerank::evaluate(m, lists, km, ws.cfg.eval_k));
}

std::string csv_row(const RoundReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << r.round << ',' << r.pairs << ',' << r.mean_reward << ',' << r.best_of_n << ',';
  if (r.post_dpo_best_of_n) os << *r.post_dpo_best_of_n;
  os << ',';
  if (!r.dpo_loss.empty()) os << r.dpo_loss.back();
  os << ',';
  if (r.pair_loss_after) os << *r.pair_loss_after;
  os << ',' << r.test.ndcg << ',' << r.test.map << '\n';
  return os.str();
}

void write_summary(const fs::path& dir, const SetupReport& setup, const std::vector<RoundReport>& rounds) {
  std::ostringstream os;
  os << "round,pairs,mean_reward,best_of_n,post_dpo_best_of_n,final_dpo_loss,pair_loss_after,test_ndcg,test_map\n";
  os << std::setprecision(10) << "0,,,,,,," << setup.test.ndcg << ',' << setup.test.map << '\n';
  for (const auto& r : rounds) os << csv_row(r);
  write_text(dir / "summary.csv", os.str());
}

// Separate from the reports: wall-clock never enters a report, so identical
// configs give byte-identical reports.
class Timings {
 public:
  explicit Timings(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      try {
        data_ = read_json(path_);
      } catch (const std::exception&) {
        data_ = json::object();
      }
    }
  }
  void record(const std::string& section, const std::string& stage, double seconds) {
    data_[section][stage] = seconds;
    write_text(path_, data_.dump(2) + "\n");
  }

 private:
  fs::path path_;
  json data_ = json::object();
};

}  // namespace

// ---------------------------------------------------------------------------

namespace {

struct SetupState {
  SetupReport report;
  policy::PolicyModel policy;
  rerank::RerankerModel reranker;
};

SetupState run_setup(const Workspace& ws, Timings* timings) {
  SetupState s;
  s.report.train_users = ws.train_users.size();
  s.report.test_users = ws.test_users.size();
  if (!ws.cfg.knowledge) {
    Stopwatch sw;
    auto t = train_fresh_reranker(ws, nullptr);
    s.reranker = std::move(t.model);
    s.report.reranker_loss = std::move(t.curve);
    s.report.valid = eval_on(ws, s.reranker, ws.valid_lists, nullptr);
    s.report.test = eval_on(ws, s.reranker, ws.test_lists, nullptr);
    if (timings) timings->record("setup", "reranker", sw.seconds());
    return s;
  }
  Stopwatch sw;
  s.policy = policy::PolicyModel(policy_config(ws), stage_seeds(ws.cfg).policy_init());
  policy::WarmStartConfig wc;
  wc.epochs = ws.cfg.warm_epochs;
  wc.learning_rate = ws.cfg.warm_lr;
  wc.batch_size = ws.cfg.warm_batch;
  wc.seed = stage_seeds(ws.cfg).warm_start();
  s.report.warm_perplexity = policy::warm_start(s.policy, warm_corpus(ws), wc);
  if (timings) timings->record("setup", "warm_start", sw.seconds());

  Stopwatch sk;
  knowledge::reset_degenerate_encodings();
  auto km = greedy_knowledge(ws, s.policy, ws.train_users, nullptr);
  auto test_km = greedy_knowledge(ws, s.policy, ws.test_users, nullptr);
  if (timings) timings->record("setup", "knowledge", sk.seconds());
  Stopwatch sr;
  auto t = train_fresh_reranker(ws, &km);
  s.reranker = std::move(t.model);
  s.report.reranker_loss = std::move(t.curve);
  s.report.valid = eval_on(ws, s.reranker, ws.valid_lists, &km);
  s.report.test = eval_on(ws, s.reranker, ws.test_lists, &test_km);
  s.report.degenerate_knowledge = knowledge::degenerate_encodings();
  if (timings) timings->record("setup", "reranker", sr.seconds());
  return s;
}

void save_knowledge(const fs::path& path, const knowledge::KnowledgeMap& km, const policy::Vocab& vocab) {
  std::vector<knowledge::KnowledgeRecord> recs;
  for (const auto& [u, ids] : km) recs.push_back({u, 0, vocab.detokenize(ids)});
  knowledge::write_knowledge(path, recs);
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.validate();
  Workspace ws;
  prepare(ws, config);
  const fs::path dir = config.out_dir;
  const fs::path state = dir / "state";
  fs::create_directories(state);

  const auto fp = config_fingerprint(config);
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    const auto old = read_json(manifest).at("fingerprint").get<std::string>();
    if (old != fp) {
      throw std::runtime_error("pipeline: " + dir.string() + " holds a run with a different config (fingerprint " +
                               old + ", now " + fp + ")");
    }
  } else {
    json cj = config_to_json(config);
    cj.erase("rounds");
    cj.erase("out_dir");
    cj.erase("workers");
    cj.erase("in_flight");
    write_text(manifest, json{{"fingerprint", fp}, {"config", cj}}.dump(2) + "\n");
  }
  Timings timings(dir / "timings.json");
  // inputs for the single-stage CLI commands
  data::write_lists(dir / "lists.jsonl", ws.build.lists);
  if (config.knowledge) {
    ws.vocab.save(state / "vocab.json");
    std::ostringstream prompts;
    for (const auto& [u, text] : ws.prompts) prompts << json{{"user", u}, {"prompt", text}}.dump() << '\n';
    write_text(dir / "prompts.jsonl", prompts.str());
  }

  PipelineResult result;
  SetupState setup;
  const bool have_setup = fs::exists(dir / "setup.json") && fs::exists(state / "setup.reranker") &&
                          (!config.knowledge || fs::exists(state / "setup.policy"));
  if (have_setup) {
    setup.report = setup_from_json(read_json(dir / "setup.json"));
    setup.reranker = rerank::RerankerModel::load(state / "setup.reranker");
    if (config.knowledge) setup.policy = policy::PolicyModel::load(state / "setup.policy");
  } else {
    setup = run_setup(ws, &timings);
    setup.reranker.save(state / "setup.reranker");
    if (config.knowledge) setup.policy.save(state / "setup.policy");
    write_text(dir / "setup.json", to_json(setup.report).dump(2) + "\n");
  }
  result.setup = setup.report;
  policy::PolicyModel policy = std::move(setup.policy);
  rerank::RerankerModel reward_model = std::move(setup.reranker);

  for (std::size_t r = 1; r <= config.rounds; ++r) {
    const std::string tag = "round_" + std::to_string(r);
    const fs::path report_path = dir / (tag + ".json");
    const fs::path pol_path = state / (tag + ".policy"), rr_path = state / (tag + ".reranker");
    if (fs::exists(report_path) && fs::exists(rr_path) && (!config.knowledge || fs::exists(pol_path))) {
      result.rounds.push_back(round_from_json(read_json(report_path)));
      reward_model = rerank::RerankerModel::load(rr_path);
      if (config.knowledge) policy = policy::PolicyModel::load(pol_path);
      ++result.resumed_rounds;
      continue;
    }

    RoundReport rep;
    rep.round = r;
    std::string stage = "start";
    try {
      if (!config.dpo) {
        // nothing changes the policy, so knowledge and reranker stay as they are
        stage = "evaluate";
        knowledge::KnowledgeMap train_km, test_km;
        if (config.knowledge) {
          train_km = greedy_knowledge(ws, policy, ws.train_users, nullptr);
          test_km = greedy_knowledge(ws, policy, ws.test_users, nullptr);
        }
        rep.valid = eval_on(ws, reward_model, ws.valid_lists, config.knowledge ? &train_km : nullptr);
        rep.test = eval_on(ws, reward_model, ws.test_lists, config.knowledge ? &test_km : nullptr);
      } else {
        // (1) reference snapshot
        const policy::PolicyModel reference = policy;
        const std::uint64_t sample_seed = stage_seeds(config).sampling(r);

        // (2) N responses per train user
        stage = "generate";
        Stopwatch sg;
        auto responses = generate(ws, policy, ws.train_users, config.n_samples, config.temperature, sample_seed);
        timings.record(tag, "generate", sg.seconds());
        {
          std::vector<policy::ReasoningResponse> flat;
          for (const auto& [_, rs] : responses) flat.insert(flat.end(), rs.begin(), rs.end());
          policy::write_responses(dir / (tag + ".responses.jsonl"), flat);
        }

        // (3) rewards on held-in validation lists
        stage = "score";
        Stopwatch ss;
        auto table = reward::score_responses(reward_model, responses, ws.valid_by_user, config.eval_k);
        timings.record(tag, "score", ss.seconds());
        reward::write_score_table(dir / (tag + ".scores.jsonl"), table);
        rep.users_scored = table.rows.size();
        rep.skipped_no_eval = table.skipped_users;
        rep.mean_reward = table.mean_reward();
        rep.best_of_n = table.mean_best();

        // (4) pairs
        stage = "mine";
        auto mined = dpo::mine_pairs(table, responses, ws.prompts, ws.vocab, ws.valid_by_user);
        dpo::write_pairs(dir / (tag + ".pairs.jsonl"), mined.pairs);
        rep.pairs = mined.pairs.size();
        rep.skipped_flat = mined.skipped_flat;
        rep.skipped_identical = mined.skipped_identical;

        // (5) DPO
        stage = "dpo";
        Stopwatch sd;
        if (!mined.pairs.empty()) {
          auto trace = dpo::dpo_train(policy, reference, mined.pairs, config.dpo_config, stage_seeds(config).dpo(r));
          rep.dpo_loss = std::move(trace.loss);
          rep.dpo_margin = std::move(trace.margin);
          double l = 0.0, m = 0.0;
          for (const auto& p : mined.pairs) {
            auto v = dpo::dpo_loss_value(policy, reference, p, config.dpo_config.beta);
            l += v.loss;
            m += v.margin;
          }
          rep.pair_loss_after = l / static_cast<double>(mined.pairs.size());
          rep.pair_margin_after = m / static_cast<double>(mined.pairs.size());
        }
        timings.record(tag, "dpo", sd.seconds());

        if (config.measure_post_dpo) {
          // same streams, same reward model: only the policy changed
          stage = "post_dpo";
          auto again = generate(ws, policy, ws.train_users, config.n_samples, config.temperature, sample_seed);
          auto t2 = reward::score_responses(reward_model, again, ws.valid_by_user, config.eval_k);
          rep.post_dpo_mean_reward = t2.mean_reward();
          rep.post_dpo_best_of_n = t2.mean_best();
        }

        // (6) fresh greedy knowledge; optionally retrain the reranker on it
        stage = "refresh";
        Stopwatch sr;
        auto train_km = greedy_knowledge(ws, policy, ws.train_users, nullptr);
        auto test_km = greedy_knowledge(ws, policy, ws.test_users, nullptr);
        save_knowledge(dir / (tag + ".knowledge.jsonl"), train_km, ws.vocab);
        if (config.refresh_reranker) {
          auto t = train_fresh_reranker(ws, &train_km);
          reward_model = std::move(t.model);
          rep.reranker_loss = std::move(t.curve);
        }
        timings.record(tag, "refresh", sr.seconds());

        // (7) evaluation
        stage = "evaluate";
        rep.valid = eval_on(ws, reward_model, ws.valid_lists, &train_km);
        rep.test = eval_on(ws, reward_model, ws.test_lists, &test_km);
      }
    } catch (const std::exception& e) {
      json partial = to_json(rep);
      partial["failed_stage"] = stage;
      partial["error"] = e.what();
      write_text(dir / (tag + ".partial.json"), partial.dump(2) + "\n");
      throw;
    }
    if (config.knowledge) policy.save(pol_path);
    reward_model.save(rr_path);
    write_text(report_path, to_json(rep).dump(2) + "\n");
    fs::remove(dir / (tag + ".partial.json"));
    result.rounds.push_back(std::move(rep));
    write_summary(dir, result.setup, result.rounds);
  }
  write_summary(dir, result.setup, result.rounds);
  result.policy = std::move(policy);
  result.reranker = std::move(reward_model);
  return result;
}

std::vector<AblationRow> run_ablation(const PipelineConfig& config) {
  PipelineConfig backbone = config;
  backbone.knowledge = false;
  backbone.dpo = false;
  backbone.rounds = 1;
  backbone.out_dir = (fs::path(config.out_dir) / "backbone").string();
  PipelineConfig full = config;
  full.knowledge = true;
  full.dpo = true;
  full.out_dir = (fs::path(config.out_dir) / "knowledge_dpo").string();

  auto b = run_pipeline(backbone);
  auto f = run_pipeline(full);
  // The +knowledge arm is the full arm's setup stage: the same warm-started
  // policy, knowledge and reranker that a knowledge-on, dpo-off run builds.
  std::vector<AblationRow> rows{{"backbone", b.rounds.back().test},
                                {"+knowledge", f.setup.test},
                                {"+knowledge+dpo", f.rounds.back().test}};
  json j = json::array();
  std::ostringstream csv;
  csv << "arm,test_ndcg,test_map,test_users\n" << std::setprecision(10);
  for (const auto& r : rows) {
    j.push_back({{"arm", r.arm}, {"test", metrics_json(r.test)}});
    csv << r.arm << ',' << r.test.ndcg << ',' << r.test.map << ',' << r.test.users << '\n';
  }
  write_text(fs::path(config.out_dir) / "ablation.json", j.dump(2) + "\n");
  write_text(fs::path(config.out_dir) / "ablation.csv", csv.str());
  return rows;
}

std::vector<SweepRow> sweep_n(const PipelineConfig& config, const std::vector<std::size_t>& n_values, std::size_t reps) {
  if (n_values.empty()) throw std::invalid_argument("sweep_n: no n values");
  for (auto n : n_values)
    if (n < 1) throw std::invalid_argument("sweep_n: n must be >= 1");
  PipelineConfig cfg = config;
  cfg.knowledge = true;
  cfg.validate();
  Workspace ws;
  prepare(ws, cfg);
  auto setup = run_setup(ws, nullptr);
  const std::uint64_t sample_seed = stage_seeds(cfg).sampling(1);
  // only users with a held-in list carry a reward
  std::vector<UserId> users;
  for (UserId u : ws.train_users)
    if (ws.valid_by_user.count(u)) users.push_back(u);

  std::vector<SweepRow> rows;
  for (std::size_t n : n_values) {
    SweepRow row;
    row.n = n;
    reward::ResponsesByUser responses;
    row.generation_seconds = std::numeric_limits<double>::infinity();
    for (std::size_t rep = 0; rep < std::max<std::size_t>(1, reps); ++rep) {
      Stopwatch sw;
      responses = generate(ws, setup.policy, users, n, cfg.temperature, sample_seed);
      row.generation_seconds = std::min(row.generation_seconds, sw.seconds());
    }
    auto table = reward::score_responses(setup.reranker, responses, ws.valid_by_user, cfg.eval_k);
    row.best_of_n = table.mean_best();
    row.mean_reward = table.mean_reward();
    rows.push_back(row);
  }
  json j = json::array();
  for (const auto& r : rows)
    j.push_back({{"n", r.n}, {"best_of_n", r.best_of_n}, {"mean_reward", r.mean_reward}, {"generation_seconds", r.generation_seconds}});
  write_text(fs::path(cfg.out_dir) / "sweep_n.json", j.dump(2) + "\n");
  return rows;
}

std::map<UserId, std::string> read_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("prompts: cannot open " + path.string());
  std::map<UserId, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = json::parse(line);
      out[j.at("user").get<UserId>()] = j.at("prompt").get<std::string>();
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace prefrank::pipeline
