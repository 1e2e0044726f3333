#include "prefrank/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "prefrank/checkpoint.hpp"
#include "prefrank/rng.hpp"

namespace prefrank::policy {

using nk::Graph;
using nk::Tensor;
using nk::Var;

namespace {

constexpr double kMasked = -1e9;
constexpr double kLnEps = 1e-5;

std::string lname(std::size_t l, const char* what) { return "l" + std::to_string(l) + "." + what; }

nlohmann::json config_json(const PolicyConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"ffn_dim", c.ffn_dim},       {"context", c.context},
          {"init_std", c.init_std},     {"mask_special_tokens", c.mask_special_tokens}};
}

PolicyConfig config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.init_std = j.value("init_std", 0.02);
  c.mask_special_tokens = j.value("mask_special_tokens", true);
  return c;
}

bool is_masked(const PolicyConfig& c, std::size_t v) {
  return c.mask_special_tokens && (v == static_cast<std::size_t>(kPad) || v == static_cast<std::size_t>(kBos) ||
                                   v == static_cast<std::size_t>(kUnk));
}

Var affine_norm(Var x, Var gain, Var bias) { return nk::add(nk::mul(nk::layer_norm(x, kLnEps), gain), bias); }

Var linear(Var x, Var w, Var b) { return nk::add(nk::matmul(x, w), b); }

/// Final-norm hidden states for every position, [len, dim].
Var hidden_states(Graph& g, const PolicyModel& model, const std::vector<TokenId>& ids) {
  const auto& c = model.config();
  const auto& P = model.params();
  const std::size_t S = ids.size();
  if (S == 0) throw std::invalid_argument("policy: empty token sequence");
  if (S > c.context) {
    throw ContextOverflow("policy: sequence of " + std::to_string(S) + " tokens exceeds context " +
                          std::to_string(c.context));
  }
  std::vector<std::size_t> idx(S);
  for (std::size_t i = 0; i < S; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= c.vocab_size) {
      throw std::out_of_range("policy: token id " + std::to_string(ids[i]) + " outside vocabulary");
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
  }
  Var x = nk::add(nk::embedding(g.param(P, "tok_emb"), idx), nk::slice(g.param(P, "pos_emb"), 0, 0, S));

  Tensor mask({S, S}, 0.0);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = i + 1; j < S; ++j) mask.at(i, j) = kMasked;
  Var causal = g.constant(std::move(mask));

  const std::size_t dh = c.model_dim / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Var a = affine_norm(x, g.param(P, lname(l, "ln1_g")), g.param(P, lname(l, "ln1_b")));
    Var q = linear(a, g.param(P, lname(l, "wq")), g.param(P, lname(l, "bq")));
    Var k = linear(a, g.param(P, lname(l, "wk")), g.param(P, lname(l, "bk")));
    Var v = linear(a, g.param(P, lname(l, "wv")), g.param(P, lname(l, "bv")));
    std::vector<Var> heads;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      Var qh = nk::slice(q, 1, h * dh, dh);
      Var kh = nk::slice(k, 1, h * dh, dh);
      Var vh = nk::slice(v, 1, h * dh, dh);
      Var scores = nk::add(nk::mul(nk::matmul(qh, kh, true), scale), causal);
      heads.push_back(nk::matmul(nk::softmax(scores, 1), vh));
    }
    Var attn = heads.size() == 1 ? heads[0] : nk::concat(heads, 1);
    x = nk::add(x, linear(attn, g.param(P, lname(l, "wo")), g.param(P, lname(l, "bo"))));
    Var a2 = affine_norm(x, g.param(P, lname(l, "ln2_g")), g.param(P, lname(l, "ln2_b")));
    Var f = nk::relu(linear(a2, g.param(P, lname(l, "w1")), g.param(P, lname(l, "b1"))));
    x = nk::add(x, linear(f, g.param(P, lname(l, "w2")), g.param(P, lname(l, "b2"))));
  }
  return affine_norm(x, g.param(P, "lnf_g"), g.param(P, "lnf_b"));
}

Var project(Graph& g, const PolicyModel& model, Var h) {
  const auto& c = model.config();
  Var logits = nk::matmul(h, g.param(model.params(), "tok_emb"), true);
  if (!c.mask_special_tokens) return logits;
  Tensor m({1, c.vocab_size}, 0.0);
  for (std::size_t v = 0; v < c.vocab_size; ++v)
    if (is_masked(c, v)) m[v] = kMasked;
  return nk::add(logits, g.constant(std::move(m)));
}

void check_lengths(const PolicyConfig& c, std::size_t prompt, std::size_t response) {
  if (prompt == 0) throw std::invalid_argument("policy: prompt must contain at least BOS");
  if (response == 0) throw std::invalid_argument("policy: empty response");
  if (prompt + response > c.context) {
    throw ContextOverflow("policy: prompt (" + std::to_string(prompt) + ") + response (" + std::to_string(response) +
                          ") exceeds context " + std::to_string(c.context));
  }
}

// Row-vector times a row-major [in, out] matrix plus bias.
void affine_row(const double* x, const Tensor& w, const Tensor& b, std::vector<double>& out) {
  const std::size_t in = w.rows(), n = w.cols();
  out.assign(n, 0.0);
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wr = w.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xi * wr[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] += b[j];
}

void norm_row(const std::vector<double>& x, const Tensor& gain, const Tensor& bias, std::vector<double>& out) {
  const std::size_t C = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(C);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(C);
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  out.resize(C);
  for (std::size_t i = 0; i < C; ++i) out[i] = (x[i] - mu) * inv * gain[i] + bias[i];
}

void log_softmax_row(const std::vector<double>& logits, std::vector<double>& out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  out.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

}  // namespace

PolicyModel::PolicyModel(const PolicyConfig& config, std::uint64_t seed) : config_(config) {
  const auto& c = config_;
  if (c.vocab_size <= static_cast<std::size_t>(kNumSpecial)) {
    throw std::invalid_argument("policy: vocab_size must exceed the special tokens");
  }
  if (c.n_heads == 0 || c.model_dim % c.n_heads != 0) {
    throw std::invalid_argument("policy: model_dim must be divisible by n_heads");
  }
  nk::Rng rng(seed, 0x9011c7);
  const std::size_t d = c.model_dim;
  params_.add("tok_emb", nk::random_normal({c.vocab_size, d}, c.init_std, rng));
  params_.add("pos_emb", nk::random_normal({c.context, d}, c.init_std, rng));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    params_.add(lname(l, "ln1_g"), Tensor({1, d}, 1.0));
    params_.add(lname(l, "ln1_b"), Tensor({1, d}, 0.0));
    for (const char* w : {"wq", "wk", "wv", "wo"}) params_.add(lname(l, w), nk::random_normal({d, d}, c.init_std, rng));
    for (const char* b : {"bq", "bk", "bv", "bo"}) params_.add(lname(l, b), Tensor({1, d}, 0.0));
    params_.add(lname(l, "ln2_g"), Tensor({1, d}, 1.0));
    params_.add(lname(l, "ln2_b"), Tensor({1, d}, 0.0));
    params_.add(lname(l, "w1"), nk::random_normal({d, c.ffn_dim}, c.init_std, rng));
    params_.add(lname(l, "b1"), Tensor({1, c.ffn_dim}, 0.0));
    params_.add(lname(l, "w2"), nk::random_normal({c.ffn_dim, d}, c.init_std, rng));
    params_.add(lname(l, "b2"), Tensor({1, d}, 0.0));
  }
  params_.add("lnf_g", Tensor({1, d}, 1.0));
  params_.add("lnf_b", Tensor({1, d}, 0.0));
}

void PolicyModel::save(const std::filesystem::path& path) const {
  nk::save_checkpoint(path, params_, {{"kind", "policy"}, {"config", config_json(config_)}});
}

PolicyModel PolicyModel::load(const std::filesystem::path& path) {
  auto ck = nk::load_checkpoint(path);
  if (ck.meta.value("kind", "") != "policy") throw std::runtime_error("policy: " + path.string() + " is not a policy checkpoint");
  PolicyModel m;
  m.config_ = config_from_json(ck.meta.at("config"));
  m.params_ = std::move(ck.params);
  return m;
}

Var forward_logits(Graph& g, const PolicyModel& model, const std::vector<TokenId>& ids) {
  return project(g, model, hidden_states(g, model, ids));
}

Var sequence_logprob(Graph& g, const PolicyModel& model, const std::vector<TokenId>& prompt,
                     const std::vector<TokenId>& response) {
  const auto& c = model.config();
  check_lengths(c, prompt.size(), response.size());
  std::vector<TokenId> input(prompt);
  input.insert(input.end(), response.begin(), response.end() - 1);
  const std::size_t P = prompt.size(), R = response.size();
  Var h = nk::slice(hidden_states(g, model, input), 0, P - 1, R);
  Var lp = nk::log_softmax(project(g, model, h), 1);
  Tensor pick({R, c.vocab_size}, 0.0);
  for (std::size_t t = 0; t < R; ++t) {
    if (response[t] < 0 || static_cast<std::size_t>(response[t]) >= c.vocab_size) {
      throw std::out_of_range("policy: response token outside vocabulary");
    }
    pick.at(t, static_cast<std::size_t>(response[t])) = 1.0;
  }
  return nk::sum(nk::mul(lp, g.constant(std::move(pick))));
}

double sequence_logprob(const PolicyModel& model, const std::vector<TokenId>& prompt,
                        const std::vector<TokenId>& response) {
  Graph g(false);
  return sequence_logprob(g, model, prompt, response).value().item();
}

StepDecoder::StepDecoder(const PolicyModel& model) : model_(&model) {
  const auto& c = model.config();
  keys_.assign(c.n_layers, std::vector<double>(c.context * c.model_dim, 0.0));
  values_.assign(c.n_layers, std::vector<double>(c.context * c.model_dim, 0.0));
}

const std::vector<double>& StepDecoder::feed(TokenId token) {
  const auto& c = model_->config();
  const auto& P = model_->params();
  if (pos_ >= c.context) throw ContextOverflow("policy: decoder context of " + std::to_string(c.context) + " exhausted");
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
    throw std::out_of_range("policy: token id " + std::to_string(token) + " outside vocabulary");
  }
  const std::size_t d = c.model_dim, dh = d / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& tok = P.get("tok_emb");
  const Tensor& pos = P.get("pos_emb");

  std::vector<double> x(d), a, q, k, v, attn(d), o, f, f2;
  for (std::size_t i = 0; i < d; ++i) x[i] = tok.at(static_cast<std::size_t>(token), i) + pos.at(pos_, i);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    norm_row(x, P.get(lname(l, "ln1_g")), P.get(lname(l, "ln1_b")), a);
    affine_row(a.data(), P.get(lname(l, "wq")), P.get(lname(l, "bq")), q);
    affine_row(a.data(), P.get(lname(l, "wk")), P.get(lname(l, "bk")), k);
    affine_row(a.data(), P.get(lname(l, "wv")), P.get(lname(l, "bv")), v);
    std::copy(k.begin(), k.end(), keys_[l].begin() + static_cast<std::ptrdiff_t>(pos_ * d));
    std::copy(v.begin(), v.end(), values_[l].begin() + static_cast<std::ptrdiff_t>(pos_ * d));
    std::vector<double> scores(pos_ + 1);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t <= pos_; ++t) {
        const double* kt = keys_[l].data() + t * d + off;
        double s = 0.0;
        for (std::size_t i = 0; i < dh; ++i) s += q[off + i] * kt[i];
        scores[t] = s * scale;
      }
      const double mx = *std::max_element(scores.begin(), scores.end());
      double z = 0.0;
      for (double& s : scores) z += (s = std::exp(s - mx));
      for (std::size_t i = 0; i < dh; ++i) attn[off + i] = 0.0;
      for (std::size_t t = 0; t <= pos_; ++t) {
        const double p = scores[t] / z;
        const double* vt = values_[l].data() + t * d + off;
        for (std::size_t i = 0; i < dh; ++i) attn[off + i] += p * vt[i];
      }
    }
    affine_row(attn.data(), P.get(lname(l, "wo")), P.get(lname(l, "bo")), o);
    for (std::size_t i = 0; i < d; ++i) x[i] += o[i];
    norm_row(x, P.get(lname(l, "ln2_g")), P.get(lname(l, "ln2_b")), a);
    affine_row(a.data(), P.get(lname(l, "w1")), P.get(lname(l, "b1")), f);
    for (double& e : f) e = std::max(e, 0.0);
    affine_row(f.data(), P.get(lname(l, "w2")), P.get(lname(l, "b2")), f2);
    for (std::size_t i = 0; i < d; ++i) x[i] += f2[i];
  }
  norm_row(x, P.get("lnf_g"), P.get("lnf_b"), a);
  logits_.assign(c.vocab_size, 0.0);
  for (std::size_t t = 0; t < c.vocab_size; ++t) {
    const double* e = tok.data().data() + t * d;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += a[i] * e[i];
    logits_[t] = is_masked(c, t) ? s + kMasked : s;
  }
  log_softmax_row(logits_, logprobs_);
  ++pos_;
  return logprobs_;
}

double stepwise_logprob(const PolicyModel& model, const std::vector<TokenId>& prompt,
                        const std::vector<TokenId>& response) {
  check_lengths(model.config(), prompt.size(), response.size());
  StepDecoder dec(model);
  for (TokenId t : prompt) dec.feed(t);
  double total = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    total += dec.next_logprobs().at(static_cast<std::size_t>(response[i]));
    if (i + 1 < response.size()) dec.feed(response[i]);
  }
  return total;
}

std::vector<ReasoningResponse> sample_n(const PolicyModel& model, const Vocab& vocab,
                                        const std::vector<TokenId>& prompt, std::size_t n,
                                        const SampleConfig& config, std::uint64_t seed, std::int64_t user_id) {
  const auto& c = model.config();
  if (prompt.empty()) throw std::invalid_argument("policy: prompt must contain at least BOS");
  if (prompt.size() + config.max_new_tokens > c.context) {
    throw ContextOverflow("policy: prompt (" + std::to_string(prompt.size()) + ") + max_new_tokens (" +
                          std::to_string(config.max_new_tokens) + ") exceeds context " + std::to_string(c.context));
  }
  if (config.temperature < 0.0 || !std::isfinite(config.temperature)) {
    throw std::invalid_argument("policy: temperature must be finite and >= 0");
  }
  StepDecoder base(model);
  for (TokenId t : prompt) base.feed(t);

  std::vector<ReasoningResponse> out;
  out.reserve(n);
  std::vector<double> w(c.vocab_size);
  for (std::size_t k = 0; k < n; ++k) {
    nk::Rng rng(seed, user_id, k);
    StepDecoder dec = base;
    ReasoningResponse r;
    r.user_id = user_id;
    r.sample_index = k;
    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
      const auto& logits = dec.next_logits();
      std::size_t best = 0;
      for (std::size_t v = 1; v < logits.size(); ++v)
        if (logits[v] > logits[best]) best = v;
      std::size_t choice = best;
      if (config.temperature > 0.0) {
        double z = 0.0;
        for (std::size_t v = 0; v < logits.size(); ++v) z += (w[v] = std::exp((logits[v] - logits[best]) / config.temperature));
        double u = rng.uniform() * z;
        choice = logits.size() - 1;
        for (std::size_t v = 0; v < logits.size(); ++v) {
          if (w[v] == 0.0) continue;
          if (u < w[v]) {
            choice = v;
            break;
          }
          u -= w[v];
        }
        // Guard against rounding leaving u past the last non-zero weight.
        while (w[choice] == 0.0 && choice > 0) --choice;
      }
      r.logprob_policy += dec.next_logprobs()[choice];
      r.tokens.push_back(static_cast<TokenId>(choice));
      if (static_cast<TokenId>(choice) == kEos) break;
      if (step + 1 < config.max_new_tokens) dec.feed(static_cast<TokenId>(choice));
    }
    r.text = vocab.detokenize(r.tokens);
    out.push_back(std::move(r));
  }
  return out;
}

void write_responses(const std::filesystem::path& path, const std::vector<ReasoningResponse>& responses) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("policy: cannot write " + path.string());
  for (const auto& r : responses) {
    nlohmann::json j{{"user", r.user_id}, {"k", r.sample_index}, {"text", r.text}, {"logprob", r.logprob_policy}};
    if (r.reward) j["reward"] = *r.reward;
    out << j.dump() << '\n';
  }
}

std::vector<ReasoningResponse> read_responses(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("policy: cannot open " + path.string());
  std::vector<ReasoningResponse> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      ReasoningResponse r;
      r.user_id = j.at("user").get<std::int64_t>();
      r.sample_index = j.at("k").get<std::size_t>();
      r.text = j.at("text").get<std::string>();
      r.logprob_policy = j.at("logprob").get<double>();
      if (j.contains("reward")) r.reward = j["reward"].get<double>();
      r.tokens = vocab.tokenize(r.text);
      r.tokens.push_back(kEos);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string preference_sentence(const std::vector<std::string>& genres, std::size_t variant) {
  std::string list;
  for (std::size_t i = 0; i < genres.size(); ++i) {
    if (i > 0) list += i + 1 == genres.size() ? " and " : " , ";
    list += genres[i];
  }
  if (genres.empty()) list = "many";
  switch (variant % kPreferenceTemplates) {
    case 0: return "the user prefers " + list + " films .";
    case 1: return "this user enjoys " + list + " movies the most .";
    default: return "recommend " + list + " movies to this user .";
  }
}

std::vector<double> warm_start(PolicyModel& model, const std::vector<LmExample>& corpus,
                               const WarmStartConfig& config) {
  if (corpus.empty()) throw std::invalid_argument("warm_start: empty corpus");
  nk::AdamWConfig oc;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = config.weight_decay;
  auto state = nk::make_optim_state(model.params(), oc);
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);

  std::vector<double> perplexity;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    nk::Rng rng(config.seed, 0x3a11, e);
    rng.shuffle(order);
    double nll = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t end = std::min(order.size(), b + bs);
      Graph g;
      Var total;
      std::size_t batch_tokens = 0;
      for (std::size_t i = b; i < end; ++i) {
        const auto& ex = corpus[order[i]];
        Var lp = sequence_logprob(g, model, ex.prompt, ex.target);
        total = total.valid() ? nk::add(total, lp) : lp;
        batch_tokens += ex.target.size();
      }
      nll -= total.value().item();
      tokens += batch_tokens;
      Var loss = nk::mul(total, -1.0 / static_cast<double>(batch_tokens));
      auto grads = g.backward(loss, model.params());
      nk::opt_step(model.params(), grads, state);
    }
    perplexity.push_back(std::exp(nll / static_cast<double>(tokens)));
  }
  return perplexity;
}

}  // namespace prefrank::policy
