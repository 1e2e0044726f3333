#include "prefrank/dpo.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "prefrank/optim.hpp"
#include "prefrank/rng.hpp"

namespace prefrank::dpo {

using nk::Var;

MineResult mine_pairs(const reward::ResponseScoreTable& table, const reward::ResponsesByUser& responses,
                      const std::map<data::UserId, std::string>& prompts, const policy::Vocab& vocab,
                      const reward::ListsByUser& eval_lists) {
  for (const auto& [u, lists] : eval_lists)
    for (const auto& l : lists)
      if (l.split == data::SplitTag::Test || l.user_id != u) {
        throw data::LeakageError("mine_pairs: evaluation lists for user " + std::to_string(u) +
                                 " include a test-tagged or foreign list");
      }
  if (table.rows.empty()) throw std::invalid_argument("mine_pairs: empty score table");
  MineResult out;
  for (const auto& [u, row] : table.rows) {
    if (!eval_lists.count(u)) {
      throw data::LeakageError("mine_pairs: user " + std::to_string(u) + " has rewards but no held-in evaluation list");
    }
    if (row.size() < 2) throw std::invalid_argument("mine_pairs: user " + std::to_string(u) + " has fewer than 2 responses");
    // the row is sorted by (reward desc, index asc); argmin with lowest index needs a scan
    const auto& best = row.front();
    const auto* worst = &row.back();
    for (const auto& e : row)
      if (e.reward == worst->reward && e.sample_index < worst->sample_index) worst = &e;
    if (best.reward == worst->reward) {
      ++out.skipped_flat;
      continue;
    }
    auto rs = responses.find(u);
    auto pr = prompts.find(u);
    if (rs == responses.end()) throw std::invalid_argument("mine_pairs: no responses for user " + std::to_string(u));
    if (pr == prompts.end()) throw std::invalid_argument("mine_pairs: no prompt for user " + std::to_string(u));
    auto find = [&](std::size_t k) -> const policy::ReasoningResponse& {
      for (const auto& r : rs->second)
        if (r.sample_index == k) return r;
      throw std::invalid_argument("mine_pairs: user " + std::to_string(u) + " lacks response " + std::to_string(k));
    };
    const auto& c = find(best.sample_index);
    const auto& r = find(worst->sample_index);
    if (c.tokens == r.tokens) {
      ++out.skipped_identical;
      continue;
    }
    PreferencePair p;
    p.user_id = u;
    p.prompt_text = pr->second;
    p.prompt = vocab.encode_prompt(pr->second);
    p.chosen = c.tokens;
    p.rejected = r.tokens;
    p.chosen_text = c.text;
    p.rejected_text = r.text;
    p.chosen_reward = best.reward;
    p.rejected_reward = worst->reward;
    out.pairs.push_back(std::move(p));
  }
  return out;
}

void DpoConfig::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("dpo: beta must be > 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("dpo: learning rate must be > 0");
  if (grad_accumulation < 1 || batch_size < 1) throw std::invalid_argument("dpo: counts must be >= 1");
}

namespace {

std::string pair_label(const PreferencePair& p, std::size_t index) {
  return "pair " + std::to_string(index) + " (user " + std::to_string(p.user_id) + ")";
}

}  // namespace

ReferenceLogprobs reference_logprobs(const policy::PolicyModel& reference, const PreferencePair& pair) {
  return {policy::sequence_logprob(reference, pair.prompt, pair.chosen),
          policy::sequence_logprob(reference, pair.prompt, pair.rejected)};
}

LossVars dpo_loss(nk::Graph& g, const policy::PolicyModel& policy, const PreferencePair& pair,
                  const ReferenceLogprobs& ref, double beta) {
  Var lc = policy::sequence_logprob(g, policy, pair.prompt, pair.chosen);
  Var lr = policy::sequence_logprob(g, policy, pair.prompt, pair.rejected);
  Var diff = nk::add(nk::sub(lc, lr), -(ref.chosen - ref.rejected));
  Var margin = nk::mul(diff, beta);
  // softplus(-z) = -log sigmoid(z) = -log_softmax([z, 0])[0]
  Var pair_logits = nk::concat({margin, g.constant(nk::Tensor({1, 1}, 0.0))}, 1);
  Var loss = nk::mul(nk::slice(nk::log_softmax(pair_logits, 1), 1, 0, 1), -1.0);
  return {loss, margin};
}

double dpo_loss_from_margin(double margin) {
  // softplus(-m) = max(-m, 0) + log1p(exp(-|m|))
  return std::max(-margin, 0.0) + std::log1p(std::exp(-std::abs(margin)));
}

LossValue dpo_loss_value(const policy::PolicyModel& policy, const policy::PolicyModel& reference,
                         const PreferencePair& pair, double beta) {
  const auto ref = reference_logprobs(reference, pair);
  const double lc = policy::sequence_logprob(policy, pair.prompt, pair.chosen);
  const double lr = policy::sequence_logprob(policy, pair.prompt, pair.rejected);
  const double margin = beta * ((lc - ref.chosen) - (lr - ref.rejected));
  return {dpo_loss_from_margin(margin), margin};
}

DpoTrace dpo_train(policy::PolicyModel& policy, const policy::PolicyModel& reference,
                   const std::vector<PreferencePair>& pairs, const DpoConfig& config, std::uint64_t seed) {
  config.validate();
  if (pairs.empty()) throw std::invalid_argument("dpo_train: no pairs");
  std::vector<ReferenceLogprobs> ref(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      ref[i] = reference_logprobs(reference, pairs[i]);
    } catch (const policy::ContextOverflow& e) {
      throw policy::ContextOverflow(pair_label(pairs[i], i) + ": " + e.what());
    }
  }

  nk::AdamWConfig oc;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = 0.0;
  auto state = nk::make_optim_state(policy.params(), oc);
  DpoTrace trace;
  nk::ParamSet acc;
  std::size_t in_window = 0;
  double window_loss = 0.0, window_margin = 0.0;
  std::size_t window_pairs = 0;

  auto flush = [&] {
    if (in_window == 0) return;
    nk::opt_step(policy.params(), acc, state);
    ++trace.optimizer_steps;
    trace.loss.push_back(window_loss / static_cast<double>(window_pairs));
    trace.margin.push_back(window_margin / static_cast<double>(window_pairs));
    in_window = 0;
    window_loss = window_margin = 0.0;
    window_pairs = 0;
  };

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    nk::Rng rng(seed, 0xd90, e);
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      nk::Graph g;
      Var total;
      for (std::size_t i = b; i < end; ++i) {
        const std::size_t idx = order[i];
        LossVars lv;
        try {
          lv = dpo_loss(g, policy, pairs[idx], ref[idx], config.beta);
        } catch (const policy::ContextOverflow& ex) {
          throw policy::ContextOverflow(pair_label(pairs[idx], idx) + ": " + ex.what());
        }
        const double l = lv.loss.value().item();
        if (!std::isfinite(l)) throw DpoError("dpo_train: non-finite loss at " + pair_label(pairs[idx], idx));
        window_loss += l;
        window_margin += lv.margin.value().item();
        ++window_pairs;
        total = total.valid() ? nk::add(total, lv.loss) : lv.loss;
      }
      // mean over the pairs of one micro-batch, averaged over the window
      const double denom = static_cast<double>(end - b) * static_cast<double>(config.grad_accumulation);
      auto grads = g.backward(nk::mul(total, 1.0 / denom), policy.params());
      if (in_window == 0) {
        acc = std::move(grads);
      } else {
        nk::axpy(acc, grads, 1.0);
      }
      if (++in_window == config.grad_accumulation) flush();
    }
    flush();
  }
  return trace;
}

void write_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("pairs: cannot write " + path.string());
  for (const auto& p : pairs) {
    out << nlohmann::json{{"user", p.user_id},         {"prompt", p.prompt_text}, {"chosen", p.chosen_text},
                          {"rejected", p.rejected_text}, {"cr", p.chosen_reward},  {"rr", p.rejected_reward}}
               .dump()
        << '\n';
  }
}

std::vector<PreferencePair> read_pairs(const std::filesystem::path& path, const policy::Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("pairs: cannot open " + path.string());
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  auto response_ids = [&](const std::string& text) {
    auto ids = vocab.tokenize(text);
    ids.push_back(policy::kEos);
    return ids;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      PreferencePair p;
      p.user_id = j.at("user").get<data::UserId>();
      p.prompt_text = j.at("prompt").get<std::string>();
      p.chosen_text = j.at("chosen").get<std::string>();
      p.rejected_text = j.at("rejected").get<std::string>();
      p.chosen_reward = j.at("cr").get<double>();
      p.rejected_reward = j.at("rr").get<double>();
      if (!(p.chosen_reward > p.rejected_reward)) throw std::runtime_error("chosen reward not above rejected");
      p.prompt = vocab.encode_prompt(p.prompt_text);
      p.chosen = response_ids(p.chosen_text);
      p.rejected = response_ids(p.rejected_text);
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace prefrank::dpo
