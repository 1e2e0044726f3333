#include "prefrank/rerankers.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "prefrank/checkpoint.hpp"
#include "prefrank/optim.hpp"
#include "prefrank/rng.hpp"

namespace prefrank::rerank {

using data::CandidateList;
using nk::Graph;
using nk::Tensor;
using nk::Var;

namespace {

constexpr std::size_t kEvalBatch = 64;

std::string bname(std::size_t l, const char* what) { return "b" + std::to_string(l) + "." + what; }

Tensor init_weight(std::size_t in, std::size_t out, nk::Rng& rng) {
  return nk::random_normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

Var linear(Graph& g, const nk::ParamSet& P, Var x, const std::string& w, const std::string& b) {
  return nk::add(nk::matmul(x, g.param(P, w)), g.param(P, b));
}

Var affine_norm(Graph& g, const nk::ParamSet& P, Var x, const std::string& gain, const std::string& bias) {
  return nk::add(nk::mul(nk::layer_norm(x), g.param(P, gain)), g.param(P, bias));
}

std::size_t input_dim(const RerankerConfig& c) {
  return c.item_embed_dim + (c.kind == Kind::Prm ? c.item_embed_dim : 0) + c.knowledge_dim;
}

Var dlcm_body(Graph& g, const nk::ParamSet& P, Var x, std::size_t B, std::size_t L, std::size_t H) {
  Var h = g.constant(Tensor({B, H}, 0.0));
  std::vector<Var> hs(L);
  std::vector<std::size_t> rows(B);
  // reverse initial order: h_i summarises items i..L-1
  for (std::size_t step = 0; step < L; ++step) {
    const std::size_t i = L - 1 - step;
    for (std::size_t b = 0; b < B; ++b) rows[b] = b * L + i;
    Var xi = B == 1 ? nk::slice(x, 0, i, 1) : nk::embedding(x, rows);
    Var z = nk::sigmoid(nk::add(linear(g, P, xi, "gru.wz", "gru.bz"), nk::matmul(h, g.param(P, "gru.uz"))));
    Var r = nk::sigmoid(nk::add(linear(g, P, xi, "gru.wr", "gru.br"), nk::matmul(h, g.param(P, "gru.ur"))));
    Var n = nk::tanh(nk::add(linear(g, P, xi, "gru.wn", "gru.bn"), nk::matmul(nk::mul(r, h), g.param(P, "gru.un"))));
    h = nk::add(n, nk::mul(z, nk::sub(h, n)));
    hs[i] = h;
  }
  Var stacked = nk::concat(hs, 0);  // position-major
  if (B > 1) {
    std::vector<std::size_t> back(B * L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < L; ++i) back[b * L + i] = i * B + b;
    stacked = nk::embedding(stacked, back);
  }
  return nk::concat({stacked, x}, 1);
}

Var attention_body(Graph& g, const RerankerConfig& c, const nk::ParamSet& P, Var x, std::size_t B) {
  const std::size_t L = c.list_len, H = c.hidden_dim;
  const std::size_t dh = H / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Var a = affine_norm(g, P, x, bname(l, "ln1_g"), bname(l, "ln1_b"));
    Var q = linear(g, P, a, bname(l, "wq"), bname(l, "bq"));
    Var k = linear(g, P, a, bname(l, "wk"), bname(l, "bk"));
    Var v = linear(g, P, a, bname(l, "wv"), bname(l, "bv"));
    // attention never crosses list boundaries
    std::vector<Var> lists;
    for (std::size_t b = 0; b < B; ++b) {
      Var qb = nk::slice(q, 0, b * L, L), kb = nk::slice(k, 0, b * L, L), vb = nk::slice(v, 0, b * L, L);
      std::vector<Var> heads;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        Var s = nk::mul(nk::matmul(nk::slice(qb, 1, h * dh, dh), nk::slice(kb, 1, h * dh, dh), true), scale);
        heads.push_back(nk::matmul(nk::softmax(s, 1), nk::slice(vb, 1, h * dh, dh)));
      }
      lists.push_back(heads.size() == 1 ? heads[0] : nk::concat(heads, 1));
    }
    Var attn = lists.size() == 1 ? lists[0] : nk::concat(lists, 0);
    x = nk::add(x, linear(g, P, attn, bname(l, "wo"), bname(l, "bo")));
    Var a2 = affine_norm(g, P, x, bname(l, "ln2_g"), bname(l, "ln2_b"));
    Var f = nk::relu(linear(g, P, a2, bname(l, "w1"), bname(l, "b1")));
    x = nk::add(x, linear(g, P, f, bname(l, "w2"), bname(l, "b2")));
  }
  return affine_norm(g, P, x, "lnf_g", "lnf_b");
}

}  // namespace

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Dlcm: return "dlcm";
    case Kind::Prm: return "prm";
    case Kind::SetRank: return "setrank";
  }
  return "?";
}

Kind parse_kind(const std::string& name) {
  if (name == "dlcm") return Kind::Dlcm;
  if (name == "prm") return Kind::Prm;
  if (name == "setrank") return Kind::SetRank;
  throw std::invalid_argument("unknown reranker kind '" + name + "' (expected dlcm, prm or setrank)");
}

void RerankerConfig::validate() const {
  if (list_len < 2) throw std::invalid_argument("reranker: list_len must be >= 2");
  if (n_heads == 0 || hidden_dim % n_heads != 0) throw std::invalid_argument("reranker: hidden_dim must be divisible by n_heads");
  if (n_items == 0) throw std::invalid_argument("reranker: n_items must be positive");
  if (item_embed_dim == 0 || hidden_dim == 0) throw std::invalid_argument("reranker: dimensions must be positive");
  if (kind == Kind::Prm && n_users == 0) throw std::invalid_argument("reranker: PRM needs n_users");
  if (knowledge_dim > 0 && text_vocab_size == 0) throw std::invalid_argument("reranker: knowledge needs text_vocab_size");
}

nlohmann::json config_to_json(const RerankerConfig& c) {
  return {{"kind", kind_name(c.kind)},       {"item_embed_dim", c.item_embed_dim}, {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},            {"n_layers", c.n_layers},             {"list_len", c.list_len},
          {"knowledge_dim", c.knowledge_dim}, {"n_items", c.n_items},              {"n_users", c.n_users},
          {"text_vocab_size", c.text_vocab_size}, {"d_text", c.d_text},            {"adapter_hidden", c.adapter_hidden}};
}

RerankerConfig config_from_json(const nlohmann::json& j) {
  RerankerConfig c;
  c.kind = parse_kind(j.at("kind").get<std::string>());
  c.item_embed_dim = j.value("item_embed_dim", c.item_embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.list_len = j.value("list_len", c.list_len);
  c.knowledge_dim = j.value("knowledge_dim", c.knowledge_dim);
  c.n_items = j.value("n_items", c.n_items);
  c.n_users = j.value("n_users", c.n_users);
  c.text_vocab_size = j.value("text_vocab_size", c.text_vocab_size);
  c.d_text = j.value("d_text", c.d_text);
  c.adapter_hidden = j.value("adapter_hidden", c.adapter_hidden);
  return c;
}

RerankerModel::RerankerModel(const RerankerConfig& config, std::uint64_t seed) : config_(config) {
  const auto& c = config_;
  c.validate();
  nk::Rng rng(seed, 0x7e7a);
  const std::size_t E = c.item_embed_dim, H = c.hidden_dim;
  params_.add("item_emb", nk::random_normal({c.n_items, E}, 0.1, rng));
  if (c.kind == Kind::Prm) {
    params_.add("user_emb", nk::random_normal({c.n_users, E}, 0.1, rng));
    params_.add("pos_emb", nk::random_normal({c.list_len, H}, 0.1, rng));
  }
  params_.add("in_w", init_weight(input_dim(c), H, rng));
  params_.add("in_b", Tensor({1, H}, 0.0));
  if (c.kind == Kind::Dlcm) {
    for (const char* gate : {"z", "r", "n"}) {
      params_.add(std::string("gru.w") + gate, init_weight(H, H, rng));
      params_.add(std::string("gru.u") + gate, init_weight(H, H, rng));
      params_.add(std::string("gru.b") + gate, Tensor({1, H}, 0.0));
    }
    params_.add("out_w1", init_weight(2 * H, H, rng));
  } else {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      params_.add(bname(l, "ln1_g"), Tensor({1, H}, 1.0));
      params_.add(bname(l, "ln1_b"), Tensor({1, H}, 0.0));
      for (const char* w : {"wq", "wk", "wv", "wo"}) params_.add(bname(l, w), init_weight(H, H, rng));
      for (const char* b : {"bq", "bk", "bv", "bo"}) params_.add(bname(l, b), Tensor({1, H}, 0.0));
      params_.add(bname(l, "ln2_g"), Tensor({1, H}, 1.0));
      params_.add(bname(l, "ln2_b"), Tensor({1, H}, 0.0));
      params_.add(bname(l, "w1"), init_weight(H, 2 * H, rng));
      params_.add(bname(l, "b1"), Tensor({1, 2 * H}, 0.0));
      params_.add(bname(l, "w2"), init_weight(2 * H, H, rng));
      params_.add(bname(l, "b2"), Tensor({1, H}, 0.0));
    }
    params_.add("lnf_g", Tensor({1, H}, 1.0));
    params_.add("lnf_b", Tensor({1, H}, 0.0));
    params_.add("out_w1", init_weight(H, H, rng));
  }
  params_.add("out_b1", Tensor({1, H}, 0.0));
  params_.add("out_w2", init_weight(H, 1, rng));
  params_.add("out_b2", Tensor({1, 1}, 0.0));
  if (c.knowledge_dim > 0) {
    knowledge::add_knowledge_params(params_, {c.text_vocab_size, c.d_text, c.adapter_hidden, c.knowledge_dim}, rng);
  }
}

void RerankerModel::save(const std::filesystem::path& path) const {
  nk::save_checkpoint(path, params_, {{"kind", "reranker"}, {"config", config_to_json(config_)}});
}

RerankerModel RerankerModel::load(const std::filesystem::path& path) {
  auto ck = nk::load_checkpoint(path);
  if (ck.meta.value("kind", "") != "reranker") throw std::runtime_error("reranker: " + path.string() + " is not a reranker checkpoint");
  RerankerModel m;
  m.config_ = config_from_json(ck.meta.at("config"));
  m.config_.validate();
  m.params_ = std::move(ck.params);
  return m;
}

Var forward(Graph& g, const RerankerModel& model, const std::vector<const CandidateList*>& lists,
            const std::vector<Var>& features) {
  const auto& c = model.config();
  const auto& P = model.params();
  const std::size_t B = lists.size(), L = c.list_len, H = c.hidden_dim, BL = B * L;
  if (B == 0) throw std::invalid_argument("reranker: empty batch");
  if (model.uses_knowledge() != !features.empty()) {
    throw std::invalid_argument(model.uses_knowledge() ? "reranker: knowledge_dim > 0 but no knowledge vector given"
                                                       : "reranker: knowledge given to a model with knowledge_dim = 0");
  }
  if (!features.empty() && features.size() != B) throw std::invalid_argument("reranker: one knowledge vector per list");

  std::vector<std::size_t> items(BL), owner(BL);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& lst = *lists[b];
    if (lst.items.size() != L) {
      throw std::invalid_argument("reranker: list for user " + std::to_string(lst.user_id) + " has " +
                                  std::to_string(lst.items.size()) + " items, expected " + std::to_string(L));
    }
    for (std::size_t i = 0; i < L; ++i) {
      const auto id = lst.items[i];
      if (id < 0 || static_cast<std::size_t>(id) >= c.n_items) {
        throw std::out_of_range("reranker: item " + std::to_string(id) + " outside the item table");
      }
      items[b * L + i] = static_cast<std::size_t>(id);
      owner[b * L + i] = b;
    }
  }
  std::vector<Var> parts{nk::embedding(g.param(P, "item_emb"), items)};
  if (c.kind == Kind::Prm) {
    std::vector<std::size_t> users(BL);
    for (std::size_t r = 0; r < BL; ++r) {
      const auto u = lists[owner[r]]->user_id;
      users[r] = u > 0 && static_cast<std::size_t>(u) < c.n_users ? static_cast<std::size_t>(u) : 0;
    }
    parts.push_back(nk::embedding(g.param(P, "user_emb"), users));
  }
  if (model.uses_knowledge()) {
    for (const auto& f : features) {
      if (f.rows() != 1 || f.cols() != c.knowledge_dim) {
        throw nk::ShapeError("reranker: knowledge vector " + nk::shape_str(f.shape()) + " does not match d_feat " +
                             std::to_string(c.knowledge_dim));
      }
    }
    Var F = B == 1 ? features[0] : nk::concat(features, 0);
    parts.push_back(nk::embedding(F, owner));
  }
  Var x = linear(g, P, parts.size() == 1 ? parts[0] : nk::concat(parts, 1), "in_w", "in_b");

  Var h;
  if (c.kind == Kind::Dlcm) {
    h = dlcm_body(g, P, x, B, L, H);
  } else {
    if (c.kind == Kind::Prm) {
      std::vector<std::size_t> pos(BL);
      for (std::size_t r = 0; r < BL; ++r) pos[r] = r % L;
      x = nk::add(x, nk::embedding(g.param(P, "pos_emb"), pos));
    }
    h = attention_body(g, c, P, x, B);
  }
  Var hidden = nk::relu(linear(g, P, h, "out_w1", "out_b1"));
  return linear(g, P, hidden, "out_w2", "out_b2");
}

ScoredList score(const RerankerModel& model, const CandidateList& list, const std::optional<Tensor>& knowledge) {
  Graph g(false);
  std::vector<Var> feats;
  if (knowledge) {
    Tensor k = knowledge->rank() == 1 ? Tensor({1, knowledge->size()}, knowledge->vec()) : *knowledge;
    feats.push_back(g.constant(std::move(k)));
  }
  const Tensor& out = forward(g, model, {&list}, feats).value();
  ScoredList s;
  s.list = &list;
  s.scores = out.vec();
  s.permutation = reward::argsort_desc(s.scores);
  return s;
}

namespace {

const std::vector<policy::TokenId>& knowledge_for(const knowledge::KnowledgeMap* km, data::UserId u) {
  if (km == nullptr) throw std::invalid_argument("reranker: model uses knowledge but no knowledge map was given");
  auto it = km->find(u);
  if (it == km->end()) throw std::invalid_argument("reranker: no knowledge for user " + std::to_string(u));
  return it->second;
}

std::vector<std::vector<double>> unpack(const Tensor& out, std::size_t B, std::size_t L) {
  std::vector<std::vector<double>> s(B, std::vector<double>(L));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) s[b][i] = out[b * L + i];
  return s;
}

}  // namespace

std::vector<std::vector<double>> score_lists(const RerankerModel& model, const std::vector<CandidateList>& lists,
                                             const knowledge::KnowledgeMap* km) {
  std::vector<std::vector<double>> out;
  out.reserve(lists.size());
  for (std::size_t start = 0; start < lists.size(); start += kEvalBatch) {
    const std::size_t end = std::min(lists.size(), start + kEvalBatch);
    Graph g(false);
    std::vector<const CandidateList*> batch;
    std::vector<Var> feats;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&lists[i]);
      if (model.uses_knowledge()) {
        feats.push_back(knowledge::knowledge_feature(g, model.params(), knowledge_for(km, lists[i].user_id)));
      }
    }
    for (auto& s : unpack(forward(g, model, batch, feats).value(), batch.size(), model.config().list_len))
      out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<double>> score_with_texts(const RerankerModel& model, const CandidateList& list,
                                                  const std::vector<std::vector<policy::TokenId>>& texts) {
  if (!model.uses_knowledge()) throw std::invalid_argument("reranker: scoring texts needs knowledge_dim > 0");
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < texts.size(); start += kEvalBatch) {
    const std::size_t end = std::min(texts.size(), start + kEvalBatch);
    Graph g(false);
    std::vector<const CandidateList*> batch(end - start, &list);
    std::vector<Var> feats;
    for (std::size_t i = start; i < end; ++i) feats.push_back(knowledge::knowledge_feature(g, model.params(), texts[i]));
    for (auto& s : unpack(forward(g, model, batch, feats).value(), batch.size(), model.config().list_len))
      out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> train_reranker(RerankerModel& model, const std::vector<CandidateList>& lists,
                                   const knowledge::KnowledgeMap* km, const TrainConfig& config) {
  if (lists.empty()) throw std::invalid_argument("train_reranker: no training lists");
  if (model.uses_knowledge() && (km == nullptr || km->empty())) {
    throw std::invalid_argument("train_reranker: knowledge_dim > 0 needs a non-empty knowledge map");
  }
  const std::size_t L = model.config().list_len;
  nk::AdamWConfig oc;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = config.weight_decay;
  auto state = nk::make_optim_state(model.params(), oc);
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);

  std::vector<double> curve;
  std::vector<std::size_t> order(lists.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    nk::Rng rng(config.seed, 0x7a1, e);
    rng.shuffle(order);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0, batch_idx = 0; start < order.size(); start += bs, ++batch_idx) {
      const std::size_t end = std::min(order.size(), start + bs);
      try {
        Graph g;
        std::vector<const CandidateList*> batch;
        std::vector<Var> feats;
        for (std::size_t i = start; i < end; ++i) {
          const auto& lst = lists[order[i]];
          batch.push_back(&lst);
          if (model.uses_knowledge()) feats.push_back(knowledge::knowledge_feature(g, model.params(), knowledge_for(km, lst.user_id)));
        }
        const std::size_t B = batch.size(), BL = B * L;
        Var s = forward(g, model, batch, feats);
        Tensor target({BL, 2}, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < L; ++i) {
            const int y = batch[b]->labels.at(i);
            target.at(b * L + i, y ? 0 : 1) = 1.0;
          }
        // log sigmoid(s) and log(1 - sigmoid(s)) as a two-way log-softmax
        Var lp = nk::log_softmax(nk::concat({s, g.constant(Tensor({BL, 1}, 0.0))}, 1), 1);
        Var nll = nk::mul(nk::sum(nk::mul(lp, g.constant(std::move(target)))), -1.0);
        const double batch_loss = nll.value().item();
        if (!std::isfinite(batch_loss)) throw nk::NumericError("non-finite loss");
        total += batch_loss;
        count += BL;
        auto grads = g.backward(nk::mul(nll, 1.0 / static_cast<double>(BL)), model.params());
        nk::opt_step(model.params(), grads, state);
      } catch (const nk::NumericError& err) {
        throw TrainingError("train_reranker: epoch " + std::to_string(e) + ", batch " + std::to_string(batch_idx) +
                            ": " + err.what());
      }
    }
    curve.push_back(total / static_cast<double>(count));
  }
  return curve;
}

EvalResult evaluate(const RerankerModel& model, const std::vector<CandidateList>& lists,
                    const knowledge::KnowledgeMap* km, std::size_t k) {
  if (lists.empty()) throw std::invalid_argument("evaluate: empty list set");
  auto scores = score_lists(model, lists, km);
  std::map<data::UserId, std::pair<reward::MetricResult, std::size_t>> per_user;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    auto m = reward::evaluate_ranking(scores[i], lists[i].labels, k);
    auto& acc = per_user[lists[i].user_id];
    acc.first.ndcg_at_k += m.ndcg_at_k;
    acc.first.map_at_k += m.map_at_k;
    ++acc.second;
  }
  EvalResult r;
  r.lists = lists.size();
  r.users = per_user.size();
  for (const auto& [_, acc] : per_user) {
    r.ndcg += acc.first.ndcg_at_k / static_cast<double>(acc.second);
    r.map += acc.first.map_at_k / static_cast<double>(acc.second);
  }
  r.ndcg /= static_cast<double>(r.users);
  r.map /= static_cast<double>(r.users);
  return r;
}

}  // namespace prefrank::rerank
