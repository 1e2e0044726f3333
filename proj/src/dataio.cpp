#include "prefrank/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "prefrank/rng.hpp"

namespace prefrank::data {

namespace fs = std::filesystem;
using nlohmann::json;

void Catalog::add(CatalogItem item) {
  for (const auto& g : item.genres) {
    auto it = std::lower_bound(genres_.begin(), genres_.end(), g);
    if (it == genres_.end() || *it != g) genres_.insert(it, g);
  }
  items_.insert_or_assign(item.item_id, std::move(item));
}

const CatalogItem& Catalog::at(ItemId id) const {
  auto it = items_.find(id);
  if (it == items_.end()) throw DataError("catalog: unknown item " + std::to_string(id));
  return it->second;
}

std::string to_utf8(const std::string& bytes) {
  auto valid_utf8 = [&] {
    std::size_t i = 0;
    while (i < bytes.size()) {
      const auto c = static_cast<unsigned char>(bytes[i]);
      std::size_t extra = 0;
      if (c < 0x80) {
        extra = 0;
      } else if ((c & 0xE0) == 0xC0 && c >= 0xC2) {
        extra = 1;
      } else if ((c & 0xF0) == 0xE0) {
        extra = 2;
      } else if ((c & 0xF8) == 0xF0 && c <= 0xF4) {
        extra = 3;
      } else {
        return false;
      }
      if (i + extra >= bytes.size() && extra > 0) return false;
      for (std::size_t k = 1; k <= extra; ++k) {
        if ((static_cast<unsigned char>(bytes[i + k]) & 0xC0) != 0x80) return false;
      }
      i += extra + 1;
    }
    return true;
  };
  if (valid_utf8()) return bytes;
  std::string out;
  out.reserve(bytes.size() * 2);
  for (char ch : bytes) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80) {
      out.push_back(ch);
    } else {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

namespace {

std::vector<std::string> split_on(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

template <typename T>
bool parse_int(const std::string& s, T& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::ifstream open_or_throw(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

Dataset assemble_dataset(std::vector<Interaction> interactions, Catalog catalog,
                         const std::map<UserId, std::vector<std::pair<std::string, std::string>>>& user_fields) {
  Dataset ds;
  ds.catalog = std::move(catalog);
  for (auto& it : interactions) {
    if (!ds.catalog.contains(it.item)) {
      ++ds.report.dropped_missing_item;
      continue;
    }
    it.label = binarize(it.rating);
    ds.interactions.push_back(it);
  }
  for (const auto& it : ds.interactions) {
    auto& prof = ds.profiles[it.user];
    prof.user_id = it.user;
    prof.history.push_back({it.item, it.label, it.ts});
  }
  for (auto& [uid, prof] : ds.profiles) {
    std::stable_sort(prof.history.begin(), prof.history.end(), [](const HistoryEntry& a, const HistoryEntry& b) {
      return a.ts != b.ts ? a.ts < b.ts : a.item < b.item;
    });
    if (auto f = user_fields.find(uid); f != user_fields.end()) prof.fields = f->second;
  }
  std::set<ItemId> seen_items;
  for (const auto& it : ds.interactions) seen_items.insert(it.item);
  ds.report.users = ds.profiles.size();
  ds.report.items = seen_items.size();
  ds.report.interactions = ds.interactions.size();
  return ds;
}

Dataset ingest_ml1m(const fs::path& ratings_path, const fs::path& movies_path, const fs::path& users_path) {
  std::vector<RejectedLine> rejected;
  Catalog catalog;
  {
    auto in = open_or_throw(movies_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      strip_cr(line);
      if (line.empty()) continue;
      auto parts = split_on(line, "::");
      ItemId id = 0;
      if (parts.size() != 3 || !parse_int(parts[0], id)) {
        rejected.push_back({movies_path.filename().string(), lineno, "expected MovieID::Title::Genres"});
        continue;
      }
      CatalogItem item{id, to_utf8(parts[1]), {}};
      for (auto& g : split_on(parts[2], "|")) {
        if (!g.empty()) item.genres.push_back(to_utf8(g));
      }
      catalog.add(std::move(item));
    }
  }

  std::map<UserId, std::vector<std::pair<std::string, std::string>>> fields;
  if (!users_path.empty()) {
    auto in = open_or_throw(users_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      strip_cr(line);
      if (line.empty()) continue;
      auto parts = split_on(line, "::");
      UserId uid = 0;
      if (parts.size() != 5 || !parse_int(parts[0], uid)) {
        rejected.push_back({users_path.filename().string(), lineno, "expected UserID::Gender::Age::Occupation::Zip"});
        continue;
      }
      fields[uid] = {{"gender", parts[1]}, {"age", parts[2]}, {"occupation", parts[3]}};
    }
  }

  std::vector<Interaction> interactions;
  {
    auto in = open_or_throw(ratings_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      strip_cr(line);
      if (line.empty()) continue;
      auto parts = split_on(line, "::");
      Interaction it;
      if (parts.size() != 4 || !parse_int(parts[0], it.user) || !parse_int(parts[1], it.item) ||
          !parse_int(parts[2], it.rating) || !parse_int(parts[3], it.ts)) {
        rejected.push_back({ratings_path.filename().string(), lineno, "expected UserID::MovieID::Rating::Timestamp"});
        continue;
      }
      if (it.rating < 1 || it.rating > 5 || it.user < 0 || it.item < 0) {
        rejected.push_back({ratings_path.filename().string(), lineno, "rating outside 1..5 or negative id"});
        continue;
      }
      interactions.push_back(it);
    }
  }
  if (interactions.empty()) throw DataError("ingest_ml1m: no parsable rating rows in " + ratings_path.string());

  Dataset ds = assemble_dataset(std::move(interactions), std::move(catalog), fields);
  ds.report.rejected = std::move(rejected);
  return ds;
}

Dataset ingest_jsonl(const fs::path& dir) {
  Catalog catalog;
  std::vector<RejectedLine> rejected;
  {
    auto in = open_or_throw(dir / "catalog.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = json::parse(line);
        catalog.add({j.at("item").get<ItemId>(), j.value("title", ""), j.value("genres", std::vector<std::string>{})});
      } catch (const json::exception& e) {
        rejected.push_back({"catalog.jsonl", lineno, e.what()});
      }
    }
  }
  std::map<UserId, std::vector<std::pair<std::string, std::string>>> fields;
  if (fs::exists(dir / "users.jsonl")) {
    auto in = open_or_throw(dir / "users.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = json::parse(line);
        auto& f = fields[j.at("user").get<UserId>()];
        for (const auto& kv : j.at("fields")) f.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
      } catch (const json::exception& e) {
        rejected.push_back({"users.jsonl", lineno, e.what()});
      }
    }
  }
  std::vector<Interaction> interactions;
  {
    auto in = open_or_throw(dir / "interactions.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = json::parse(line);
        Interaction it;
        it.user = j.at("user").get<UserId>();
        it.item = j.at("item").get<ItemId>();
        it.rating = j.value("rating", 0);
        it.ts = j.value("ts", std::int64_t{0});
        if (it.rating < 0 || it.rating > 5) throw DataError("rating outside 0..5");
        interactions.push_back(it);
      } catch (const std::exception& e) {
        rejected.push_back({"interactions.jsonl", lineno, e.what()});
      }
    }
  }
  if (interactions.empty()) throw DataError("ingest_jsonl: no parsable interactions in " + dir.string());
  Dataset ds = assemble_dataset(std::move(interactions), std::move(catalog), fields);
  ds.report.rejected = std::move(rejected);
  return ds;
}

void write_jsonl(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "interactions.jsonl");
    for (const auto& it : ds.interactions) {
      out << json{{"user", it.user}, {"item", it.item}, {"rating", it.rating}, {"ts", it.ts}}.dump() << '\n';
    }
  }
  {
    std::ofstream out(dir / "catalog.jsonl");
    for (const auto& [id, item] : ds.catalog.items()) {
      out << json{{"item", id}, {"title", item.title}, {"genres", item.genres}}.dump() << '\n';
    }
  }
  bool any_fields = false;
  for (const auto& [_, p] : ds.profiles) any_fields = any_fields || !p.fields.empty();
  if (any_fields) {
    std::ofstream out(dir / "users.jsonl");
    for (const auto& [uid, p] : ds.profiles) {
      json f = json::array();
      for (const auto& [k, v] : p.fields) f.push_back({k, v});
      out << json{{"user", uid}, {"fields", f}}.dump() << '\n';
    }
  }
}

// ---------------------------------------------------------------------------

bool UserSplit::is_train(UserId u) const { return std::binary_search(train.begin(), train.end(), u); }
bool UserSplit::is_test(UserId u) const { return std::binary_search(test.begin(), test.end(), u); }

UserSplit split_by_user(const std::map<UserId, UserProfile>& profiles, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split_by_user: train_fraction must be in (0, 1)");
  }
  const std::size_t n = profiles.size();
  if (n < 2) throw DataError("split_by_user: need at least 2 users, got " + std::to_string(n));
  std::vector<std::pair<std::uint64_t, UserId>> keyed;
  keyed.reserve(n);
  for (const auto& [uid, _] : profiles) keyed.emplace_back(nk::stream_key(seed, 0x5B117ULL, uid), uid);
  std::sort(keyed.begin(), keyed.end());
  auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  UserSplit s;
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? s.train : s.test).push_back(keyed[i].second);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

const char* split_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::Train: return "train";
    case SplitTag::Valid: return "valid";
    case SplitTag::Test: return "test";
  }
  return "?";
}

SplitTag parse_split(const std::string& name) {
  if (name == "train") return SplitTag::Train;
  if (name == "valid") return SplitTag::Valid;
  if (name == "test") return SplitTag::Test;
  throw DataError("unknown split tag '" + name + "'");
}

std::size_t CandidateList::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

ListBuild build_candidate_lists(const Dataset& ds, const UserSplit& split, const ListConfig& cfg, std::uint64_t seed) {
  if (cfg.list_len < 2) throw std::invalid_argument("build_candidate_lists: list_len must be >= 2");
  if (ds.catalog.size() < cfg.list_len) {
    throw DataError("build_candidate_lists: item universe (" + std::to_string(ds.catalog.size()) +
                    ") smaller than list length " + std::to_string(cfg.list_len));
  }
  const std::size_t max_pos = std::max<std::size_t>(1, cfg.list_len / (1 + cfg.negatives_per_positive));
  std::vector<ItemId> universe;
  universe.reserve(ds.catalog.size());
  for (const auto& [id, _] : ds.catalog.items()) universe.push_back(id);

  ListBuild out;
  for (const auto& [uid, prof] : ds.profiles) {
    const bool train = split.is_train(uid);
    const bool test = split.is_test(uid);
    if (!train && !test) continue;

    std::vector<ItemId> positives;  // most recent first
    for (auto it = prof.history.rbegin(); it != prof.history.rend(); ++it) {
      if (it->label == 1) positives.push_back(it->item);
    }
    if (positives.empty()) {
      ++out.skipped_no_positive;
      continue;
    }
    std::set<ItemId> interacted;
    for (const auto& h : prof.history) interacted.insert(h.item);
    if (universe.size() - interacted.size() < cfg.list_len - 1) {
      ++out.skipped_small_pool;
      continue;
    }

    std::vector<SplitTag> tags;
    if (test) {
      tags.push_back(SplitTag::Test);
    } else {
      tags.insert(tags.end(), cfg.valid_lists_per_user, SplitTag::Valid);
      tags.insert(tags.end(), cfg.train_lists_per_user, SplitTag::Train);
    }
    std::size_t budget = std::max<std::size_t>(1, positives.size() / 2);
    std::size_t cursor = 0;
    nk::Rng rng(seed, 0x11575ULL, uid);
    std::set<ItemId> used_negatives;
    for (SplitTag tag : tags) {
      if (cursor >= budget) break;
      const std::size_t take = std::min(max_pos, budget - cursor);
      CandidateList list;
      list.user_id = uid;
      list.split = tag;
      for (std::size_t k = 0; k < take; ++k) {
        list.items.push_back(positives[cursor + k]);
        list.labels.push_back(1);
        out.held_out[uid].insert(positives[cursor + k]);
      }
      cursor += take;
      std::set<ItemId> in_list(list.items.begin(), list.items.end());
      while (list.items.size() < cfg.list_len) {
        const ItemId cand = universe[rng.below(universe.size())];
        if (interacted.count(cand) || in_list.count(cand)) continue;
        in_list.insert(cand);
        list.items.push_back(cand);
        list.labels.push_back(0);
      }
      // shuffle items and labels together
      std::vector<std::size_t> order(list.items.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      CandidateList shuffled = list;
      for (std::size_t k = 0; k < order.size(); ++k) {
        shuffled.items[k] = list.items[order[k]];
        shuffled.labels[k] = list.labels[order[k]];
      }
      out.lists.push_back(std::move(shuffled));
    }
  }
  return out;
}

std::map<UserId, UserProfile> strip_held_out(const std::map<UserId, UserProfile>& profiles,
                                             const std::map<UserId, std::set<ItemId>>& held_out) {
  std::map<UserId, UserProfile> out = profiles;
  for (auto& [uid, prof] : out) {
    auto it = held_out.find(uid);
    if (it == held_out.end()) continue;
    std::erase_if(prof.history, [&](const HistoryEntry& h) { return it->second.count(h.item) > 0; });
  }
  return out;
}

void write_lists(const fs::path& path, const std::vector<CandidateList>& lists) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& l : lists) {
    out << json{{"user", l.user_id}, {"items", l.items}, {"labels", l.labels}, {"split", split_name(l.split)}}.dump()
        << '\n';
  }
}

std::vector<CandidateList> read_lists(const fs::path& path) {
  auto in = open_or_throw(path);
  std::vector<CandidateList> lists;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      CandidateList l;
      l.user_id = j.at("user").get<UserId>();
      l.items = j.at("items").get<std::vector<ItemId>>();
      l.labels = j.at("labels").get<std::vector<int>>();
      l.split = parse_split(j.at("split").get<std::string>());
      if (l.items.size() != l.labels.size()) throw DataError("items/labels length mismatch");
      lists.push_back(std::move(l));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return lists;
}

// ---------------------------------------------------------------------------

std::vector<std::string> default_genre_names(std::size_t n) {
  static const std::vector<std::string> names = {"comedy",  "drama",   "horror",      "action",
                                                 "romance", "western", "documentary", "musical"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(i < names.size() ? names[i] : "genre" + std::to_string(i));
  return out;
}

SyntheticWorld generate_synthetic_world(const SyntheticConfig& c) {
  if (c.n_genres < 2) throw std::invalid_argument("synthetic world: n_genres must be >= 2");
  if (!(c.noise >= 0.0 && c.noise < 0.5)) throw std::invalid_argument("synthetic world: noise must be in [0, 0.5)");
  if (c.n_users < 2 || c.n_items < 2 * c.n_genres) {
    throw std::invalid_argument("synthetic world: need >= 2 users and >= 2 items per genre");
  }
  if (c.min_interactions == 0 || c.min_interactions > c.max_interactions || c.max_interactions > c.n_items / 2) {
    throw std::invalid_argument("synthetic world: interaction counts must satisfy 0 < min <= max <= n_items/2");
  }
  const auto genres = default_genre_names(c.n_genres);
  Catalog catalog;
  std::vector<std::vector<ItemId>> by_genre(c.n_genres);
  for (std::size_t i = 0; i < c.n_items; ++i) {
    const auto id = static_cast<ItemId>(i + 1);
    const std::size_t g = i % c.n_genres;
    catalog.add({id, "item" + std::to_string(id), {genres[g]}});
    by_genre[g].push_back(id);
  }

  SyntheticWorld world;
  std::vector<Interaction> interactions;
  for (std::size_t u = 0; u < c.n_users; ++u) {
    const auto uid = static_cast<UserId>(u + 1);
    nk::Rng rng(c.seed, 0x5F17ULL, uid);
    const std::size_t pref = rng.below(c.n_genres);
    world.preferred_genre[uid] = genres[pref];
    const std::size_t count = c.min_interactions + rng.below(c.max_interactions - c.min_interactions + 1);
    std::set<ItemId> chosen;
    std::int64_t ts = 1'000'000'000 + static_cast<std::int64_t>(u) * 10'000;
    while (chosen.size() < count) {
      ItemId item;
      if (rng.bernoulli(c.preferred_bias)) {
        item = by_genre[pref][rng.below(by_genre[pref].size())];
      } else {
        item = static_cast<ItemId>(rng.below(c.n_items) + 1);
      }
      if (!chosen.insert(item).second) continue;
      const bool preferred = static_cast<std::size_t>(item - 1) % c.n_genres == pref;
      const bool positive = rng.bernoulli(preferred ? 1.0 - c.noise : c.noise);
      const int rating = positive ? 4 + static_cast<int>(rng.below(2)) : 1 + static_cast<int>(rng.below(3));
      ts += 60 + static_cast<std::int64_t>(rng.below(600));
      interactions.push_back({uid, item, rating, ts, 0});
    }
  }
  world.dataset = assemble_dataset(std::move(interactions), std::move(catalog));
  return world;
}

}  // namespace prefrank::data
