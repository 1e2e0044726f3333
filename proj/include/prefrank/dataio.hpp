#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prefrank::data {

using UserId = std::int64_t;
using ItemId = std::int64_t;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ratings >= 4 are positive; implicit feedback (rating 0) counts as positive.
inline int binarize(int rating) { return rating == 0 || rating >= 4 ? 1 : 0; }

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  int rating = 0;  // 1..5, or 0 for implicit feedback
  std::int64_t ts = 0;
  int label = 0;
};

struct HistoryEntry {
  ItemId item = 0;
  int label = 0;
  std::int64_t ts = 0;
};

struct UserProfile {
  UserId user_id = 0;
  /// Ordered categorical fields, e.g. gender/age/occupation. Empty for
  /// datasets without user features.
  std::vector<std::pair<std::string, std::string>> fields;
  /// Ascending by timestamp.
  std::vector<HistoryEntry> history;
};

struct CatalogItem {
  ItemId item_id = 0;
  std::string title;
  std::vector<std::string> genres;
};

class Catalog {
 public:
  void add(CatalogItem item);
  bool contains(ItemId id) const { return items_.count(id) > 0; }
  const CatalogItem& at(ItemId id) const;
  const std::map<ItemId, CatalogItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  ItemId max_id() const { return items_.empty() ? 0 : items_.rbegin()->first; }
  /// Sorted, de-duplicated genre tokens.
  const std::vector<std::string>& genre_vocab() const { return genres_; }

 private:
  std::map<ItemId, CatalogItem> items_;
  std::vector<std::string> genres_;
};

struct RejectedLine {
  std::string file;
  std::size_t line = 0;
  std::string reason;
};

struct IngestReport {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  std::size_t dropped_missing_item = 0;
  std::vector<RejectedLine> rejected;
};

struct Dataset {
  std::vector<Interaction> interactions;
  std::map<UserId, UserProfile> profiles;
  Catalog catalog;
  IngestReport report;
};

/// Reads the "::"-separated ratings/movies/users files. `users_path` may be
/// empty. Malformed lines are skipped and listed in the report.
Dataset ingest_ml1m(const std::filesystem::path& ratings_path, const std::filesystem::path& movies_path,
                    const std::filesystem::path& users_path);

/// Canonical JSONL directory: interactions.jsonl, catalog.jsonl and an
/// optional users.jsonl.
Dataset ingest_jsonl(const std::filesystem::path& dir);
void write_jsonl(const std::filesystem::path& dir, const Dataset& dataset);

/// Assembles profiles and the report from raw interactions; drops
/// interactions whose item is missing from the catalog.
Dataset assemble_dataset(std::vector<Interaction> interactions, Catalog catalog,
                         const std::map<UserId, std::vector<std::pair<std::string, std::string>>>& user_fields = {});

/// Returns the input unchanged when it is valid UTF-8, otherwise decodes it
/// as Latin-1.
std::string to_utf8(const std::string& bytes);

// ---------------------------------------------------------------------------

struct UserSplit {
  std::vector<UserId> train;
  std::vector<UserId> test;
  bool is_train(UserId u) const;
  bool is_test(UserId u) const;
};

/// Train size is floor(train_fraction * n) clamped to [1, n-1]. Users are
/// ordered by a hash of (seed, user id), so membership does not depend on
/// input order.
UserSplit split_by_user(const std::map<UserId, UserProfile>& profiles, double train_fraction, std::uint64_t seed);

enum class SplitTag { Train, Valid, Test };

/// Raised when a test-tagged list reaches reward scoring or pair mining.
class LeakageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};
const char* split_name(SplitTag tag);
SplitTag parse_split(const std::string& name);

struct CandidateList {
  UserId user_id = 0;
  std::vector<ItemId> items;
  std::vector<int> labels;
  SplitTag split = SplitTag::Train;

  std::size_t positives() const;
  friend bool operator==(const CandidateList&, const CandidateList&) = default;
};

struct ListConfig {
  std::size_t list_len = 10;
  std::size_t negatives_per_positive = 4;
  std::size_t train_lists_per_user = 2;
  std::size_t valid_lists_per_user = 1;
};

struct ListBuild {
  std::vector<CandidateList> lists;
  std::size_t skipped_no_positive = 0;
  std::size_t skipped_small_pool = 0;
  /// Items moved out of each user's history into candidate lists.
  std::map<UserId, std::set<ItemId>> held_out;
};

/// Builds fixed-length lists: the user's most recent positives (at most
/// list_len / (1 + negatives_per_positive) per list, never more than half of
/// the user's positives in total) mixed with negatives sampled uniformly from
/// items the user never interacted with, then shuffled. Train users get
/// valid lists (most recent positives) followed by train lists; test users
/// get one test list.
ListBuild build_candidate_lists(const Dataset& dataset, const UserSplit& split, const ListConfig& config,
                                std::uint64_t seed);

/// Profiles with held-out items removed from the history, for prompting.
std::map<UserId, UserProfile> strip_held_out(const std::map<UserId, UserProfile>& profiles,
                                             const std::map<UserId, std::set<ItemId>>& held_out);

void write_lists(const std::filesystem::path& path, const std::vector<CandidateList>& lists);
std::vector<CandidateList> read_lists(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct SyntheticConfig {
  std::size_t n_users = 500;
  std::size_t n_items = 200;
  std::size_t n_genres = 4;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::size_t min_interactions = 20;
  std::size_t max_interactions = 40;
  /// Probability that an interaction is drawn from the preferred genre
  /// rather than uniformly from the catalog.
  double preferred_bias = 0.5;
};

struct SyntheticWorld {
  Dataset dataset;
  std::map<UserId, std::string> preferred_genre;
};

/// Items get genre (id mod n_genres); each user has one latent preferred
/// genre. Labels are 1 with probability 1-noise on preferred-genre items and
/// noise otherwise.
SyntheticWorld generate_synthetic_world(const SyntheticConfig& config);

std::vector<std::string> default_genre_names(std::size_t n);

}  // namespace prefrank::data
