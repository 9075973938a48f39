#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kvleak/corpus.hpp"
#include "kvleak/util.hpp"

namespace kvleak {

// Compressed radix tree over token sequences. Edges carry token runs; a
// shared prefix is stored once. Capacity is measured in cached tokens
// (total edge length); 0 means unbounded. When an insert pushes the total
// over capacity, least-recently-touched leaves are evicted until it fits,
// never touching the path just inserted.
class PrefixCache {
 public:
  explicit PrefixCache(std::size_t capacity_tokens = 0);
  PrefixCache(const PrefixCache&) = delete;
  PrefixCache& operator=(const PrefixCache&) = delete;
  PrefixCache(PrefixCache&&) = default;
  PrefixCache& operator=(PrefixCache&&) = default;

  // Length of the longest common prefix between seq and any cached
  // sequence. Read-only: recency is refreshed by insert, not lookup.
  std::size_t match_prefix(const TokenSeq& seq) const;

  // Adds seq, splitting edges as needed, and stamps the whole path with a
  // fresh access tick. Re-inserting a cached sequence only refreshes it.
  void insert(const TokenSeq& seq);

  std::size_t token_count() const { return token_count_; }
  std::size_t capacity_tokens() const { return capacity_; }
  std::uint64_t clock() const { return clock_; }

 private:
  struct Node {
    TokenSeq edge;
    std::map<TokenId, std::unique_ptr<Node>> children;  // keyed by first edge token
    Node* parent = nullptr;
    std::uint64_t last_access = 0;
  };

  std::unique_ptr<Node> root_;
  std::size_t capacity_ = 0;
  std::size_t token_count_ = 0;
  std::uint64_t clock_ = 0;

  void evict_down_to_capacity(const std::vector<const Node*>& protect);
};

struct TtftParams {
  double alpha = 1.0;       // per-token prefill cost for the unmatched part
  double base = 0.0;        // fixed overhead
  double noise_sigma = 0.0; // stddev of additive Gaussian jitter
};

// alpha * (total_len - matched_len) + base + noise, clamped at zero. With
// noise_sigma == 0 no random draw is consumed.
double simulate_ttft(const TtftParams& params, std::size_t total_len, std::size_t matched_len,
                     Rng& rng);

struct Request {
  TokenSeq tokens;
  std::string tenant;
  int arrival_index = 0;
};

struct ScheduledRequest {
  Request request;
  int position = 0;          // scheduling slot, 0 = served first
  std::size_t matched_len = 0;  // cache match at the moment of scheduling
  double ttft = 0.0;
};

struct ResponseOrder {
  std::vector<ScheduledRequest> entries;  // in scheduling order
  int position_of(int arrival_index) const;
};

enum class ScheduleMode {
  Dynamic,   // re-match the waiting set after every insertion
  Snapshot,  // match once against the pre-batch cache, then order by it
};

struct ServerConfig {
  TtftParams ttft;
  std::size_t capacity_tokens = 0;  // 0 = unbounded
  ScheduleMode mode = ScheduleMode::Dynamic;
  std::uint64_t seed = 0;
};

// Single-node serving simulator: one shared prefix cache, longest-prefix-
// match batch scheduling, and a linear TTFT model. All randomness comes
// from the seeded per-server stream, so equal seeds replay exactly.
class ServerSim {
 public:
  explicit ServerSim(const ServerConfig& cfg);

  void admit_victim(const TokenSeq& query, const std::string& tenant = "victim");

  // Schedules the whole batch: repeatedly serve the waiting request with
  // the longest cache match (ties to the earliest arrival), inserting each
  // served request's tokens before re-matching the rest.
  ResponseOrder process_batch(const std::vector<Request>& batch);

  std::size_t match_prefix(const TokenSeq& seq) const { return cache_.match_prefix(seq); }
  const PrefixCache& cache() const { return cache_; }

  // One line per fully cached sequence: {"last_access":..,"tenant":..,
  // "token_ids":[..]}. Entries whose path was partially evicted are skipped.
  void dump_cache(std::ostream& out) const;

 private:
  ServerConfig cfg_;
  PrefixCache cache_;
  Rng rng_;
  struct EntryMeta {
    std::string tenant;
    std::uint64_t last_access = 0;
  };
  std::map<TokenSeq, EntryMeta> entries_;

  void note_entry(const TokenSeq& seq, const std::string& tenant);
};

// position, arrival_index, matched_len, ttft rows for offline inspection.
void write_schedule_csv(const ResponseOrder& order, std::ostream& out);

}  // namespace kvleak
