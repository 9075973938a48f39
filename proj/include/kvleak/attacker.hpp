#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "kvleak/corpus.hpp"
#include "kvleak/lm.hpp"
#include "kvleak/server.hpp"

namespace kvleak {

enum class CountMode {
  FullBatch,  // every candidate in a sent batch counts against the budget
  ToHit,      // on a hit, only candidates up to and including the hit count
};

struct AttackConfig {
  int m = 20;                     // dummy queries on each side of the batch
  int qgen_size = 20;             // candidates per attempt
  double theta_sensitivity = 0.5; // hit threshold: gap must exceed ceil(theta * m)
  int kappa = 200;                // per-position cap on candidate spend
  std::vector<std::uint64_t> budgets = {500, 1000, 10000};
  CountMode count_mode = CountMode::ToHit;
  TokenSeq instruction_prefix;    // extra conditioning tokens for the model only

  std::uint64_t max_budget() const;
  void validate() const;
};

// [m dummies | candidates | m dummies] in arrival order. Every request is
// shared_prefix plus one final token; the dummies all end with the same
// deliberately unlikely token.
struct AttackBatch {
  std::vector<Request> requests;
  std::vector<TokenId> candidate_tokens;
  TokenId dummy_token = -1;
  TokenSeq shared_prefix;
  int m = 0;

  int candidate_arrival(int i) const { return m + i; }
};

struct HitResult {
  bool hit = false;
  TokenId token = -1;
  long gap = 0;  // best observed position gap, also filled on a miss
};

// Per-attempt log row; `requests_spent` is cumulative at this position.
struct TraceRow {
  int position = 0;
  int attempt = 0;
  std::vector<TokenId> candidates;
  TokenId dummy_token = -1;
  bool hit = false;
  long gap = 0;
  std::uint64_t requests_spent = 0;
};

struct RecoveryResult {
  TokenSeq recovered;   // always a prefix of the victim under noise-free replay
  bool complete = false;  // true iff the end-of-query token was recovered
  std::uint64_t requests_used = 0;  // candidate queries, per count_mode
  std::vector<std::uint64_t> per_token_requests;  // one entry per recovered token
  std::uint64_t wasted_requests = 0;  // spend on the position that failed, if any
  std::uint64_t wire_requests = 0;    // every request actually sent, dummies included
  std::vector<TraceRow> trace;
};

// Bookkeeping carried across positions of one recovery session. No token
// is sent twice at the same prefix (as candidate or dummy), so a probe can
// only outrun its batch through the victim's entry; probes from other
// positions share at most the recovered prefix, which every batch member
// matches anyway. Dummy tokens are additionally never reused anywhere in
// the session, though a spent dummy may still be probed as a candidate at
// a later position.
struct SessionState {
  TokenSeq recovered;
  TokenIdSet used_dummies;
  std::vector<TraceRow> trace;
  std::uint64_t wire_requests = 0;
};

// Most likely next tokens under the model given the recovered prefix (the
// instruction prefix is prepended as conditioning only). `exclude` carries
// already-tried candidates and spent dummy tokens.
std::vector<TokenId> generate_candidates(const LanguageModel& model, const TokenSeq& recovered,
                                         const TokenIdSet& exclude, const AttackConfig& cfg);

AttackBatch build_batch(const std::vector<TokenId>& candidates, TokenId dummy_token,
                        const TokenSeq& shared_prefix, int m);

// A candidate hits when it was served ahead of the rest of the batch:
// min position of the other candidates minus its own position must exceed
// ceil(theta * m). With a single candidate the trailing dummy group stands
// in for the missing peers. Several qualifiers resolve to the largest gap,
// then the smallest position.
HitResult detect_hit(const ResponseOrder& order, const AttackBatch& batch,
                     const AttackConfig& cfg);

// Probes one position with repeated batches until a hit or until candidate
// spend reaches min(kappa, budget_left). Returns the hit (if any) and the
// candidates charged at this position.
std::pair<HitResult, std::uint64_t> recover_token(ServerSim& server, const LanguageModel& model,
                                                  SessionState& state, const AttackConfig& cfg,
                                                  std::uint64_t budget_left);

// Full session against a server that already holds the victim query:
// recovers token by token until the end-of-query marker, a failed position,
// or budget exhaustion.
RecoveryResult recover_query(ServerSim& server, const LanguageModel& model,
                             const AttackConfig& cfg);

void write_trace(const std::vector<TraceRow>& trace, std::ostream& out);

}  // namespace kvleak
