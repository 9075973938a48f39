#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "kvleak/attacker.hpp"
#include "kvleak/corpus.hpp"
#include "kvleak/lm.hpp"
#include "kvleak/server.hpp"

namespace kvleak {

// One victim session's outcome, reduced to what the metrics need.
struct SessionRecord {
  std::size_t victim_len = 0;        // victim tokens including the end marker
  std::size_t tokens_recovered = 0;  // always <= victim_len
  bool complete = false;             // implies tokens_recovered == victim_len
  std::uint64_t requests_used = 0;   // candidate spend under the session's count mode
  std::vector<std::uint64_t> per_token_requests;
  std::uint64_t wasted_requests = 0; // spend on a position that never resolved
  std::uint64_t wire_requests = 0;   // true request count, dummies included
};

SessionRecord make_record(const RecoveryResult& result, std::size_t victim_len);

// Fraction of sessions that recovered the whole victim within `budget` requests.
double compute_asr(const std::vector<SessionRecord>& records, std::uint64_t budget);

// Average requests per recovered token over sessions that recovered at least
// one token. Spend on failed positions is excluded (it recovered nothing).
// Per-session mean of ratios by default; `pooled` divides global sums instead.
double compute_arpt(const std::vector<SessionRecord>& records, bool pooled = false);

// Fraction of victims where the optimized run was strictly cheaper. A session
// that never completed counts as infinitely expensive, so ties and
// both-failures are losses and beating a failed baseline is a win.
double compute_wl(const std::vector<SessionRecord>& optimized,
                  const std::vector<SessionRecord>& baseline);

// ASR at each configured budget plus the scalar aggregates, ready for a report.
struct MetricSummary {
  std::vector<std::pair<std::uint64_t, double>> asr;  // ascending by budget
  bool arpt_defined = false;
  double arpt = 0.0;
  std::uint64_t wasted_requests = 0;
  std::uint64_t wire_requests = 0;
};

MetricSummary summarize(const std::vector<SessionRecord>& records,
                        const std::vector<std::uint64_t>& budgets, bool arpt_pooled);

// One cached sequence from a server cache dump.
struct RiskEntry {
  TokenSeq tokens;
  std::string tenant;
  std::uint64_t last_access = 0;
};

// Reads the JSONL format written by ServerSim::dump_cache.
std::vector<RiskEntry> parse_cache_dump(std::istream& in);

struct RiskConfig {
  AttackConfig attack;
  TtftParams ttft;
  ScheduleMode mode = ScheduleMode::Dynamic;
  std::uint64_t capacity_tokens = 0;  // shadow server capacity, 0 = unbounded
  std::uint64_t seed = 0;
  std::uint64_t threshold = 1000;     // flag entries leakable within this spend
  std::string tenant_filter;          // assess only this tenant when non-empty
  int jobs = 1;
};

struct RiskRow {
  std::size_t entry_index = 0;  // index into the parsed dump
  std::string tenant;
  std::size_t length = 0;
  bool leakable = false;        // full recovery succeeded within the attack budget
  std::uint64_t cost = 0;       // requests to full leak; meaningful only when leakable
  bool flagged = false;         // leakable and cost <= threshold
};

// Replays the recovery attack against each cached entry on a private shadow
// server seeded from (seed, entry index). The shadow replay never touches the
// cache the dump came from. Rows come back in dump order, filtered entries
// omitted.
std::vector<RiskRow> assess_risk(const LanguageModel& provider_model,
                                 const std::vector<RiskEntry>& entries, const RiskConfig& cfg);

}  // namespace kvleak
