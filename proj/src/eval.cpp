#include "kvleak/eval.hpp"

#include <algorithm>
#include <istream>
#include <limits>
#include <set>

#include "kvleak/util.hpp"
#include "json.hpp"

namespace kvleak {

SessionRecord make_record(const RecoveryResult& result, std::size_t victim_len) {
  if (result.recovered.size() > victim_len)
    throw Error(ErrKind::Invalid, "make_record: recovered more tokens than the victim has");
  if (result.complete && result.recovered.size() != victim_len)
    throw Error(ErrKind::Invalid, "make_record: complete session with a partial recovery");
  SessionRecord rec;
  rec.victim_len = victim_len;
  rec.tokens_recovered = result.recovered.size();
  rec.complete = result.complete;
  rec.requests_used = result.requests_used;
  rec.per_token_requests = result.per_token_requests;
  rec.wasted_requests = result.wasted_requests;
  rec.wire_requests = result.wire_requests;
  return rec;
}

double compute_asr(const std::vector<SessionRecord>& records, std::uint64_t budget) {
  if (records.empty()) throw Error(ErrKind::Metric, "compute_asr: no records");
  std::size_t ok = 0;
  for (const auto& r : records)
    if (r.complete && r.requests_used <= budget) ++ok;
  return static_cast<double>(ok) / static_cast<double>(records.size());
}

double compute_arpt(const std::vector<SessionRecord>& records, bool pooled) {
  double ratio_sum = 0.0;
  std::uint64_t pooled_requests = 0;
  std::uint64_t pooled_tokens = 0;
  std::size_t qualifying = 0;
  for (const auto& r : records) {
    if (r.tokens_recovered == 0) continue;
    std::uint64_t spent = 0;
    for (std::uint64_t c : r.per_token_requests) spent += c;
    ++qualifying;
    ratio_sum += static_cast<double>(spent) / static_cast<double>(r.tokens_recovered);
    pooled_requests += spent;
    pooled_tokens += r.tokens_recovered;
  }
  if (qualifying == 0)
    throw Error(ErrKind::Metric, "compute_arpt: no session recovered any token");
  if (pooled) return static_cast<double>(pooled_requests) / static_cast<double>(pooled_tokens);
  return ratio_sum / static_cast<double>(qualifying);
}

double compute_wl(const std::vector<SessionRecord>& optimized,
                  const std::vector<SessionRecord>& baseline) {
  if (optimized.size() != baseline.size())
    throw Error(ErrKind::Metric, "compute_wl: record sets differ in size");
  if (optimized.empty()) throw Error(ErrKind::Metric, "compute_wl: no records");
  auto cost = [](const SessionRecord& r) {
    return r.complete ? r.requests_used : std::numeric_limits<std::uint64_t>::max();
  };
  std::size_t wins = 0;
  for (std::size_t i = 0; i < optimized.size(); ++i)
    if (cost(optimized[i]) < cost(baseline[i])) ++wins;
  return static_cast<double>(wins) / static_cast<double>(optimized.size());
}

MetricSummary summarize(const std::vector<SessionRecord>& records,
                        const std::vector<std::uint64_t>& budgets, bool arpt_pooled) {
  if (budgets.empty()) throw Error(ErrKind::Invalid, "summarize: no budgets");
  MetricSummary out;
  std::set<std::uint64_t> unique(budgets.begin(), budgets.end());
  for (std::uint64_t b : unique) out.asr.emplace_back(b, compute_asr(records, b));
  bool any = std::any_of(records.begin(), records.end(),
                         [](const SessionRecord& r) { return r.tokens_recovered > 0; });
  if (any) {
    out.arpt_defined = true;
    out.arpt = compute_arpt(records, arpt_pooled);
  }
  for (const auto& r : records) {
    out.wasted_requests += r.wasted_requests;
    out.wire_requests += r.wire_requests;
  }
  return out;
}

std::vector<RiskEntry> parse_cache_dump(std::istream& in) {
  std::vector<RiskEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrKind::Parse, "cache dump line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!rec.is_object())
      throw Error(ErrKind::Parse,
                  "cache dump line " + std::to_string(lineno) + ": record is not an object");
    if (!rec.contains("token_ids") || !rec["token_ids"].is_array())
      throw Error(ErrKind::Parse,
                  "cache dump line " + std::to_string(lineno) + ": missing array field \"token_ids\"");
    if (!rec.contains("tenant") || !rec["tenant"].is_string())
      throw Error(ErrKind::Parse,
                  "cache dump line " + std::to_string(lineno) + ": missing string field \"tenant\"");
    if (!rec.contains("last_access") || !rec["last_access"].is_number_unsigned())
      throw Error(ErrKind::Parse, "cache dump line " + std::to_string(lineno) +
                                      ": missing unsigned field \"last_access\"");
    RiskEntry entry;
    entry.tenant = rec["tenant"].get<std::string>();
    entry.last_access = rec["last_access"].get<std::uint64_t>();
    for (const auto& v : rec["token_ids"]) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw Error(ErrKind::Parse,
                    "cache dump line " + std::to_string(lineno) + ": bad token id");
      entry.tokens.push_back(static_cast<TokenId>(v.get<std::int64_t>()));
    }
    if (entry.tokens.empty())
      throw Error(ErrKind::Parse, "cache dump line " + std::to_string(lineno) + ": empty entry");
    entries.push_back(std::move(entry));
  }
  return entries;
}

std::vector<RiskRow> assess_risk(const LanguageModel& provider_model,
                                 const std::vector<RiskEntry>& entries, const RiskConfig& cfg) {
  cfg.attack.validate();
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!cfg.tenant_filter.empty() && entries[i].tenant != cfg.tenant_filter) continue;
    for (TokenId t : entries[i].tokens)
      if (t < 0 || t >= static_cast<TokenId>(provider_model.vocab_size()))
        throw Error(ErrKind::VocabMismatch,
                    "cache entry " + std::to_string(i) + " has token id " + std::to_string(t) +
                        " outside the provider model vocabulary");
    picked.push_back(i);
  }

  std::vector<RiskRow> rows(picked.size());
  parallel_for(picked.size(), cfg.jobs, [&](std::size_t k) {
    std::size_t i = picked[k];
    const RiskEntry& entry = entries[i];
    ServerConfig server_cfg;
    server_cfg.ttft = cfg.ttft;
    server_cfg.capacity_tokens = cfg.capacity_tokens;
    server_cfg.mode = cfg.mode;
    server_cfg.seed = mix_seed(cfg.seed, i);
    ServerSim shadow(server_cfg);
    shadow.admit_victim(entry.tokens, entry.tenant);
    RecoveryResult result = recover_query(shadow, provider_model, cfg.attack);
    RiskRow row;
    row.entry_index = i;
    row.tenant = entry.tenant;
    row.length = entry.tokens.size();
    row.leakable = result.complete;
    row.cost = result.complete ? result.requests_used : 0;
    row.flagged = result.complete && result.requests_used <= cfg.threshold;
    rows[k] = std::move(row);
  });
  return rows;
}

}  // namespace kvleak
