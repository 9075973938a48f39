#include "kvleak/attacker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "kvleak/util.hpp"

namespace kvleak {

std::uint64_t AttackConfig::max_budget() const {
  std::uint64_t best = 0;
  for (auto b : budgets) best = std::max(best, b);
  return best;
}

void AttackConfig::validate() const {
  if (m < 1) throw Error(ErrKind::Config, "attack.m must be >= 1");
  if (qgen_size < 1) throw Error(ErrKind::Config, "attack.qgen must be >= 1");
  if (!(theta_sensitivity > 0.0) || !(theta_sensitivity < 1.0))
    throw Error(ErrKind::Config, "attack.theta must be in (0, 1)");
  if (kappa < qgen_size)
    throw Error(ErrKind::Config, "attack.kappa must be >= attack.qgen");
  if (budgets.empty()) throw Error(ErrKind::Config, "attack.budgets must be non-empty");
}

static long gap_threshold(double theta, int m) {
  // ceil(theta * m); the tiny slack keeps an exact integer product from
  // rounding up when the double is one ulp high (e.g. 0.9 * 20).
  return static_cast<long>(std::ceil(theta * static_cast<double>(m) - 1e-9));
}

std::vector<TokenId> generate_candidates(const LanguageModel& model, const TokenSeq& recovered,
                                         const TokenIdSet& exclude, const AttackConfig& cfg) {
  TokenSeq context = cfg.instruction_prefix;
  context.insert(context.end(), recovered.begin(), recovered.end());
  return model.top_k(context, cfg.qgen_size, exclude);
}

AttackBatch build_batch(const std::vector<TokenId>& candidates, TokenId dummy_token,
                        const TokenSeq& shared_prefix, int m) {
  if (candidates.empty()) throw Error(ErrKind::Invalid, "build_batch: no candidates");
  if (m < 1) throw Error(ErrKind::Invalid, "build_batch: m must be >= 1");
  for (TokenId c : candidates)
    if (c == dummy_token)
      throw Error(ErrKind::Invalid, "build_batch: dummy token collides with a candidate");

  AttackBatch batch;
  batch.candidate_tokens = candidates;
  batch.dummy_token = dummy_token;
  batch.shared_prefix = shared_prefix;
  batch.m = m;
  batch.requests.reserve(static_cast<std::size_t>(2 * m) + candidates.size());

  auto make_request = [&](TokenId final_token, int arrival) {
    Request r;
    r.tokens = shared_prefix;
    r.tokens.push_back(final_token);
    r.tenant = "attacker";
    r.arrival_index = arrival;
    return r;
  };

  int arrival = 0;
  for (int i = 0; i < m; ++i) batch.requests.push_back(make_request(dummy_token, arrival++));
  for (TokenId c : candidates) batch.requests.push_back(make_request(c, arrival++));
  for (int i = 0; i < m; ++i) batch.requests.push_back(make_request(dummy_token, arrival++));
  return batch;
}

HitResult detect_hit(const ResponseOrder& order, const AttackBatch& batch,
                     const AttackConfig& cfg) {
  const int q = static_cast<int>(batch.candidate_tokens.size());
  const int total = 2 * batch.m + q;
  if (static_cast<int>(order.entries.size()) != total)
    throw Error(ErrKind::Invalid, "detect_hit: order does not cover the batch");

  std::vector<int> pos_of(static_cast<std::size_t>(total), -1);
  for (const auto& e : order.entries) {
    int a = e.request.arrival_index;
    if (a < 0 || a >= total || pos_of[static_cast<std::size_t>(a)] != -1)
      throw Error(ErrKind::Invalid, "detect_hit: order does not cover the batch");
    pos_of[static_cast<std::size_t>(a)] = e.position;
  }

  const long threshold = gap_threshold(cfg.theta_sensitivity, batch.m);
  auto cand_pos = [&](int i) {
    return static_cast<long>(pos_of[static_cast<std::size_t>(batch.candidate_arrival(i))]);
  };

  std::vector<long> gaps(static_cast<std::size_t>(q));
  if (q == 1) {
    // No peer candidates to compare against; the trailing dummy group marks
    // where an ordinary (non-hit) request would have been served.
    long min_trailing = std::numeric_limits<long>::max();
    for (int a = batch.m + q; a < total; ++a)
      min_trailing = std::min<long>(min_trailing, pos_of[static_cast<std::size_t>(a)]);
    gaps[0] = min_trailing - cand_pos(0);
  } else {
    for (int i = 0; i < q; ++i) {
      long min_other = std::numeric_limits<long>::max();
      for (int j = 0; j < q; ++j)
        if (j != i) min_other = std::min(min_other, cand_pos(j));
      gaps[static_cast<std::size_t>(i)] = min_other - cand_pos(i);
    }
  }

  HitResult best;
  int best_i = -1;
  long max_gap = std::numeric_limits<long>::min();
  for (int i = 0; i < q; ++i) {
    long gap = gaps[static_cast<std::size_t>(i)];
    max_gap = std::max(max_gap, gap);
    if (gap <= threshold) continue;
    if (best_i < 0 || gap > gaps[static_cast<std::size_t>(best_i)] ||
        (gap == gaps[static_cast<std::size_t>(best_i)] && cand_pos(i) < cand_pos(best_i)))
      best_i = i;
  }
  if (best_i >= 0) {
    best.hit = true;
    best.token = batch.candidate_tokens[static_cast<std::size_t>(best_i)];
    best.gap = gaps[static_cast<std::size_t>(best_i)];
  } else {
    best.gap = max_gap;
  }
  return best;
}

std::pair<HitResult, std::uint64_t> recover_token(ServerSim& server, const LanguageModel& model,
                                                  SessionState& state, const AttackConfig& cfg,
                                                  std::uint64_t budget_left) {
  const std::uint64_t cap = std::min<std::uint64_t>(static_cast<std::uint64_t>(cfg.kappa),
                                                    budget_left);
  const int position = static_cast<int>(state.recovered.size());
  std::uint64_t spent = 0;
  int attempt = 0;
  TokenIdSet tried;  // every token probed at this prefix, candidates and dummies

  while (spent < cap) {
    std::vector<TokenId> candidates = generate_candidates(model, state.recovered, tried, cfg);
    if (candidates.empty()) break;

    TokenSeq context = cfg.instruction_prefix;
    context.insert(context.end(), state.recovered.begin(), state.recovered.end());
    // Dummies are never reused in the session, and must also avoid every
    // probe already sent at this prefix: such a dummy would find its own
    // sequence cached and skew the response order.
    TokenIdSet dummy_exclude = state.used_dummies;
    dummy_exclude.insert(tried.begin(), tried.end());
    for (TokenId c : candidates) dummy_exclude.insert(c);
    if (static_cast<int>(dummy_exclude.size()) >= model.vocab_size()) break;
    TokenId dummy = model.low_prob_token(context, dummy_exclude);

    AttackBatch batch = build_batch(candidates, dummy, state.recovered, cfg.m);
    ResponseOrder order = server.process_batch(batch.requests);
    HitResult hit = detect_hit(order, batch, cfg);

    ++attempt;
    state.used_dummies.insert(dummy);
    tried.insert(dummy);
    state.wire_requests += batch.requests.size();

    std::uint64_t charged;
    if (hit.hit && cfg.count_mode == CountMode::ToHit) {
      auto it = std::find(candidates.begin(), candidates.end(), hit.token);
      charged = static_cast<std::uint64_t>(it - candidates.begin()) + 1;
    } else {
      charged = candidates.size();
    }
    spent += charged;

    state.trace.push_back(
        {position, attempt, candidates, dummy, hit.hit, hit.gap, spent});

    if (hit.hit) return {hit, spent};
    for (TokenId c : candidates) tried.insert(c);
  }
  return {HitResult{}, spent};
}

RecoveryResult recover_query(ServerSim& server, const LanguageModel& model,
                             const AttackConfig& cfg) {
  cfg.validate();
  const std::uint64_t budget = cfg.max_budget();
  SessionState state;
  RecoveryResult result;

  while (result.requests_used < budget) {
    auto [hit, spent] = recover_token(server, model, state, cfg, budget - result.requests_used);
    result.requests_used += spent;
    if (!hit.hit) {
      result.wasted_requests = spent;
      break;
    }
    state.recovered.push_back(hit.token);
    result.per_token_requests.push_back(spent);
    if (hit.token == Vocabulary::kEosId) {
      result.complete = true;
      break;
    }
  }

  result.recovered = std::move(state.recovered);
  result.trace = std::move(state.trace);
  result.wire_requests = state.wire_requests;
  return result;
}

void write_trace(const std::vector<TraceRow>& trace, std::ostream& out) {
  for (const auto& row : trace) {
    out << "{\"attempt\":" << row.attempt << ",\"candidates\":[";
    for (std::size_t i = 0; i < row.candidates.size(); ++i) {
      if (i) out << ',';
      out << row.candidates[i];
    }
    out << "],\"dummy_token\":" << row.dummy_token << ",\"gap\":" << row.gap
        << ",\"hit\":" << (row.hit ? "true" : "false") << ",\"position\":" << row.position
        << ",\"requests_spent\":" << row.requests_spent << "}\n";
  }
}

}  // namespace kvleak
