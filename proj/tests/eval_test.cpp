#include <sstream>

#include "doctest.h"
#include "kvleak/eval.hpp"
#include "kvleak/util.hpp"
#include "test_support.hpp"

using namespace kvleak;

namespace {

SessionRecord record(std::size_t victim_len, std::vector<std::uint64_t> per_token, bool complete,
                     std::uint64_t wasted = 0) {
  SessionRecord r;
  r.victim_len = victim_len;
  r.tokens_recovered = per_token.size();
  r.complete = complete;
  for (std::uint64_t c : per_token) r.requests_used += c;
  r.requests_used += wasted;
  r.per_token_requests = std::move(per_token);
  r.wasted_requests = wasted;
  r.wire_requests = r.requests_used * 3;
  return r;
}

std::vector<RiskEntry> parse_str(const std::string& text) {
  std::istringstream in(text);
  return parse_cache_dump(in);
}

}  // namespace

TEST_CASE("make_record copies the session outcome and rejects impossible ones") {
  RecoveryResult res;
  res.recovered = {3, 5, 0};
  res.complete = true;
  res.requests_used = 7;
  res.per_token_requests = {5, 1, 1};
  res.wasted_requests = 0;
  res.wire_requests = 21;
  SessionRecord rec = make_record(res, 3);
  CHECK(rec.victim_len == 3);
  CHECK(rec.tokens_recovered == 3);
  CHECK(rec.complete);
  CHECK(rec.requests_used == 7);
  CHECK(rec.per_token_requests == std::vector<std::uint64_t>{5, 1, 1});

  CHECK_THROWS_AS(static_cast<void>(make_record(res, 2)), Error);
  res.complete = true;
  CHECK_THROWS_AS(static_cast<void>(make_record(res, 4)), Error);
  res.complete = false;
  CHECK(make_record(res, 4).tokens_recovered == 3);
}

TEST_CASE("asr counts complete sessions within the budget") {
  std::vector<SessionRecord> records = {
      record(2, {50, 50}, true),          // used 100
      record(2, {300, 300}, true),        // used 600
      record(2, {1000, 1000}, true),      // used 2000
      record(3, {50}, false),             // incomplete
  };
  CHECK(compute_asr(records, 99) == doctest::Approx(0.0));
  CHECK(compute_asr(records, 100) == doctest::Approx(0.25));
  CHECK(compute_asr(records, 1000) == doctest::Approx(0.5));
  CHECK(compute_asr(records, 10000) == doctest::Approx(0.75));
  // An incomplete session never counts, no matter the budget.
  CHECK(compute_asr(records, std::numeric_limits<std::uint64_t>::max()) ==
        doctest::Approx(0.75));
  CHECK_THROWS_AS(static_cast<void>(compute_asr({}, 100)), Error);
}

TEST_CASE("asr is monotone in the budget") {
  Rng rng(5);
  std::vector<SessionRecord> records;
  for (int i = 0; i < 40; ++i)
    records.push_back(record(1, {static_cast<std::uint64_t>(rng.uniform_int(1, 2000))},
                             rng.uniform01() < 0.7));
  double prev = 0.0;
  for (std::uint64_t b : {0ull, 10ull, 100ull, 500ull, 1000ull, 10000ull}) {
    double cur = compute_asr(records, b);
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("arpt averages per-session request-per-token ratios") {
  std::vector<SessionRecord> one = {record(5, {3, 1, 20, 2, 1}, true)};
  CHECK(compute_arpt(one) == doctest::Approx(27.0 / 5.0));

  std::vector<SessionRecord> flat = {record(3, {20, 20, 20}, true)};
  CHECK(compute_arpt(flat) == doctest::Approx(20.0));
}

TEST_CASE("arpt skips sessions that recovered nothing and excludes wasted spend") {
  std::vector<SessionRecord> records = {
      record(2, {2, 2}, true),
      record(4, {}, false, 120),  // no token recovered: excluded entirely
  };
  CHECK(compute_arpt(records) == doctest::Approx(2.0));

  // Wasted spend on a failed position does not inflate the ratio either.
  std::vector<SessionRecord> wasted = {record(3, {2, 2}, false, 50)};
  CHECK(compute_arpt(wasted) == doctest::Approx(2.0));

  std::vector<SessionRecord> none = {record(4, {}, false, 120)};
  CHECK_THROWS_AS(static_cast<void>(compute_arpt(none)), Error);
}

TEST_CASE("pooled arpt divides global sums instead of averaging ratios") {
  std::vector<SessionRecord> records = {
      record(2, {2, 2}, true),    // 4 requests, 2 tokens
      record(1, {10}, true),      // 10 requests, 1 token
  };
  CHECK(compute_arpt(records, false) == doctest::Approx(6.0));
  CHECK(compute_arpt(records, true) == doctest::Approx(14.0 / 3.0));
}

TEST_CASE("win rate counts strictly cheaper completions") {
  auto done = [&](std::uint64_t used) { return record(1, {used}, true); };
  auto failed = [&]() { return record(1, {}, false, 5); };

  std::vector<SessionRecord> opt = {done(10), done(20), done(30)};
  std::vector<SessionRecord> base = {done(20), done(20), done(10)};
  CHECK(compute_wl(opt, base) == doctest::Approx(1.0 / 3.0));
  CHECK(compute_wl(base, base) == doctest::Approx(0.0));
  CHECK(compute_wl({done(1), done(1)}, {done(2), done(2)}) == doctest::Approx(1.0));

  // A failed session is infinitely expensive: both failing is a loss, and
  // any completion beats a failed baseline.
  CHECK(compute_wl({failed()}, {failed()}) == doctest::Approx(0.0));
  CHECK(compute_wl({done(50000)}, {failed()}) == doctest::Approx(1.0));
  CHECK(compute_wl({failed()}, {done(50000)}) == doctest::Approx(0.0));

  CHECK_THROWS_AS(static_cast<void>(compute_wl(opt, {done(1)})), Error);
  CHECK_THROWS_AS(static_cast<void>(compute_wl({}, {})), Error);
}

TEST_CASE("summarize reports asr per unique budget in ascending order") {
  std::vector<SessionRecord> records = {
      record(2, {50, 50}, true),
      record(2, {400, 300}, true),
      record(3, {50}, false, 80),
  };
  MetricSummary s = summarize(records, {1000, 500, 1000, 500}, false);
  REQUIRE(s.asr.size() == 2);
  CHECK(s.asr[0].first == 500);
  CHECK(s.asr[0].second == doctest::Approx(1.0 / 3.0));
  CHECK(s.asr[1].first == 1000);
  CHECK(s.asr[1].second == doctest::Approx(2.0 / 3.0));
  CHECK(s.arpt_defined);
  CHECK(s.arpt == doctest::Approx((50.0 + 350.0 + 50.0) / 3.0));
  CHECK(s.wasted_requests == 80);
  CHECK(s.wire_requests == records[0].wire_requests + records[1].wire_requests +
                               records[2].wire_requests);
  CHECK_THROWS_AS(static_cast<void>(summarize(records, {}, false)), Error);
}

TEST_CASE("summarize leaves arpt undefined when nothing was recovered") {
  std::vector<SessionRecord> records = {record(3, {}, false, 40)};
  MetricSummary s = summarize(records, {500}, false);
  CHECK_FALSE(s.arpt_defined);
  CHECK(s.wasted_requests == 40);
}

TEST_CASE("parse_cache_dump reads the dump format and skips blank lines") {
  auto entries = parse_str(
      "{\"last_access\":3,\"tenant\":\"a\",\"token_ids\":[2,3,0]}\n"
      "\n"
      "   \n"
      "{\"last_access\":9,\"tenant\":\"b\",\"token_ids\":[4]}\r\n");
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].tokens == TokenSeq{2, 3, 0});
  CHECK(entries[0].tenant == "a");
  CHECK(entries[0].last_access == 3);
  CHECK(entries[1].tokens == TokenSeq{4});
  CHECK(entries[1].last_access == 9);

  CHECK(parse_str("").empty());
  CHECK(parse_str("\n\n").empty());
}

TEST_CASE("parse_cache_dump reports the offending line") {
  CHECK_THROWS_WITH_AS(static_cast<void>(parse_str("not json")),
                       doctest::Contains("cache dump line 1"), Error);
  CHECK_THROWS_WITH_AS(static_cast<void>(parse_str("[1,2]")),
                       doctest::Contains("not an object"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_str("{\"tenant\":\"a\",\"last_access\":1}")),
      doctest::Contains("token_ids"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(
          parse_str("{\"token_ids\":\"x\",\"tenant\":\"a\",\"last_access\":1}")),
      doctest::Contains("token_ids"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_str("{\"token_ids\":[1],\"last_access\":1}")),
      doctest::Contains("tenant"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_str("{\"token_ids\":[1],\"tenant\":\"a\"}")),
      doctest::Contains("last_access"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(
          parse_str("{\"token_ids\":[1],\"tenant\":\"a\",\"last_access\":-1}")),
      doctest::Contains("last_access"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(
          parse_str("{\"token_ids\":[-1],\"tenant\":\"a\",\"last_access\":1}")),
      doctest::Contains("bad token id"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(
          parse_str("{\"token_ids\":[1.5],\"tenant\":\"a\",\"last_access\":1}")),
      doctest::Contains("bad token id"), Error);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(
          parse_str("{\"token_ids\":[],\"tenant\":\"a\",\"last_access\":1}")),
      doctest::Contains("empty entry"), Error);
  // The line number names the failing line, not the count of good ones.
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_str(
          "{\"token_ids\":[1],\"tenant\":\"a\",\"last_access\":1}\n\nbroken")),
      doctest::Contains("cache dump line 3"), Error);
}

TEST_CASE("assess_risk separates leakable entries from flagged ones") {
  LanguageModel model = LanguageModel::make_uniform(64, 7u);
  std::vector<RiskEntry> entries = {
      {{2, 0}, "a", 1},   // cost 3 + 1
      {{3, 0}, "b", 2},   // cost 4 + 1
      {{4, 0}, "c", 3},   // cost 5 + 1
      {{50, 0}, "d", 4},  // outside two attempts at kappa 40: not leakable
  };
  RiskConfig cfg;
  cfg.attack.kappa = 40;
  cfg.threshold = 5;
  auto rows = assess_risk(model, entries, cfg);
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(rows[i].entry_index == i);

  CHECK(rows[0].leakable);
  CHECK(rows[0].cost == 4);
  CHECK(rows[0].flagged);
  CHECK(rows[1].leakable);
  CHECK(rows[1].cost == 5);
  CHECK(rows[1].flagged);
  CHECK(rows[2].leakable);
  CHECK(rows[2].cost == 6);
  CHECK_FALSE(rows[2].flagged);  // leakable but over the flag threshold
  CHECK_FALSE(rows[3].leakable);
  CHECK(rows[3].cost == 0);
  CHECK_FALSE(rows[3].flagged);
  CHECK(rows[2].tenant == "c");
  CHECK(rows[2].length == 2);
}

TEST_CASE("the tenant filter keeps original entry indices") {
  LanguageModel model = LanguageModel::make_uniform(64, 7u);
  std::vector<RiskEntry> entries = {
      {{2, 0}, "a", 1},
      {{3, 0}, "b", 2},
      {{4, 0}, "a", 3},
  };
  RiskConfig cfg;
  cfg.tenant_filter = "a";
  auto rows = assess_risk(model, entries, cfg);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].entry_index == 0);
  CHECK(rows[1].entry_index == 2);
  CHECK(rows[1].cost == 6);
}

TEST_CASE("assess_risk rejects entries outside the model vocabulary") {
  LanguageModel model = LanguageModel::make_uniform(8, 7u);
  std::vector<RiskEntry> entries = {{{2, 99, 0}, "a", 1}};
  RiskConfig cfg;
  CHECK_THROWS_AS(static_cast<void>(assess_risk(model, entries, cfg)), Error);
  try {
    static_cast<void>(assess_risk(model, entries, cfg));
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::VocabMismatch);
  }
}

TEST_CASE("each risk row replays the attack on a shadow server seeded by entry index") {
  LanguageModel model = LanguageModel::make_uniform(64, 7u);
  std::vector<RiskEntry> entries = {
      {{5, 3, 0}, "a", 1},
      {{9, 0}, "b", 2},
  };
  RiskConfig cfg;
  cfg.seed = 42;
  auto rows = assess_risk(model, entries, cfg);
  REQUIRE(rows.size() == 2);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ServerConfig scfg;
    scfg.ttft = cfg.ttft;
    scfg.capacity_tokens = cfg.capacity_tokens;
    scfg.mode = cfg.mode;
    scfg.seed = mix_seed(cfg.seed, i);
    ServerSim shadow(scfg);
    shadow.admit_victim(entries[i].tokens, entries[i].tenant);
    RecoveryResult direct = recover_query(shadow, model, cfg.attack);
    CHECK(rows[i].leakable == direct.complete);
    if (direct.complete) CHECK(rows[i].cost == direct.requests_used);
  }
}

TEST_CASE("risk rows are identical across job counts") {
  LanguageModel model = LanguageModel::make_uniform(64, 7u);
  std::vector<RiskEntry> entries;
  for (TokenId t = 2; t < 10; ++t) entries.push_back({{t, 0}, "a", 1});
  RiskConfig one;
  RiskConfig four;
  four.jobs = 4;
  auto rows1 = assess_risk(model, entries, one);
  auto rows4 = assess_risk(model, entries, four);
  REQUIRE(rows1.size() == rows4.size());
  for (std::size_t i = 0; i < rows1.size(); ++i) {
    CHECK(rows1[i].entry_index == rows4[i].entry_index);
    CHECK(rows1[i].leakable == rows4[i].leakable);
    CHECK(rows1[i].cost == rows4[i].cost);
    CHECK(rows1[i].flagged == rows4[i].flagged);
  }
}
