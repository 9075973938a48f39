#include "kvleak/runner.hpp"

#include <cerrno>
#include <climits>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "kvleak/attacker.hpp"
#include "kvleak/corpus.hpp"
#include "kvleak/eval.hpp"
#include "kvleak/lm.hpp"
#include "kvleak/server.hpp"
#include "kvleak/train.hpp"
#include "kvleak/util.hpp"

namespace kvleak {

namespace fs = std::filesystem;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "annotate.dedup",    "annotate.gamma",
      "attack.budgets",    "attack.count_mode",
      "attack.instruction_prefix",
      "attack.kappa",      "attack.m",
      "attack.qgen",       "attack.theta",
      "attack.traces",
      "corpus.test",       "corpus.train",
      "corpus.validation",
      "dpo.beta",          "dpo.learning_rate",
      "dpo.steps",
      "eval.arpt_pooled",
      "io.baseline_model", "io.model",
      "io.model_out",      "io.pairs",
      "io.vocab",
      "jobs",
      "model.kind",        "model.order",
      "out",
      "risk.corpus",       "risk.dump",
      "risk.tenant",       "risk.threshold",
      "seed",
      "server.capacity",   "server.schedule",
      "sft.add_k",         "sft.epochs",
      "sft.learning_rate",
      "ttft.alpha",        "ttft.base",
      "ttft.noise_sigma",
  };
  return keys;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrKind::Io, "cannot open config file: " + path);
  KvConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrKind::Parse,
                  path + " line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  if (!known_keys().count(key)) throw Error(ErrKind::Config, "unknown config key: " + key);
  entries_[key] = value;
}

bool KvConfig::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

std::string KvConfig::require_str(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end())
    throw Error(ErrKind::Config, "missing required config key: " + key);
  return it->second;
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    return parse_double(it->second);
  } catch (const Error&) {
    throw Error(ErrKind::Config,
                "config key " + key + ": expected a number, got '" + it->second + "'");
  }
}

int KvConfig::get_int(const std::string& key, int fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  char* end = nullptr;
  errno = 0;
  long x = std::strtol(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || x < INT_MIN || x > INT_MAX)
    throw Error(ErrKind::Config,
                "config key " + key + ": expected an integer, got '" + v + "'");
  return static_cast<int>(x);
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  char* end = nullptr;
  errno = 0;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || end != v.c_str() + v.size() || errno == ERANGE)
    throw Error(ErrKind::Config,
                "config key " + key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrKind::Config, "config key " + key + ": expected true or false, got '" + v + "'");
}

std::vector<std::uint64_t> KvConfig::get_u64_list(
    const std::string& key, const std::vector<std::uint64_t>& fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::vector<std::uint64_t> out;
  std::stringstream ss(it->second);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    piece = trim(piece);
    char* end = nullptr;
    errno = 0;
    unsigned long long x = std::strtoull(piece.c_str(), &end, 10);
    if (piece.empty() || piece[0] == '-' || end != piece.c_str() + piece.size() || errno == ERANGE)
      throw Error(ErrKind::Config,
                  "config key " + key + ": expected comma-separated integers, got '" +
                      it->second + "'");
    out.push_back(static_cast<std::uint64_t>(x));
  }
  if (out.empty())
    throw Error(ErrKind::Config, "config key " + key + ": empty list");
  return out;
}

namespace {

fs::path ensure_out_dir(const KvConfig& cfg) {
  fs::path out = cfg.get_str("out", "out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrKind::Io, "cannot create output directory: " + out.string());
  return out;
}

std::ofstream open_write(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrKind::Io, "cannot write file: " + path.string());
  return f;
}

std::ifstream open_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrKind::Io, "cannot open file: " + path);
  return f;
}

// io.vocab when set, otherwise the vocabulary built from the named corpus.
Vocabulary resolve_vocab(const KvConfig& cfg, const std::string& fallback_corpus_key) {
  if (cfg.has("io.vocab")) {
    auto in = open_read(cfg.require_str("io.vocab"));
    return Vocabulary::load(in);
  }
  std::string path = cfg.get_str(fallback_corpus_key, "");
  if (path.empty())
    throw Error(ErrKind::Config, "no vocabulary source: set io.vocab or " + fallback_corpus_key);
  return load_corpus(path, Split::Train).vocab;
}

LanguageModel load_model_file(const std::string& path,
                              std::optional<std::uint64_t> expect_vocab_hash) {
  auto in = open_read(path);
  return LanguageModel::load(in, expect_vocab_hash);
}

std::string model_in_path(const KvConfig& cfg, const fs::path& out) {
  return cfg.has("io.model") ? cfg.require_str("io.model") : (out / "sft.model").string();
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "uniform") return ModelKind::Uniform;
  if (s == "ngram") return ModelKind::Ngram;
  if (s == "loglinear") return ModelKind::Loglinear;
  throw Error(ErrKind::Config, "model.kind must be uniform, ngram, or loglinear, got '" + s + "'");
}

CountMode parse_count_mode(const std::string& s) {
  if (s == "to_hit") return CountMode::ToHit;
  if (s == "full_batch") return CountMode::FullBatch;
  throw Error(ErrKind::Config, "attack.count_mode must be to_hit or full_batch, got '" + s + "'");
}

ScheduleMode parse_schedule(const std::string& s) {
  if (s == "dynamic") return ScheduleMode::Dynamic;
  if (s == "snapshot") return ScheduleMode::Snapshot;
  throw Error(ErrKind::Config, "server.schedule must be dynamic or snapshot, got '" + s + "'");
}

TokenSeq instruction_tokens(const std::string& text, const Vocabulary& vocab) {
  TokenSeq out;
  std::string dropped;
  for (const std::string& w : split_text(text)) {
    if (vocab.contains(w)) {
      out.push_back(vocab.id_of(w));
    } else {
      dropped += ' ';
      dropped += w;
    }
  }
  if (!dropped.empty())
    std::cerr << "warning: instruction prefix tokens outside the vocabulary dropped:" << dropped
              << "\n";
  return out;
}

AttackConfig make_attack_config(const KvConfig& cfg, const Vocabulary* vocab) {
  AttackConfig a;
  a.m = cfg.get_int("attack.m", 20);
  a.qgen_size = cfg.get_int("attack.qgen", 20);
  a.theta_sensitivity = cfg.get_double("attack.theta", 0.5);
  a.kappa = cfg.get_int("attack.kappa", 200);
  a.budgets = cfg.get_u64_list("attack.budgets", {500, 1000, 10000});
  a.count_mode = parse_count_mode(cfg.get_str("attack.count_mode", "to_hit"));
  std::string prefix_text =
      cfg.get_str("attack.instruction_prefix", "Help me to guess the input:");
  if (!prefix_text.empty()) {
    if (vocab)
      a.instruction_prefix = instruction_tokens(prefix_text, *vocab);
    else
      std::cerr << "warning: no vocabulary available, instruction prefix ignored\n";
  }
  a.validate();
  return a;
}

TtftParams make_ttft(const KvConfig& cfg) {
  TtftParams t;
  t.alpha = cfg.get_double("ttft.alpha", 1.0);
  t.base = cfg.get_double("ttft.base", 0.0);
  t.noise_sigma = cfg.get_double("ttft.noise_sigma", 0.0);
  return t;
}

void write_id_array(std::ostream& out, const TokenSeq& seq) {
  out << '[';
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out << ',';
    out << seq[i];
  }
  out << ']';
}

void write_tokens_file(const fs::path& path, const Corpus& corpus) {
  auto f = open_write(path);
  for (const auto& s : corpus.samples) {
    f << "{\"query_ids\":";
    write_id_array(f, s.query);
    f << ",\"response_ids\":";
    write_id_array(f, s.response);
    f << "}\n";
  }
}

// Echo of the explicitly-set configuration, alphabetical, `jobs` excluded
// so worker count never shows up in a golden report.
void write_config_echo(std::ostream& out, const KvConfig& cfg, const std::string& indent) {
  out << "{";
  bool first = true;
  for (const auto& [key, value] : cfg.entries()) {
    if (key == "jobs") continue;
    if (!first) out << ",";
    first = false;
    out << "\n" << indent << "  \"" << json_escape(key) << "\": \"" << json_escape(value) << "\"";
  }
  if (!first) out << "\n" << indent;
  out << "}";
}

void write_metric_block(std::ostream& out, const MetricSummary& s, std::size_t sessions,
                        const std::string& indent) {
  out << "{\n";
  out << indent << "  \"arpt\": " << (s.arpt_defined ? fmt_g6(s.arpt) : "null") << ",\n";
  out << indent << "  \"asr\": [";
  for (std::size_t i = 0; i < s.asr.size(); ++i) {
    if (i) out << ", ";
    out << "[" << s.asr[i].first << ", " << fmt_g6(s.asr[i].second) << "]";
  }
  out << "],\n";
  out << indent << "  \"sessions\": " << sessions << ",\n";
  out << indent << "  \"wasted_requests\": " << s.wasted_requests << ",\n";
  out << indent << "  \"wire_requests\": " << s.wire_requests << "\n";
  out << indent << "}";
}

void write_metric_csv(std::ostream& out, const std::string& prefix, const MetricSummary& s,
                      std::size_t sessions) {
  out << prefix << ".arpt," << (s.arpt_defined ? fmt_g6(s.arpt) : "") << "\n";
  for (const auto& [budget, value] : s.asr)
    out << prefix << ".asr_" << budget << "," << fmt_g6(value) << "\n";
  out << prefix << ".sessions," << sessions << "\n";
  out << prefix << ".wasted_requests," << s.wasted_requests << "\n";
  out << prefix << ".wire_requests," << s.wire_requests << "\n";
}

void write_session_rows(std::ostream& out, const std::string& variant,
                        const std::vector<SessionRecord>& records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << variant << ',' << i << ',' << r.victim_len << ',' << r.tokens_recovered << ','
        << (r.complete ? 1 : 0) << ',' << r.requests_used << ',' << r.wasted_requests << ','
        << r.wire_requests << "\n";
  }
}

}  // namespace

void run_ingest(const KvConfig& cfg) {
  fs::path out = ensure_out_dir(cfg);
  Corpus train = load_corpus(cfg.require_str("corpus.train"), Split::Train);
  fs::path vocab_path =
      cfg.has("io.vocab") ? fs::path(cfg.require_str("io.vocab")) : out / "vocab.txt";
  {
    auto f = open_write(vocab_path);
    train.vocab.save(f);
  }
  write_tokens_file(out / "tokens_train.jsonl", train);
  if (cfg.has("corpus.validation")) {
    Corpus v = load_corpus(cfg.require_str("corpus.validation"), Split::Validation, train.vocab);
    write_tokens_file(out / "tokens_validation.jsonl", v);
  }
  if (cfg.has("corpus.test")) {
    Corpus t = load_corpus(cfg.require_str("corpus.test"), Split::Test, train.vocab);
    write_tokens_file(out / "tokens_test.jsonl", t);
  }
  std::cout << "ingest: " << train.samples.size() << " train samples, vocabulary "
            << train.vocab.size() << " tokens -> " << vocab_path.string() << "\n";
}

void run_train_sft(const KvConfig& cfg) {
  fs::path out = ensure_out_dir(cfg);
  Vocabulary vocab = resolve_vocab(cfg, "corpus.train");
  ModelKind kind = parse_model_kind(cfg.get_str("model.kind", "ngram"));
  fs::path model_path = model_in_path(cfg, out);

  if (kind == ModelKind::Uniform) {
    LanguageModel model = LanguageModel::make_uniform(vocab.size(), vocab.hash());
    auto f = open_write(model_path);
    model.save(f);
    std::cout << "train-sft: uniform baseline over " << vocab.size() << " tokens -> "
              << model_path.string() << "\n";
    return;
  }

  Corpus train = load_corpus(cfg.require_str("corpus.train"), Split::Train, vocab);
  SftConfig scfg;
  scfg.kind = kind;
  scfg.ngram_order = cfg.get_int("model.order", 2);
  scfg.add_k = cfg.get_double("sft.add_k", 0.5);
  scfg.learning_rate = cfg.get_double("sft.learning_rate", 0.1);
  scfg.epochs = cfg.get_int("sft.epochs", 1);

  LanguageModel base = LanguageModel::make_uniform(vocab.size(), vocab.hash());
  LossTrace trace;
  LanguageModel model = sft_fit(base, train, scfg, &trace);
  {
    auto f = open_write(model_path);
    model.save(f);
  }
  {
    auto f = open_write(out / "sft_loss.csv");
    save_loss_trace(trace, f);
  }
  std::cout << "train-sft: " << cfg.get_str("model.kind", "ngram") << " order "
            << scfg.ngram_order << ", " << train.samples.size() << " samples, mean nll "
            << fmt_g6(mean_nll(model, train)) << " -> " << model_path.string() << "\n";
}

void run_annotate(const KvConfig& cfg) {
  fs::path out = ensure_out_dir(cfg);
  Vocabulary vocab = resolve_vocab(cfg, "corpus.train");
  Corpus train = load_corpus(cfg.require_str("corpus.train"), Split::Train, vocab);
  LanguageModel model = load_model_file(model_in_path(cfg, out), vocab.hash());

  if (!cfg.has("annotate.gamma"))
    throw Error(ErrKind::Config, "annotate.gamma is required (no default rank threshold)");
  AnnotationConfig acfg;
  acfg.gamma = cfg.get_int("annotate.gamma", 0);
  acfg.dedup = cfg.get_bool("annotate.dedup", true);

  auto positions = annotate_hard_tokens(model, train, acfg);
  auto pairs = build_preference_pairs(model, train, acfg);
  fs::path pairs_path =
      cfg.has("io.pairs") ? fs::path(cfg.require_str("io.pairs")) : out / "pairs.jsonl";
  {
    auto f = open_write(pairs_path);
    save_pairs(pairs, f);
  }
  std::cout << "annotate: gamma " << acfg.gamma << ", " << positions.size()
            << " hard positions, " << pairs.size() << " pairs -> " << pairs_path.string() << "\n";
}

void run_train_dpo(const KvConfig& cfg) {
  fs::path out = ensure_out_dir(cfg);
  std::optional<std::uint64_t> expect_hash;
  if (cfg.has("io.vocab")) {
    auto in = open_read(cfg.require_str("io.vocab"));
    expect_hash = Vocabulary::load(in).hash();
  }
  LanguageModel sft = load_model_file(model_in_path(cfg, out), expect_hash);

  fs::path pairs_path =
      cfg.has("io.pairs") ? fs::path(cfg.require_str("io.pairs")) : out / "pairs.jsonl";
  std::vector<PreferencePair> pairs;
  {
    auto in = open_read(pairs_path.string());
    pairs = load_pairs(in);
  }
  for (const auto& p : pairs) {
    auto in_vocab = [&](TokenId t) { return t >= 0 && t < static_cast<TokenId>(sft.vocab_size()); };
    bool ok = in_vocab(p.win_token) && in_vocab(p.lose_token);
    for (TokenId t : p.prefix) ok = ok && in_vocab(t);
    if (!ok)
      throw Error(ErrKind::VocabMismatch,
                  "preference pair holds token ids outside the model vocabulary");
  }

  DpoConfig dcfg;
  dcfg.beta = cfg.get_double("dpo.beta", 0.1);
  dcfg.learning_rate = cfg.get_double("dpo.learning_rate", 0.5);
  dcfg.steps = cfg.get_int("dpo.steps", 50);

  LossTrace trace;
  LanguageModel dpo = dpo_fit(sft, pairs, dcfg, &trace);
  fs::path out_path =
      cfg.has("io.model_out") ? fs::path(cfg.require_str("io.model_out")) : out / "dpo.model";
  {
    auto f = open_write(out_path);
    dpo.save(f);
  }
  {
    auto f = open_write(out / "dpo_loss.csv");
    save_loss_trace(trace, f);
  }
  std::cout << "train-dpo: " << dcfg.steps << " steps over " << pairs.size() << " pairs -> "
            << out_path.string() << "\n";
}

void run_attack(const KvConfig& cfg) {
  fs::path out = ensure_out_dir(cfg);
  Vocabulary vocab = resolve_vocab(cfg, "corpus.train");
  Corpus test = load_corpus(cfg.require_str("corpus.test"), Split::Test, vocab);
  LanguageModel model = load_model_file(model_in_path(cfg, out), vocab.hash());
  bool have_baseline = cfg.has("io.baseline_model");
  LanguageModel baseline;
  if (have_baseline)
    baseline = load_model_file(cfg.require_str("io.baseline_model"), vocab.hash());

  AttackConfig acfg = make_attack_config(cfg, &vocab);
  TtftParams ttft = make_ttft(cfg);
  ScheduleMode mode = parse_schedule(cfg.get_str("server.schedule", "dynamic"));
  std::uint64_t capacity = cfg.get_u64("server.capacity", 0);
  std::uint64_t seed = cfg.get_u64("seed", 0);
  int jobs = cfg.get_int("jobs", 1);
  bool traces = cfg.get_bool("attack.traces", false);
  bool pooled = cfg.get_bool("eval.arpt_pooled", false);

  if (traces) {
    std::error_code ec;
    fs::create_directories(out / "traces", ec);
    if (ec) throw Error(ErrKind::Io, "cannot create trace directory");
  }

  std::size_t n = test.samples.size();
  std::vector<SessionRecord> model_records(n);
  std::vector<SessionRecord> base_records(have_baseline ? n : 0);

  auto run_one = [&](const LanguageModel& lm, std::size_t i, const char* variant) {
    ServerConfig scfg;
    scfg.ttft = ttft;
    scfg.capacity_tokens = capacity;
    scfg.mode = mode;
    scfg.seed = mix_seed(seed, i);
    ServerSim server(scfg);
    server.admit_victim(test.samples[i].query);
    RecoveryResult result = recover_query(server, lm, acfg);
    if (traces) {
      auto f = open_write(out / "traces" /
                          (std::string(variant) + "_session_" + std::to_string(i) + ".jsonl"));
      write_trace(result.trace, f);
    }
    return make_record(result, test.samples[i].query.size());
  };

  parallel_for(n, jobs, [&](std::size_t i) {
    model_records[i] = run_one(model, i, "model");
    if (have_baseline) base_records[i] = run_one(baseline, i, "baseline");
  });

  MetricSummary ms = summarize(model_records, acfg.budgets, pooled);
  MetricSummary bs;
  double wl = 0.0;
  if (have_baseline) {
    bs = summarize(base_records, acfg.budgets, pooled);
    wl = compute_wl(model_records, base_records);
  }

  {
    auto f = open_write(out / "report.json");
    f << "{\n  \"config\": ";
    write_config_echo(f, cfg, "  ");
    f << ",\n  \"metrics\": {\n";
    if (have_baseline) {
      f << "    \"baseline\": ";
      write_metric_block(f, bs, n, "    ");
      f << ",\n";
    }
    f << "    \"model\": ";
    write_metric_block(f, ms, n, "    ");
    if (have_baseline)
      f << ",\n    \"wl\": " << fmt_g6(wl) << "\n";
    else
      f << "\n";
    f << "  },\n  \"seed\": " << seed << "\n}\n";
  }
  {
    auto f = open_write(out / "report.csv");
    f << "metric,value\n";
    if (have_baseline) write_metric_csv(f, "baseline", bs, n);
    write_metric_csv(f, "model", ms, n);
    if (have_baseline) f << "wl," << fmt_g6(wl) << "\n";
  }
  {
    auto f = open_write(out / "sessions.csv");
    f << "variant,victim,victim_len,tokens_recovered,complete,requests_used,"
         "wasted_requests,wire_requests\n";
    if (have_baseline) write_session_rows(f, "baseline", base_records);
    write_session_rows(f, "model", model_records);
  }

  std::cout << "attack: " << n << " sessions, arpt "
            << (ms.arpt_defined ? fmt_g6(ms.arpt) : "n/a");
  if (!ms.asr.empty())
    std::cout << ", asr_" << ms.asr.back().first << " " << fmt_g6(ms.asr.back().second);
  if (have_baseline) std::cout << ", wl " << fmt_g6(wl);
  std::cout << " -> " << (out / "report.json").string() << "\n";
}

void run_assess_risk(const KvConfig& cfg) {
  fs::path out = ensure_out_dir(cfg);
  bool have_dump = cfg.has("risk.dump");
  bool have_corpus = cfg.has("risk.corpus");
  if (have_dump == have_corpus)
    throw Error(ErrKind::Config, "assess-risk needs exactly one of risk.dump or risk.corpus");

  std::optional<Vocabulary> vocab;
  if (cfg.has("io.vocab")) {
    auto in = open_read(cfg.require_str("io.vocab"));
    vocab = Vocabulary::load(in);
  }

  std::vector<RiskEntry> entries;
  if (have_dump) {
    auto in = open_read(cfg.require_str("risk.dump"));
    entries = parse_cache_dump(in);
  } else {
    Corpus rc;
    if (vocab) {
      rc = load_corpus(cfg.require_str("risk.corpus"), Split::Test, *vocab);
    } else {
      rc = load_corpus(cfg.require_str("risk.corpus"), Split::Train);
      vocab = rc.vocab;
    }
    ServerConfig scfg;
    scfg.seed = cfg.get_u64("seed", 0);
    ServerSim server(scfg);
    for (const auto& s : rc.samples) server.admit_victim(s.query);
    {
      auto f = open_write(out / "cache.dump");
      server.dump_cache(f);
    }
    auto in = open_read((out / "cache.dump").string());
    entries = parse_cache_dump(in);
  }

  std::optional<std::uint64_t> expect_hash;
  if (vocab) expect_hash = vocab->hash();
  LanguageModel model = load_model_file(model_in_path(cfg, out), expect_hash);

  RiskConfig rcfg;
  rcfg.attack = make_attack_config(cfg, vocab ? &*vocab : nullptr);
  rcfg.ttft = make_ttft(cfg);
  rcfg.mode = parse_schedule(cfg.get_str("server.schedule", "dynamic"));
  rcfg.capacity_tokens = cfg.get_u64("server.capacity", 0);
  rcfg.seed = cfg.get_u64("seed", 0);
  rcfg.threshold = cfg.get_u64("risk.threshold", 1000);
  rcfg.tenant_filter = cfg.get_str("risk.tenant", "");
  rcfg.jobs = cfg.get_int("jobs", 1);

  std::vector<RiskRow> rows = assess_risk(model, entries, rcfg);
  std::size_t flagged = 0;
  for (const auto& r : rows)
    if (r.flagged) ++flagged;

  {
    auto f = open_write(out / "risk_report.json");
    f << "{\n  \"config\": ";
    write_config_echo(f, cfg, "  ");
    f << ",\n  \"entries\": [";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (i) f << ",";
      f << "\n    {\"cost\": ";
      if (r.leakable)
        f << r.cost;
      else
        f << "null";
      f << ", \"entry_index\": " << r.entry_index << ", \"flagged\": "
        << (r.flagged ? "true" : "false") << ", \"leakable\": "
        << (r.leakable ? "true" : "false") << ", \"length\": " << r.length << ", \"tenant\": \""
        << json_escape(r.tenant) << "\"}";
    }
    if (!rows.empty()) f << "\n  ";
    f << "],\n  \"seed\": " << rcfg.seed << ",\n  \"threshold\": " << rcfg.threshold << "\n}\n";
  }
  {
    auto f = open_write(out / "risk_report.csv");
    f << "entry_index,tenant,length,leakable,cost,flagged\n";
    for (const auto& r : rows) {
      f << r.entry_index << ',' << r.tenant << ',' << r.length << ',' << (r.leakable ? 1 : 0)
        << ',';
      if (r.leakable) f << r.cost;
      f << ',' << (r.flagged ? 1 : 0) << "\n";
    }
  }

  std::cout << "assess-risk: " << rows.size() << " entries, " << flagged
            << " flagged at threshold " << rcfg.threshold << " -> "
            << (out / "risk_report.json").string() << "\n";
}

bool run_subcommand(const std::string& name, const KvConfig& cfg) {
  if (name == "ingest")
    run_ingest(cfg);
  else if (name == "train-sft")
    run_train_sft(cfg);
  else if (name == "annotate")
    run_annotate(cfg);
  else if (name == "train-dpo")
    run_train_dpo(cfg);
  else if (name == "attack")
    run_attack(cfg);
  else if (name == "assess-risk")
    run_assess_risk(cfg);
  else
    return false;
  return true;
}

}  // namespace kvleak
