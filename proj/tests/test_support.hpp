#pragma once

// Shared oracles and helpers for the test binaries. The oracles are literal
// scans and replays, slow on purpose: they are the independent references
// the fast implementations are held against.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "kvleak/corpus.hpp"
#include "kvleak/lm.hpp"
#include "kvleak/server.hpp"
#include "kvleak/util.hpp"

namespace kvleak::testsup {

// Longest common prefix between q and any stored sequence, by full scan.
inline std::size_t naive_lcp(const std::vector<TokenSeq>& stored, const TokenSeq& q) {
  std::size_t best = 0;
  for (const auto& s : stored) {
    std::size_t n = 0;
    while (n < s.size() && n < q.size() && s[n] == q[n]) ++n;
    best = std::max(best, n);
  }
  return best;
}

// Literal dynamic longest-prefix-match replay: serve the waiting request
// with the longest match against everything inserted so far (ties to the
// earliest arrival), insert it, re-match the rest. Returns
// (arrival_index, matched_len) in serve order.
inline std::vector<std::pair<int, std::size_t>> naive_schedule(std::vector<TokenSeq> stored,
                                                               const std::vector<Request>& batch) {
  std::vector<bool> done(batch.size(), false);
  std::vector<std::pair<int, std::size_t>> order;
  for (std::size_t round = 0; round < batch.size(); ++round) {
    int pick = -1;
    std::size_t pick_match = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (done[i]) continue;
      std::size_t m = naive_lcp(stored, batch[i].tokens);
      if (pick < 0 || m > pick_match ||
          (m == pick_match &&
           batch[i].arrival_index < batch[static_cast<std::size_t>(pick)].arrival_index)) {
        pick = static_cast<int>(i);
        pick_match = m;
      }
    }
    done[static_cast<std::size_t>(pick)] = true;
    order.emplace_back(batch[static_cast<std::size_t>(pick)].arrival_index, pick_match);
    stored.push_back(batch[static_cast<std::size_t>(pick)].tokens);
  }
  return order;
}

// Random sequence with token ids in [2, vocab_size) and length in [lo, hi].
inline TokenSeq random_seq(Rng& rng, int vocab_size, int lo, int hi) {
  int len = static_cast<int>(rng.uniform_int(lo, hi));
  TokenSeq s;
  for (int i = 0; i < len; ++i)
    s.push_back(static_cast<TokenId>(rng.uniform_int(2, vocab_size - 1)));
  return s;
}

// Half the time extends a prefix of a pool sequence, so inserts fork
// mid-edge, which is where radix bugs live.
inline TokenSeq branchy_seq(Rng& rng, const std::vector<TokenSeq>& pool, int vocab_size, int lo,
                            int hi) {
  if (!pool.empty() && rng.uniform01() < 0.5) {
    const TokenSeq& base = pool[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
    if (!base.empty()) {
      std::size_t cut = static_cast<std::size_t>(
          rng.uniform_int(1, static_cast<std::int64_t>(base.size())));
      TokenSeq s(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(cut));
      TokenSeq tail = random_seq(rng, vocab_size, 0, hi);
      s.insert(s.end(), tail.begin(), tail.end());
      return s.empty() ? random_seq(rng, vocab_size, std::max(lo, 1), hi) : s;
    }
  }
  return random_seq(rng, vocab_size, std::max(lo, 1), hi);
}

// Vocabulary of n tokens: the two reserved ones plus w2..w<n-1>.
inline Vocabulary make_vocab(int n) {
  std::vector<std::string> toks = {Vocabulary::eos_surface(), Vocabulary::unk_surface()};
  for (int i = 2; i < n; ++i) toks.push_back("w" + std::to_string(i));
  return Vocabulary(std::move(toks));
}

// Corpus from already-tokenized records; queries get the end marker appended.
inline Corpus corpus_from_ids(const std::vector<std::pair<TokenSeq, TokenSeq>>& recs,
                              Vocabulary vocab) {
  Corpus c;
  c.vocab = std::move(vocab);
  for (const auto& [q, r] : recs) {
    Sample s;
    s.query = q;
    s.query.push_back(Vocabulary::kEosId);
    s.response = r;
    c.samples.push_back(std::move(s));
  }
  return c;
}

inline Corpus random_corpus(Rng& rng, int vocab_size, int n_samples, int max_len) {
  std::vector<std::pair<TokenSeq, TokenSeq>> recs;
  for (int i = 0; i < n_samples; ++i)
    recs.emplace_back(random_seq(rng, vocab_size, 1, max_len),
                      random_seq(rng, vocab_size, 0, max_len));
  return corpus_from_ids(recs, make_vocab(vocab_size));
}

// Random log-linear model over a fitted n-gram backbone, with every backbone
// context row materialized and jittered. Returns the touched keys through
// keys_out so callers can pick training targets that actually have rows.
inline LanguageModel random_loglinear(Rng& rng, int vocab_size, int order,
                                      std::vector<ContextKey>* keys_out = nullptr) {
  LanguageModel backbone = LanguageModel::make_ngram(order, 0.5, vocab_size, 12345u);
  std::vector<TokenSeq> seqs;
  for (int i = 0; i < 6; ++i) seqs.push_back(random_seq(rng, vocab_size, 2, 8));
  for (const auto& s : seqs) backbone.observe(s);
  LanguageModel ll = LanguageModel::make_loglinear(order, backbone);
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      TokenSeq prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(t) + 1);
      ContextKey key = ll.context_key(prefix);
      auto& row = ll.row(key);
      for (double& z : row) z += rng.normal(0.0, 0.5);
      if (keys_out) keys_out->push_back(key);
    }
  }
  return ll;
}

// Fresh directory under the system temp root, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 1000; ++i) {
      auto p = base / ("kvleak_test_" + std::to_string(::getpid()) + "_" +
                       std::to_string(counter.fetch_add(1)));
      std::error_code ec;
      if (std::filesystem::create_directory(p, ec)) {
        path_ = p;
        return;
      }
    }
    throw std::runtime_error("cannot create a temp directory");
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel) const { return (path_ / rel).string(); }

  void write_file(const std::string& rel, const std::string& content) const {
    std::ofstream out(path_ / rel);
    out << content;
  }
  std::string read_file(const std::string& rel) const {
    std::ifstream in(path_ / rel, std::ios::binary);
    if (!in) throw std::runtime_error("missing file: " + rel);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

 private:
  std::filesystem::path path_;
};

// Two-corpus synthetic domain: deterministic word frames, so a fitted model
// pins every in-frame transition at rank 1 while an untrained baseline has
// to sweep the vocabulary. With rare_panel, panel frames share the context
// (review, the) followed by one common continuation and eight rare ones,
// each rare word tied to a single frame; test queries always take a rare
// continuation. Fully deterministic for a fixed seed.
struct SynthCorpus {
  Corpus train;
  Corpus test;
};

inline SynthCorpus synth_corpus(std::uint64_t seed, bool rare_panel) {
  const int n_frames = 40;
  const int frame_len = 7;
  const int n_panel_frames = 8;  // frames 0..7 carry the panel slot
  std::vector<std::string> words;
  for (int i = 0; i < n_frames * frame_len; ++i) words.push_back("t" + std::to_string(i));
  std::vector<std::string> extra = {"review", "the", "panel0"};
  for (int r = 0; r < n_panel_frames; ++r) extra.push_back("rare" + std::to_string(r));

  std::vector<std::string> toks = {Vocabulary::eos_surface(), Vocabulary::unk_surface()};
  toks.insert(toks.end(), words.begin(), words.end());
  toks.insert(toks.end(), extra.begin(), extra.end());
  Vocabulary vocab(toks);

  auto frame_query = [&](int f, int rare/* -1 = common panel word */) {
    std::vector<std::string> out;
    for (int i = 0; i < frame_len; ++i) out.push_back(words[static_cast<std::size_t>(f * frame_len + i)]);
    if (rare_panel && f < n_panel_frames) {
      // [t0 t1 review the PANEL t4 t5 t6] keeps the frame length uniform.
      out[2] = "review";
      out[3] = "the";
      out.insert(out.begin() + 4, rare >= 0 ? "rare" + std::to_string(rare) : "panel0");
    }
    std::string text;
    for (std::size_t i = 0; i < out.size(); ++i) text += (i ? " " : "") + out[i];
    return text;
  };

  Rng rng(seed);
  auto draw = [&](int n_samples, bool rare_heavy) {
    std::vector<std::pair<std::string, std::string>> recs;
    for (int i = 0; i < n_samples; ++i) {
      int f = static_cast<int>(rng.uniform_int(0, n_frames - 1));
      int rare = -1;
      if (rare_panel && f < n_panel_frames) {
        double p_rare = rare_heavy ? 1.0 : 0.1;
        if (rng.uniform01() < p_rare) rare = f;  // frame f's own rare word
      }
      recs.emplace_back(frame_query(f, rare), "");
    }
    return recs;
  };

  auto to_corpus = [&](const std::vector<std::pair<std::string, std::string>>& recs, Split split) {
    Corpus c;
    c.vocab = vocab;
    c.split = split;
    for (const auto& [q, r] : recs) {
      Sample s;
      s.query = tokenize(q, c.vocab);
      s.query.push_back(Vocabulary::kEosId);
      s.response = tokenize(r, c.vocab);
      c.samples.push_back(std::move(s));
    }
    return c;
  };

  auto train_recs = draw(500, false);
  if (rare_panel) {
    // Every rare word is seen at least once, so test-time ranks depend on
    // counts rather than on smoothing-floor tie-breaks.
    for (int f = 0; f < n_panel_frames; ++f) train_recs.emplace_back(frame_query(f, f), "");
  }
  SynthCorpus out;
  out.train = to_corpus(train_recs, Split::Train);
  out.test = to_corpus(draw(50, true), Split::Test);
  return out;
}

}  // namespace kvleak::testsup
