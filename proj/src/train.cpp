#include "kvleak/train.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <tuple>

#include "json.hpp"
#include "kvleak/util.hpp"

namespace kvleak {

namespace {

TokenSeq concat_sample(const Sample& s) {
  TokenSeq seq = s.query;
  seq.insert(seq.end(), s.response.begin(), s.response.end());
  return seq;
}

void check_vocab(const LanguageModel& model, const Corpus& corpus, const char* who) {
  if (model.vocab_hash() != corpus.vocab.hash() || model.vocab_size() != corpus.vocab.size())
    throw Error(ErrKind::VocabMismatch,
                std::string(who) + ": model and corpus vocabularies differ");
}

}  // namespace

double mean_nll(const LanguageModel& model, const Corpus& corpus) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus.samples) {
    TokenSeq seq = concat_sample(s);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      TokenSeq prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t));
      Distribution d = model.next_dist(prefix);
      double p = d[static_cast<std::size_t>(seq[t])];
      nll += -std::log(std::max(p, 1e-300));
      ++n;
    }
  }
  return n ? nll / static_cast<double>(n) : 0.0;
}

LanguageModel sft_fit(const LanguageModel& base, const Corpus& corpus, const SftConfig& cfg,
                      LossTrace* trace) {
  if (corpus.samples.empty()) throw Error(ErrKind::Invalid, "sft_fit: empty corpus");
  check_vocab(base, corpus, "sft_fit");
  if (cfg.ngram_order < 0) throw Error(ErrKind::Config, "sft.order must be >= 0");
  if (cfg.add_k < 0) throw Error(ErrKind::Config, "sft.add_k must be >= 0");

  if (cfg.kind == ModelKind::Ngram) {
    LanguageModel model = LanguageModel::make_ngram(cfg.ngram_order, cfg.add_k,
                                                    base.vocab_size(), base.vocab_hash());
    for (const auto& s : corpus.samples) model.observe(concat_sample(s));
    if (trace) trace->push_back({0, mean_nll(model, corpus)});
    return model;
  }

  if (cfg.kind != ModelKind::Loglinear)
    throw Error(ErrKind::Config, "sft.kind must be ngram or loglinear");
  if (cfg.learning_rate <= 0) throw Error(ErrKind::Config, "sft.learning_rate must be > 0");
  if (cfg.epochs < 1) throw Error(ErrKind::Config, "sft.epochs must be >= 1");

  LanguageModel model = LanguageModel::make_loglinear(cfg.ngram_order, base);
  const int vs = model.vocab_size();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& s : corpus.samples) {
      TokenSeq seq = concat_sample(s);
      for (std::size_t t = 0; t < seq.size(); ++t) {
        TokenSeq prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t));
        ContextKey key = model.context_key(prefix);
        std::vector<double>& z = model.row(key);
        Distribution p = model.next_dist(prefix);
        TokenId target = seq[t];
        nll += -std::log(std::max(p[static_cast<std::size_t>(target)], 1e-300));
        ++n;
        for (TokenId v = 0; v < vs; ++v) {
          double g = (v == target ? 1.0 : 0.0) - p[static_cast<std::size_t>(v)];
          z[static_cast<std::size_t>(v)] += cfg.learning_rate * g;
        }
      }
    }
    if (trace) trace->push_back({epoch, n ? nll / static_cast<double>(n) : 0.0});
  }
  return model;
}

std::vector<Annotation> annotate_hard_tokens(const LanguageModel& model, const Corpus& corpus,
                                             const AnnotationConfig& cfg) {
  check_vocab(model, corpus, "annotate_hard_tokens");
  if (cfg.gamma < 1 || cfg.gamma > model.vocab_size())
    throw Error(ErrKind::Config, "gamma must be in [1, vocab_size]");
  std::vector<Annotation> out;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    TokenSeq seq = concat_sample(corpus.samples[i]);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      TokenSeq prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t));
      if (model.rank_token(prefix, seq[t]) > cfg.gamma)
        out.push_back({static_cast<int>(i), static_cast<int>(t)});
    }
  }
  return out;
}

std::vector<PreferencePair> build_preference_pairs(const LanguageModel& model,
                                                   const Corpus& corpus,
                                                   const AnnotationConfig& cfg) {
  auto annotations = annotate_hard_tokens(model, corpus, cfg);
  std::vector<PreferencePair> pairs;
  std::set<std::tuple<TokenSeq, TokenId, TokenId>> seen;
  for (const auto& a : annotations) {
    TokenSeq seq = concat_sample(corpus.samples[static_cast<std::size_t>(a.sample_index)]);
    PreferencePair p;
    p.prefix.assign(seq.begin(), seq.begin() + a.position);
    p.win_token = seq[static_cast<std::size_t>(a.position)];
    p.lose_token = model.greedy_next(p.prefix);
    p.sample_index = a.sample_index;
    p.position = a.position;
    // The win ranks deeper than gamma >= 1 while the lose ranks first, so
    // they can never coincide.
    if (p.win_token == p.lose_token)
      throw Error(ErrKind::Invalid, "preference pair with win == lose");
    if (cfg.dedup && !seen.insert({p.prefix, p.win_token, p.lose_token}).second) continue;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void save_pairs(const std::vector<PreferencePair>& pairs, std::ostream& out) {
  for (const auto& p : pairs) {
    out << "{\"lose_id\":" << p.lose_token << ",\"prefix_ids\":[";
    for (std::size_t i = 0; i < p.prefix.size(); ++i) {
      if (i) out << ',';
      out << p.prefix[i];
    }
    out << "],\"source\":[" << p.sample_index << ',' << p.position << "],\"win_id\":"
        << p.win_token << "}\n";
  }
}

std::vector<PreferencePair> load_pairs(std::istream& in) {
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrKind::Parse, "pairs line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!rec.contains("prefix_ids") || !rec.contains("win_id") || !rec.contains("lose_id"))
      throw Error(ErrKind::Parse, "pairs line " + std::to_string(lineno) + ": missing field");
    PreferencePair p;
    p.prefix = rec["prefix_ids"].get<TokenSeq>();
    p.win_token = rec["win_id"].get<TokenId>();
    p.lose_token = rec["lose_id"].get<TokenId>();
    if (rec.contains("source") && rec["source"].is_array() && rec["source"].size() == 2) {
      p.sample_index = rec["source"][0].get<int>();
      p.position = rec["source"][1].get<int>();
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

namespace {

struct PairTerms {
  double u = 0.0;
  double loss = 0.0;
};

PairTerms pair_terms(const LanguageModel& policy, const LanguageModel& reference,
                     const PreferencePair& pair, double beta) {
  if (beta <= 0) throw Error(ErrKind::Invalid, "dpo beta must be > 0");
  Distribution dp = policy.next_dist(pair.prefix);
  Distribution dr = reference.next_dist(pair.prefix);
  auto logp = [&](const Distribution& d, TokenId tok, const char* which) {
    if (tok < 0 || tok >= static_cast<TokenId>(d.size()))
      throw Error(ErrKind::Invalid, "dpo pair token out of range");
    double p = d[static_cast<std::size_t>(tok)];
    if (!(p > 0.0))
      throw Error(ErrKind::Invalid,
                  std::string("dpo_loss: zero probability for ") + which + " token");
    return std::log(p);
  };
  double delta_win = logp(dp, pair.win_token, "win") - logp(dr, pair.win_token, "win");
  double delta_lose = logp(dp, pair.lose_token, "lose") - logp(dr, pair.lose_token, "lose");
  PairTerms t;
  t.u = beta * (delta_win - delta_lose);
  t.loss = softplus(-t.u);
  return t;
}

}  // namespace

double dpo_loss(const LanguageModel& policy, const LanguageModel& reference,
                const PreferencePair& pair, double beta) {
  return pair_terms(policy, reference, pair, beta).loss;
}

PairGrad dpo_pair_grad(const LanguageModel& policy, const LanguageModel& reference,
                       const PreferencePair& pair, double beta) {
  PairTerms t = pair_terms(policy, reference, pair, beta);
  // d u / d z[v] = beta * (1{v==win} - 1{v==lose}): the softmax
  // normalization cancels between the win and lose log-probabilities.
  double g = sigmoid(-t.u) * beta;
  PairGrad out;
  out.loss = t.loss;
  out.d_win = -g;
  out.d_lose = g;
  return out;
}

double dpo_step(LanguageModel& policy, const LanguageModel& reference,
                const std::vector<PreferencePair>& pairs, const DpoConfig& cfg) {
  if (pairs.empty()) throw Error(ErrKind::Invalid, "dpo_step: no pairs");
  std::map<ContextKey, std::map<TokenId, double>> grad;
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(pairs.size());
  for (const auto& pair : pairs) {
    PairGrad g = dpo_pair_grad(policy, reference, pair, cfg.beta);
    loss += g.loss * scale;
    ContextKey key = policy.context_key(pair.prefix);
    grad[key][pair.win_token] += g.d_win * scale;
    grad[key][pair.lose_token] += g.d_lose * scale;
  }
  for (const auto& [key, slots] : grad) {
    std::vector<double>& z = policy.row(key);
    for (const auto& [tok, g] : slots)
      z[static_cast<std::size_t>(tok)] -= cfg.learning_rate * g;
  }
  return loss;
}

LanguageModel dpo_fit(const LanguageModel& sft_model, const std::vector<PreferencePair>& pairs,
                      const DpoConfig& cfg, LossTrace* trace) {
  if (pairs.empty()) throw Error(ErrKind::Invalid, "dpo_fit: no preference pairs");
  if (cfg.beta <= 0) throw Error(ErrKind::Config, "dpo.beta must be > 0");
  if (cfg.learning_rate < 0) throw Error(ErrKind::Config, "dpo.learning_rate must be >= 0");
  if (cfg.steps < 0) throw Error(ErrKind::Config, "dpo.steps must be >= 0");
  for (const auto& p : pairs)
    if (p.win_token < 0 || p.win_token >= sft_model.vocab_size() || p.lose_token < 0 ||
        p.lose_token >= sft_model.vocab_size())
      throw Error(ErrKind::Invalid, "dpo_fit: pair token outside the vocabulary");

  LanguageModel policy = to_loglinear(sft_model);
  const LanguageModel reference = policy;  // frozen
  for (int step = 1; step <= cfg.steps; ++step) {
    double loss = dpo_step(policy, reference, pairs, cfg);
    if (trace) trace->push_back({step, loss});
  }
  return policy;
}

void save_loss_trace(const LossTrace& trace, std::ostream& out) {
  out << "step,mean_loss\n";
  for (const auto& [step, loss] : trace) out << step << ',' << fmt_g6(loss) << '\n';
}

}  // namespace kvleak
