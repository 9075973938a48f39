#pragma once

#include <iosfwd>
#include <utility>
#include <vector>

#include "kvleak/corpus.hpp"
#include "kvleak/lm.hpp"

namespace kvleak {

// (step, mean loss) rows emitted during fitting.
using LossTrace = std::vector<std::pair<int, double>>;

struct SftConfig {
  ModelKind kind = ModelKind::Ngram;  // Ngram or Loglinear
  int ngram_order = 2;
  double add_k = 0.5;
  double learning_rate = 0.1;  // Loglinear only
  int epochs = 1;              // Loglinear only
};

// Fits the adversary model on [query, response] concatenations. The n-gram
// path is exact count normalization with add-k smoothing; the log-linear
// path is gradient ascent on the sequence log-likelihood, samples visited
// in corpus order. `base` supplies the vocabulary commitment (and the
// log-linear initialization), and must match the corpus vocabulary.
LanguageModel sft_fit(const LanguageModel& base, const Corpus& corpus, const SftConfig& cfg,
                      LossTrace* trace = nullptr);

// Mean negative log-likelihood per position over the corpus.
double mean_nll(const LanguageModel& model, const Corpus& corpus);

struct AnnotationConfig {
  int gamma = 1;      // rank threshold; positions ranked deeper are "hard"
  bool dedup = true;  // drop duplicate (prefix, win, lose) triples
};

struct Annotation {
  int sample_index = 0;
  int position = 0;  // index into [query, response]; position 0 never annotated
};

// Marks every position t >= 1 whose observed token ranks strictly deeper
// than gamma under the model.
std::vector<Annotation> annotate_hard_tokens(const LanguageModel& model, const Corpus& corpus,
                                             const AnnotationConfig& cfg);

struct PreferencePair {
  TokenSeq prefix;        // the full sample prefix s_<t
  TokenId win_token = 0;  // observed hard token
  TokenId lose_token = 0; // model's greedy pick at the same prefix
  int sample_index = 0;
  int position = 0;
};

std::vector<PreferencePair> build_preference_pairs(const LanguageModel& model,
                                                   const Corpus& corpus,
                                                   const AnnotationConfig& cfg);

void save_pairs(const std::vector<PreferencePair>& pairs, std::ostream& out);
std::vector<PreferencePair> load_pairs(std::istream& in);

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 0.5;
  int steps = 50;
};

// -log sigmoid(beta * [(log pi(win|prefix) - log ref(win|prefix))
//                    - (log pi(lose|prefix) - log ref(lose|prefix))]).
// Both conditionals are single-token lookups at the pair's prefix. A
// zero-probability win or lose token is an error.
double dpo_loss(const LanguageModel& policy, const LanguageModel& reference,
                const PreferencePair& pair, double beta);

struct PairGrad {
  double loss = 0.0;
  double d_win = 0.0;   // dL/dz[win] on the policy's context row
  double d_lose = 0.0;  // dL/dz[lose]; all other coordinates are zero
};
PairGrad dpo_pair_grad(const LanguageModel& policy, const LanguageModel& reference,
                       const PreferencePair& pair, double beta);

// One full-batch gradient step on the policy's logit rows; the reference is
// read-only. Returns the pre-update mean pair loss.
double dpo_step(LanguageModel& policy, const LanguageModel& reference,
                const std::vector<PreferencePair>& pairs, const DpoConfig& cfg);

// Converts the SFT model to log-linear form, freezes a copy as the
// reference, and runs cfg.steps full-batch updates. With zero steps or a
// zero learning rate the returned policy scores exactly like the input.
LanguageModel dpo_fit(const LanguageModel& sft_model, const std::vector<PreferencePair>& pairs,
                      const DpoConfig& cfg, LossTrace* trace = nullptr);

void save_loss_trace(const LossTrace& trace, std::ostream& out);

}  // namespace kvleak
