#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <unordered_set>
#include <vector>

#include "kvleak/corpus.hpp"

namespace kvleak {

// probs[token] over the whole vocabulary; entries are >= 0 and sum to 1.
using Distribution = std::vector<double>;
using TokenIdSet = std::unordered_set<TokenId>;
// The conditioning suffix a model actually looks at: the last
// min(order, len(context)) tokens.
using ContextKey = TokenSeq;

enum class ModelKind { Uniform, Ngram, Loglinear };

struct CountRow {
  std::map<TokenId, std::uint64_t> counts;
  std::uint64_t total = 0;
};

// One model type covers the three families used here:
//  - Uniform: 1/|V| everywhere; the untrained baseline.
//  - Ngram: add-k smoothed counts with context-level backoff. Unseen
//    contexts fall back to shorter suffixes, bottoming out at the unigram
//    table and finally at uniform.
//  - Loglinear: one learnable logit row per observed context key, softmax
//    per row. Context keys without a row fall back to a frozen backbone
//    model, so an untouched loglinear conversion scores exactly like its
//    backbone.
class LanguageModel {
 public:
  LanguageModel() = default;

  static LanguageModel make_uniform(int vocab_size, std::uint64_t vocab_hash);
  static LanguageModel make_ngram(int order, double add_k, int vocab_size,
                                  std::uint64_t vocab_hash);
  // Empty log-linear model: no rows yet, every context scored by the frozen
  // backbone until a row is materialized.
  static LanguageModel make_loglinear(int order, const LanguageModel& backbone);

  ModelKind kind() const { return kind_; }
  int order() const { return order_; }
  int vocab_size() const { return vocab_size_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }
  double add_k() const { return add_k_; }

  Distribution next_dist(const TokenSeq& context) const;

  // Rank 1 is the most probable token; probability ties break toward the
  // lower id, so ranks are a permutation of 1..|V| for every context.
  int rank_token(const TokenSeq& context, TokenId token) const;
  TokenId greedy_next(const TokenSeq& context) const;
  // Up to k tokens outside `exclude`, ordered by descending probability,
  // ties by ascending id. Shorter when the vocabulary runs out.
  std::vector<TokenId> top_k(const TokenSeq& context, int k,
                             const TokenIdSet& exclude = {}) const;
  // Lowest-probability token outside `exclude`; throws when exhausted.
  TokenId low_prob_token(const TokenSeq& context, const TokenIdSet& exclude = {}) const;

  ContextKey context_key(const TokenSeq& context) const;

  // n-gram fitting surface: adds one count per position for every context
  // length 0..order.
  void observe(const TokenSeq& seq);
  const std::map<ContextKey, CountRow>& count_table(int ord) const;

  // Log-linear surface. row() materializes an absent row from the backbone
  // distribution, which leaves the model's scores unchanged until the row
  // is actually edited.
  bool has_row(const ContextKey& key) const;
  std::vector<double>& row(const ContextKey& key);
  const std::map<ContextKey, std::vector<double>>& rows() const { return rows_; }
  const LanguageModel* backbone() const { return backbone_.get(); }

  void save(std::ostream& out) const;
  // When expect_vocab_hash is set, a stored hash that differs is an error:
  // token ids would silently mean different surfaces otherwise.
  static LanguageModel load(std::istream& in,
                            std::optional<std::uint64_t> expect_vocab_hash = std::nullopt);
  std::string serialized() const;

  friend LanguageModel to_loglinear(const LanguageModel& model);

 private:
  ModelKind kind_ = ModelKind::Uniform;
  int order_ = 0;
  int vocab_size_ = 0;
  std::uint64_t vocab_hash_ = 0;
  double add_k_ = 0.0;
  std::vector<std::map<ContextKey, CountRow>> tables_;    // Ngram; index = context length
  std::map<ContextKey, std::vector<double>> rows_;        // Loglinear
  std::shared_ptr<const LanguageModel> backbone_;         // Loglinear fallback, frozen

  Distribution ngram_dist(const TokenSeq& context) const;
  Distribution uniform_dist() const;
  static LanguageModel load_one(std::istream& in);
};

// Freezes `model` as the backbone and seeds one logit row (log of the
// smoothed probabilities) per context observed by it, so the conversion
// scores identically to the input until trained further.
LanguageModel to_loglinear(const LanguageModel& model);

}  // namespace kvleak
