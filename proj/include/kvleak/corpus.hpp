#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace kvleak {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Token inventory shared by corpora, models, and the serving simulator.
// Ids are dense. Id 0 is the end-of-query marker and id 1 the unknown-word
// bucket; both are reserved and always present. Id order doubles as the
// on-disk order, so equal inputs serialize byte-identically.
class Vocabulary {
 public:
  static constexpr TokenId kEosId = 0;
  static constexpr TokenId kUnkId = 1;
  static const std::string& eos_surface();
  static const std::string& unk_surface();

  Vocabulary();
  // Full surface list in id order, reserved tokens included at 0 and 1.
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& surface(TokenId id) const;
  TokenId id_of(const std::string& surface) const;  // kUnkId when absent
  bool contains(const std::string& surface) const;
  std::uint64_t hash() const { return hash_; }

  void save(std::ostream& out) const;
  static Vocabulary load(std::istream& in);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::uint64_t hash_ = 0;

  void index();
};

enum class Split { Train, Validation, Test };

struct Sample {
  TokenSeq query;     // always ends with Vocabulary::kEosId
  TokenSeq response;  // may be empty
};

struct Corpus {
  std::vector<Sample> samples;
  Vocabulary vocab;
  Split split = Split::Train;
};

// Whitespace split, then leading/trailing ASCII punctuation peeled off into
// single-character tokens. Bytes >= 0x80 are never peeled, so multi-byte
// UTF-8 stays intact.
std::vector<std::string> split_text(const std::string& text);

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const TokenSeq& seq, const Vocabulary& vocab);

// Surfaces ordered by descending frequency, ties broken lexicographically.
// Counts run over queries and responses of the given samples.
Vocabulary build_vocab(const std::vector<std::pair<std::string, std::string>>& samples);

// One record per line: an object with string fields "query" and "response".
// The train overload builds the vocabulary from the file itself; other
// splits map unknown surfaces to kUnkId against the supplied vocabulary.
Corpus load_corpus(const std::string& path, Split split);
Corpus load_corpus(const std::string& path, Split split, const Vocabulary& vocab);

}  // namespace kvleak
