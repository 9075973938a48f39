#include "kvleak/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "kvleak/util.hpp"

namespace kvleak {

const std::string& Vocabulary::eos_surface() {
  static const std::string s = "<eos>";
  return s;
}

const std::string& Vocabulary::unk_surface() {
  static const std::string s = "<unk>";
  return s;
}

Vocabulary::Vocabulary() : tokens_{eos_surface(), unk_surface()} { index(); }

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_[kEosId] != eos_surface() || tokens_[kUnkId] != unk_surface())
    throw Error(ErrKind::Invalid, "vocabulary must start with the reserved tokens");
  index();
}

void Vocabulary::index() {
  ids_.clear();
  ids_.reserve(tokens_.size());
  std::string blob;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const std::string& t = tokens_[i];
    if (t.empty()) throw Error(ErrKind::Invalid, "vocabulary token must be non-empty");
    if (!ids_.emplace(t, static_cast<TokenId>(i)).second)
      throw Error(ErrKind::Invalid, "duplicate vocabulary token: '" + t + "'");
    blob += t;
    blob += '\n';
  }
  hash_ = fnv1a64(blob);
}

const std::string& Vocabulary::surface(TokenId id) const {
  if (id < 0 || id >= size()) throw Error(ErrKind::Invalid, "token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id_of(const std::string& surface) const {
  auto it = ids_.find(surface);
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& surface) const {
  return ids_.count(surface) != 0;
}

void Vocabulary::save(std::ostream& out) const {
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    tokens.push_back(line);
  }
  if (tokens.empty()) throw Error(ErrKind::Parse, "empty vocabulary file");
  return Vocabulary(std::move(tokens));
}

static bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
static bool is_space(unsigned char c) { return std::isspace(c) != 0; }

std::vector<std::string> split_text(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < n && !is_space(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      std::size_t b = i;
      std::size_t e = j;
      while (b < e && is_ascii_punct(static_cast<unsigned char>(text[b]))) {
        out.emplace_back(1, text[b]);
        ++b;
      }
      std::size_t core_end = e;
      while (core_end > b && is_ascii_punct(static_cast<unsigned char>(text[core_end - 1])))
        --core_end;
      if (core_end > b) out.push_back(text.substr(b, core_end - b));
      for (std::size_t k = core_end; k < e; ++k) out.emplace_back(1, text[k]);
    }
    i = j;
  }
  return out;
}

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab) {
  TokenSeq ids;
  for (const auto& w : split_text(text)) ids.push_back(vocab.id_of(w));
  return ids;
}

std::string detokenize(const TokenSeq& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += vocab.surface(seq[i]);
  }
  return out;
}

Vocabulary build_vocab(const std::vector<std::pair<std::string, std::string>>& samples) {
  if (samples.empty()) throw Error(ErrKind::Invalid, "build_vocab: no samples");
  std::map<std::string, std::uint64_t> freq;
  auto count = [&](const std::string& text) {
    for (auto& w : split_text(text)) {
      if (w == Vocabulary::eos_surface() || w == Vocabulary::unk_surface()) continue;
      ++freq[w];
    }
  };
  for (const auto& [q, r] : samples) {
    count(q);
    count(r);
  }
  std::vector<std::pair<std::string, std::uint64_t>> order(freq.begin(), freq.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens{Vocabulary::eos_surface(), Vocabulary::unk_surface()};
  tokens.reserve(order.size() + 2);
  for (auto& [w, c] : order) tokens.push_back(w);
  return Vocabulary(std::move(tokens));
}

namespace {

struct RawRecord {
  std::string query;
  std::string response;
};

std::vector<RawRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrKind::Io, "cannot open corpus file: " + path);
  std::vector<RawRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool blank = line.find_first_not_of(" \t") == std::string::npos;
    if (blank) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrKind::Parse,
                  path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!rec.is_object())
      throw Error(ErrKind::Parse, path + " line " + std::to_string(lineno) + ": record is not an object");
    for (const char* field : {"query", "response"}) {
      if (!rec.contains(field) || !rec[field].is_string())
        throw Error(ErrKind::Parse, path + " line " + std::to_string(lineno) +
                                        ": missing string field \"" + field + "\"");
    }
    RawRecord raw{rec["query"].get<std::string>(), rec["response"].get<std::string>()};
    if (split_text(raw.query).empty())
      throw Error(ErrKind::Parse, path + " line " + std::to_string(lineno) + ": empty query");
    records.push_back(std::move(raw));
  }
  if (records.empty()) throw Error(ErrKind::Parse, "empty corpus: " + path);
  return records;
}

Corpus assemble(const std::vector<RawRecord>& records, Split split, Vocabulary vocab) {
  Corpus corpus;
  corpus.split = split;
  corpus.vocab = std::move(vocab);
  corpus.samples.reserve(records.size());
  for (const auto& rec : records) {
    Sample s;
    s.query = tokenize(rec.query, corpus.vocab);
    s.query.push_back(Vocabulary::kEosId);
    s.response = tokenize(rec.response, corpus.vocab);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace

Corpus load_corpus(const std::string& path, Split split) {
  if (split != Split::Train)
    throw Error(ErrKind::Invalid, "non-train split needs an explicit vocabulary");
  auto records = read_records(path);
  std::vector<std::pair<std::string, std::string>> raw;
  raw.reserve(records.size());
  for (auto& r : records) raw.emplace_back(r.query, r.response);
  return assemble(records, split, build_vocab(raw));
}

Corpus load_corpus(const std::string& path, Split split, const Vocabulary& vocab) {
  return assemble(read_records(path), split, vocab);
}

}  // namespace kvleak
