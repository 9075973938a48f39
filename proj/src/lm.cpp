#include "kvleak/lm.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "kvleak/util.hpp"

namespace kvleak {

static Distribution softmax(const std::vector<double>& z) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v);
  Distribution p(z.size(), 0.0);
  if (!std::isfinite(m)) {
    // A row of all -inf cannot arise from log of a distribution; treat as
    // uniform rather than dividing by zero.
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(z.size()));
    return p;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

LanguageModel LanguageModel::make_uniform(int vocab_size, std::uint64_t vocab_hash) {
  if (vocab_size < 2) throw Error(ErrKind::Invalid, "vocab_size must be >= 2");
  LanguageModel m;
  m.kind_ = ModelKind::Uniform;
  m.vocab_size_ = vocab_size;
  m.vocab_hash_ = vocab_hash;
  return m;
}

LanguageModel LanguageModel::make_ngram(int order, double add_k, int vocab_size,
                                        std::uint64_t vocab_hash) {
  if (vocab_size < 2) throw Error(ErrKind::Invalid, "vocab_size must be >= 2");
  if (order < 0) throw Error(ErrKind::Invalid, "order must be >= 0");
  if (add_k < 0) throw Error(ErrKind::Invalid, "add_k must be >= 0");
  LanguageModel m;
  m.kind_ = ModelKind::Ngram;
  m.order_ = order;
  m.add_k_ = add_k;
  m.vocab_size_ = vocab_size;
  m.vocab_hash_ = vocab_hash;
  m.tables_.resize(static_cast<std::size_t>(order) + 1);
  return m;
}

LanguageModel LanguageModel::make_loglinear(int order, const LanguageModel& backbone) {
  if (order < 0) throw Error(ErrKind::Invalid, "order must be >= 0");
  LanguageModel m;
  m.kind_ = ModelKind::Loglinear;
  m.order_ = order;
  m.vocab_size_ = backbone.vocab_size();
  m.vocab_hash_ = backbone.vocab_hash();
  m.add_k_ = backbone.add_k();
  m.backbone_ = std::make_shared<const LanguageModel>(backbone);
  return m;
}

ContextKey LanguageModel::context_key(const TokenSeq& context) const {
  std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(order_), context.size());
  return ContextKey(context.end() - static_cast<std::ptrdiff_t>(len), context.end());
}

Distribution LanguageModel::uniform_dist() const {
  return Distribution(static_cast<std::size_t>(vocab_size_),
                      1.0 / static_cast<double>(vocab_size_));
}

Distribution LanguageModel::ngram_dist(const TokenSeq& context) const {
  int maxord = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(order_),
                                                      context.size()));
  for (int ord = maxord; ord >= 0; --ord) {
    const auto& table = tables_[static_cast<std::size_t>(ord)];
    ContextKey key(context.end() - ord, context.end());
    auto it = table.find(key);
    if (it == table.end()) continue;
    const CountRow& row = it->second;
    double denom = static_cast<double>(row.total) + add_k_ * vocab_size_;
    Distribution d(static_cast<std::size_t>(vocab_size_),
                   add_k_ > 0 ? add_k_ / denom : 0.0);
    for (const auto& [tok, cnt] : row.counts)
      d[static_cast<std::size_t>(tok)] = (static_cast<double>(cnt) + add_k_) / denom;
    return d;
  }
  return uniform_dist();
}

Distribution LanguageModel::next_dist(const TokenSeq& context) const {
  switch (kind_) {
    case ModelKind::Uniform:
      return uniform_dist();
    case ModelKind::Ngram:
      return ngram_dist(context);
    case ModelKind::Loglinear: {
      auto it = rows_.find(context_key(context));
      if (it != rows_.end()) return softmax(it->second);
      if (backbone_) return backbone_->next_dist(context);
      return uniform_dist();
    }
  }
  throw Error(ErrKind::Invalid, "unreachable model kind");
}

int LanguageModel::rank_token(const TokenSeq& context, TokenId token) const {
  if (token < 0 || token >= vocab_size_)
    throw Error(ErrKind::Invalid, "rank_token: token id out of range");
  Distribution d = next_dist(context);
  double p = d[static_cast<std::size_t>(token)];
  int rank = 1;
  for (TokenId v = 0; v < vocab_size_; ++v) {
    if (v == token) continue;
    double q = d[static_cast<std::size_t>(v)];
    if (q > p || (q == p && v < token)) ++rank;
  }
  return rank;
}

TokenId LanguageModel::greedy_next(const TokenSeq& context) const {
  Distribution d = next_dist(context);
  TokenId best = 0;
  for (TokenId v = 1; v < vocab_size_; ++v)
    if (d[static_cast<std::size_t>(v)] > d[static_cast<std::size_t>(best)]) best = v;
  return best;
}

std::vector<TokenId> LanguageModel::top_k(const TokenSeq& context, int k,
                                          const TokenIdSet& exclude) const {
  if (k < 0) throw Error(ErrKind::Invalid, "top_k: k must be >= 0");
  Distribution d = next_dist(context);
  std::vector<TokenId> ids;
  ids.reserve(static_cast<std::size_t>(vocab_size_));
  for (TokenId v = 0; v < vocab_size_; ++v)
    if (!exclude.count(v)) ids.push_back(v);
  std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    double pa = d[static_cast<std::size_t>(a)];
    double pb = d[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  if (ids.size() > static_cast<std::size_t>(k)) ids.resize(static_cast<std::size_t>(k));
  return ids;
}

TokenId LanguageModel::low_prob_token(const TokenSeq& context, const TokenIdSet& exclude) const {
  Distribution d = next_dist(context);
  TokenId best = -1;
  for (TokenId v = 0; v < vocab_size_; ++v) {
    if (exclude.count(v)) continue;
    if (best < 0 || d[static_cast<std::size_t>(v)] < d[static_cast<std::size_t>(best)]) best = v;
  }
  if (best < 0) throw Error(ErrKind::Invalid, "low_prob_token: vocabulary exhausted");
  return best;
}

void LanguageModel::observe(const TokenSeq& seq) {
  if (kind_ != ModelKind::Ngram)
    throw Error(ErrKind::Invalid, "observe: model is not an n-gram");
  for (std::size_t t = 0; t < seq.size(); ++t) {
    TokenId target = seq[t];
    if (target < 0 || target >= vocab_size_)
      throw Error(ErrKind::Invalid, "observe: token id out of range");
    std::size_t maxord = std::min<std::size_t>(static_cast<std::size_t>(order_), t);
    for (std::size_t ord = 0; ord <= maxord; ++ord) {
      ContextKey key(seq.begin() + static_cast<std::ptrdiff_t>(t - ord),
                     seq.begin() + static_cast<std::ptrdiff_t>(t));
      CountRow& row = tables_[ord][key];
      ++row.counts[target];
      ++row.total;
    }
  }
}

const std::map<ContextKey, CountRow>& LanguageModel::count_table(int ord) const {
  if (kind_ != ModelKind::Ngram || ord < 0 || ord > order_)
    throw Error(ErrKind::Invalid, "count_table: bad order or kind");
  return tables_[static_cast<std::size_t>(ord)];
}

bool LanguageModel::has_row(const ContextKey& key) const { return rows_.count(key) != 0; }

std::vector<double>& LanguageModel::row(const ContextKey& key) {
  if (kind_ != ModelKind::Loglinear)
    throw Error(ErrKind::Invalid, "row: model is not log-linear");
  auto it = rows_.find(key);
  if (it == rows_.end()) {
    Distribution d = backbone_ ? backbone_->next_dist(key) : uniform_dist();
    std::vector<double> z(static_cast<std::size_t>(vocab_size_));
    for (std::size_t v = 0; v < z.size(); ++v) z[v] = std::log(d[v]);
    it = rows_.emplace(key, std::move(z)).first;
  }
  return it->second;
}

LanguageModel to_loglinear(const LanguageModel& model) {
  if (model.kind_ == ModelKind::Loglinear) return model;
  LanguageModel out;
  out.kind_ = ModelKind::Loglinear;
  out.order_ = model.order_;
  out.vocab_size_ = model.vocab_size_;
  out.vocab_hash_ = model.vocab_hash_;
  out.add_k_ = model.add_k_;
  out.backbone_ = std::make_shared<const LanguageModel>(model);
  if (model.kind_ == ModelKind::Ngram) {
    for (int ord = 0; ord <= model.order_; ++ord) {
      for (const auto& [key, crow] : model.tables_[static_cast<std::size_t>(ord)]) {
        Distribution d = model.next_dist(key);
        std::vector<double> z(d.size());
        for (std::size_t v = 0; v < d.size(); ++v) z[v] = std::log(d[v]);
        out.rows_.emplace(key, std::move(z));
      }
    }
  }
  return out;
}

// ---- serialization ----------------------------------------------------

static const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Uniform: return "uniform";
    case ModelKind::Ngram: return "ngram";
    case ModelKind::Loglinear: return "loglinear";
  }
  return "?";
}

static ModelKind kind_from(const std::string& s) {
  if (s == "uniform") return ModelKind::Uniform;
  if (s == "ngram") return ModelKind::Ngram;
  if (s == "loglinear") return ModelKind::Loglinear;
  throw Error(ErrKind::Parse, "unknown model kind: '" + s + "'");
}

void LanguageModel::save(std::ostream& out) const {
  out << "kvleak-model 1\n";
  out << "kind " << kind_name(kind_) << '\n';
  out << "order " << order_ << '\n';
  out << "vocab_size " << vocab_size_ << '\n';
  out << "vocab_hash " << vocab_hash_ << '\n';
  out << "add_k " << fmt_hex(add_k_) << '\n';
  if (kind_ == ModelKind::Ngram) {
    out << "tables " << tables_.size() << '\n';
    for (std::size_t ord = 0; ord < tables_.size(); ++ord) {
      out << "table " << ord << ' ' << tables_[ord].size() << '\n';
      for (const auto& [key, row] : tables_[ord]) {
        out << "ctx " << key.size();
        for (TokenId t : key) out << ' ' << t;
        out << " : " << row.counts.size();
        for (const auto& [tok, cnt] : row.counts) out << ' ' << tok << ' ' << cnt;
        out << '\n';
      }
    }
  } else if (kind_ == ModelKind::Loglinear) {
    out << "rows " << rows_.size() << '\n';
    for (const auto& [key, z] : rows_) {
      out << "row " << key.size();
      for (TokenId t : key) out << ' ' << t;
      out << " :";
      for (double v : z) out << ' ' << fmt_hex(v);
      out << '\n';
    }
    out << "backbone_begin\n";
    if (backbone_) backbone_->save(out);
    else out << "none\n";
    out << "backbone_end\n";
  }
  out << "end\n";
}

namespace {

std::string next_tok(std::istream& in) {
  std::string s;
  if (!(in >> s)) throw Error(ErrKind::Parse, "model file truncated");
  return s;
}

void expect_tok(std::istream& in, const std::string& want) {
  std::string got = next_tok(in);
  if (got != want)
    throw Error(ErrKind::Parse, "model file: expected '" + want + "', got '" + got + "'");
}

std::int64_t next_int(std::istream& in) {
  std::string s = next_tok(in);
  try {
    return std::stoll(s);
  } catch (const std::exception&) {
    throw Error(ErrKind::Parse, "model file: expected integer, got '" + s + "'");
  }
}

std::uint64_t next_u64(std::istream& in) {
  std::string s = next_tok(in);
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw Error(ErrKind::Parse, "model file: expected integer, got '" + s + "'");
  }
}

}  // namespace

LanguageModel LanguageModel::load_one(std::istream& in) {
  expect_tok(in, "kvleak-model");
  expect_tok(in, "1");
  expect_tok(in, "kind");
  ModelKind kind = kind_from(next_tok(in));
  expect_tok(in, "order");
  int order = static_cast<int>(next_int(in));
  expect_tok(in, "vocab_size");
  int vocab_size = static_cast<int>(next_int(in));
  expect_tok(in, "vocab_hash");
  std::uint64_t vocab_hash = next_u64(in);
  expect_tok(in, "add_k");
  double add_k = parse_double(next_tok(in));

  LanguageModel m;
  switch (kind) {
    case ModelKind::Uniform:
      m = make_uniform(vocab_size, vocab_hash);
      m.order_ = order;
      break;
    case ModelKind::Ngram: {
      m = make_ngram(order, add_k, vocab_size, vocab_hash);
      expect_tok(in, "tables");
      std::size_t ntables = static_cast<std::size_t>(next_int(in));
      if (ntables != static_cast<std::size_t>(order) + 1)
        throw Error(ErrKind::Parse, "model file: table count does not match order");
      for (std::size_t ti = 0; ti < ntables; ++ti) {
        expect_tok(in, "table");
        std::size_t ord = static_cast<std::size_t>(next_int(in));
        if (ord >= ntables) throw Error(ErrKind::Parse, "model file: bad table order");
        std::size_t nkeys = static_cast<std::size_t>(next_int(in));
        for (std::size_t ki = 0; ki < nkeys; ++ki) {
          expect_tok(in, "ctx");
          std::size_t klen = static_cast<std::size_t>(next_int(in));
          if (klen != ord) throw Error(ErrKind::Parse, "model file: context length mismatch");
          ContextKey key(klen);
          for (auto& t : key) t = static_cast<TokenId>(next_int(in));
          expect_tok(in, ":");
          std::size_t npairs = static_cast<std::size_t>(next_int(in));
          CountRow row;
          for (std::size_t pi = 0; pi < npairs; ++pi) {
            TokenId tok = static_cast<TokenId>(next_int(in));
            std::uint64_t cnt = next_u64(in);
            row.counts[tok] = cnt;
            row.total += cnt;
          }
          m.tables_[ord].emplace(std::move(key), std::move(row));
        }
      }
      break;
    }
    case ModelKind::Loglinear: {
      m.kind_ = ModelKind::Loglinear;
      m.order_ = order;
      m.vocab_size_ = vocab_size;
      m.vocab_hash_ = vocab_hash;
      m.add_k_ = add_k;
      expect_tok(in, "rows");
      std::size_t nrows = static_cast<std::size_t>(next_int(in));
      for (std::size_t ri = 0; ri < nrows; ++ri) {
        expect_tok(in, "row");
        std::size_t klen = static_cast<std::size_t>(next_int(in));
        ContextKey key(klen);
        for (auto& t : key) t = static_cast<TokenId>(next_int(in));
        expect_tok(in, ":");
        std::vector<double> z(static_cast<std::size_t>(vocab_size));
        for (auto& v : z) v = parse_double(next_tok(in));
        m.rows_.emplace(std::move(key), std::move(z));
      }
      expect_tok(in, "backbone_begin");
      LanguageModel backbone = load_one(in);
      expect_tok(in, "backbone_end");
      if (backbone.vocab_size() != vocab_size)
        throw Error(ErrKind::Parse, "model file: backbone shape mismatch");
      m.backbone_ = std::make_shared<const LanguageModel>(std::move(backbone));
      break;
    }
  }
  expect_tok(in, "end");
  return m;
}

LanguageModel LanguageModel::load(std::istream& in,
                                  std::optional<std::uint64_t> expect_vocab_hash) {
  LanguageModel m = load_one(in);
  if (expect_vocab_hash && m.vocab_hash() != *expect_vocab_hash)
    throw Error(ErrKind::VocabMismatch,
                "model was built against a different vocabulary");
  return m;
}

std::string LanguageModel::serialized() const {
  std::ostringstream os;
  save(os);
  return os.str();
}

}  // namespace kvleak
