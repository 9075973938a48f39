#include "kvleak/server.hpp"

#include <algorithm>
#include <ostream>
#include <set>

namespace kvleak {

PrefixCache::PrefixCache(std::size_t capacity_tokens)
    : root_(std::make_unique<Node>()), capacity_(capacity_tokens) {}

std::size_t PrefixCache::match_prefix(const TokenSeq& seq) const {
  const Node* node = root_.get();
  std::size_t i = 0;
  while (i < seq.size()) {
    auto it = node->children.find(seq[i]);
    if (it == node->children.end()) break;
    const Node* child = it->second.get();
    std::size_t j = 0;
    while (j < child->edge.size() && i + j < seq.size() && child->edge[j] == seq[i + j]) ++j;
    i += j;
    if (j < child->edge.size()) break;  // diverged or ran out mid-edge
    node = child;
  }
  return i;
}

void PrefixCache::insert(const TokenSeq& seq) {
  if (seq.empty()) return;
  if (capacity_ > 0 && seq.size() > capacity_)
    throw Error(ErrKind::Invalid, "insert: sequence longer than cache capacity");

  ++clock_;
  std::vector<const Node*> path;
  Node* node = root_.get();
  node->last_access = clock_;
  path.push_back(node);
  std::size_t i = 0;
  while (i < seq.size()) {
    auto it = node->children.find(seq[i]);
    if (it == node->children.end()) {
      auto child = std::make_unique<Node>();
      child->edge.assign(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.end());
      child->parent = node;
      child->last_access = clock_;
      token_count_ += child->edge.size();
      path.push_back(child.get());
      node->children.emplace(seq[i], std::move(child));
      break;
    }
    Node* child = it->second.get();
    std::size_t j = 0;
    while (j < child->edge.size() && i + j < seq.size() && child->edge[j] == seq[i + j]) ++j;
    if (j == child->edge.size()) {
      child->last_access = clock_;
      path.push_back(child);
      node = child;
      i += j;
      continue;
    }
    // Fork mid-edge: the first j tokens stay on a refreshed upper node, the
    // remainder keeps the old node (and its recency) below it.
    auto upper = std::make_unique<Node>();
    upper->edge.assign(child->edge.begin(), child->edge.begin() + static_cast<std::ptrdiff_t>(j));
    upper->parent = node;
    upper->last_access = clock_;
    std::unique_ptr<Node> lower = std::move(it->second);
    lower->edge.erase(lower->edge.begin(), lower->edge.begin() + static_cast<std::ptrdiff_t>(j));
    lower->parent = upper.get();
    upper->children.emplace(lower->edge.front(), std::move(lower));
    Node* upper_raw = upper.get();
    it->second = std::move(upper);
    path.push_back(upper_raw);
    i += j;
    if (i < seq.size()) {
      auto fresh = std::make_unique<Node>();
      fresh->edge.assign(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.end());
      fresh->parent = upper_raw;
      fresh->last_access = clock_;
      token_count_ += fresh->edge.size();
      path.push_back(fresh.get());
      upper_raw->children.emplace(fresh->edge.front(), std::move(fresh));
    }
    break;
  }

  if (capacity_ > 0 && token_count_ > capacity_) evict_down_to_capacity(path);
}

void PrefixCache::evict_down_to_capacity(const std::vector<const Node*>& protect) {
  std::set<const Node*> keep(protect.begin(), protect.end());
  while (token_count_ > capacity_) {
    // Least-recently-touched leaf outside the protected path; ties resolve
    // to the first leaf met in DFS order, which is deterministic because
    // children are ordered by token id.
    Node* victim = nullptr;
    std::vector<Node*> stack{root_.get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (n->children.empty() && n != root_.get() && !keep.count(n)) {
        if (!victim || n->last_access < victim->last_access) victim = n;
      }
      for (auto& [tok, child] : n->children) stack.push_back(child.get());
    }
    if (!victim) return;  // only the protected path remains; it fits by precondition
    token_count_ -= victim->edge.size();
    victim->parent->children.erase(victim->edge.front());
  }
}

double simulate_ttft(const TtftParams& params, std::size_t total_len, std::size_t matched_len,
                     Rng& rng) {
  if (matched_len > total_len)
    throw Error(ErrKind::Invalid, "simulate_ttft: matched_len exceeds total_len");
  double t = params.alpha * static_cast<double>(total_len - matched_len) + params.base;
  if (params.noise_sigma > 0) t += rng.normal(0.0, params.noise_sigma);
  return std::max(0.0, t);
}

int ResponseOrder::position_of(int arrival_index) const {
  for (const auto& e : entries)
    if (e.request.arrival_index == arrival_index) return e.position;
  throw Error(ErrKind::Invalid, "position_of: arrival index not in order");
}

ServerSim::ServerSim(const ServerConfig& cfg)
    : cfg_(cfg), cache_(cfg.capacity_tokens), rng_(cfg.seed) {}

void ServerSim::note_entry(const TokenSeq& seq, const std::string& tenant) {
  auto [it, inserted] = entries_.try_emplace(seq, EntryMeta{tenant, cache_.clock()});
  if (!inserted) it->second.last_access = cache_.clock();
}

void ServerSim::admit_victim(const TokenSeq& query, const std::string& tenant) {
  if (query.empty()) throw Error(ErrKind::Invalid, "admit_victim: empty query");
  cache_.insert(query);
  note_entry(query, tenant);
}

ResponseOrder ServerSim::process_batch(const std::vector<Request>& batch) {
  if (batch.empty()) throw Error(ErrKind::Invalid, "process_batch: empty batch");
  std::set<int> arrivals;
  for (const auto& r : batch)
    if (!arrivals.insert(r.arrival_index).second)
      throw Error(ErrKind::Invalid, "process_batch: duplicate arrival index");

  ResponseOrder order;
  order.entries.reserve(batch.size());

  std::vector<std::size_t> waiting(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) waiting[i] = i;

  std::vector<std::size_t> snapshot_match;
  if (cfg_.mode == ScheduleMode::Snapshot) {
    snapshot_match.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
      snapshot_match[i] = cache_.match_prefix(batch[i].tokens);
  }

  int position = 0;
  while (!waiting.empty()) {
    std::size_t best = 0;
    std::size_t best_match = 0;
    for (std::size_t w = 0; w < waiting.size(); ++w) {
      const Request& r = batch[waiting[w]];
      std::size_t m = cfg_.mode == ScheduleMode::Snapshot ? snapshot_match[waiting[w]]
                                                          : cache_.match_prefix(r.tokens);
      bool better = w == 0 || m > best_match ||
                    (m == best_match &&
                     r.arrival_index < batch[waiting[best]].arrival_index);
      if (better) {
        best = w;
        best_match = m;
      }
    }
    const Request& chosen = batch[waiting[best]];
    ScheduledRequest sr;
    sr.request = chosen;
    sr.position = position++;
    sr.matched_len = best_match;
    sr.ttft = simulate_ttft(cfg_.ttft, chosen.tokens.size(), best_match, rng_);
    order.entries.push_back(std::move(sr));
    if (!chosen.tokens.empty()) {
      cache_.insert(chosen.tokens);
      note_entry(chosen.tokens, chosen.tenant);
    }
    waiting.erase(waiting.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return order;
}

void ServerSim::dump_cache(std::ostream& out) const {
  for (const auto& [seq, meta] : entries_) {
    if (cache_.match_prefix(seq) != seq.size()) continue;  // partially evicted
    out << "{\"last_access\":" << meta.last_access << ",\"tenant\":\""
        << json_escape(meta.tenant) << "\",\"token_ids\":[";
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ',';
      out << seq[i];
    }
    out << "]}\n";
  }
}

void write_schedule_csv(const ResponseOrder& order, std::ostream& out) {
  out << "position,arrival_index,matched_len,ttft\n";
  for (const auto& e : order.entries)
    out << e.position << ',' << e.request.arrival_index << ',' << e.matched_len << ','
        << fmt_g6(e.ttft) << '\n';
}

}  // namespace kvleak
