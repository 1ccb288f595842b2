#include "oracle/reference_match.hpp"

#include <algorithm>

namespace kvsched::oracle {

RefTree::RefTree(std::vector<PrefixTree::NodeSnapshot> nodes) : nodes_(std::move(nodes)) {
  for (size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id] = i;
  for (auto& n : nodes_) {
    if (n.id != nodes_.front().id) children_[n.parent_id].push_back(n.id);
  }
}

RefMatch RefTree::match(const TokenSeq& prompt) const {
  RefMatch r;
  NodeId cur = root_id();
  size_t pos = 0;
  std::vector<NodeId> path;
  while (pos < prompt.size()) {
    NodeId next = 0;
    bool found = false;
    auto it = children_.find(cur);
    if (it != children_.end()) {
      for (NodeId c : it->second) {
        const auto& cn = node(c);
        if (!cn.edge.empty() && cn.edge.front() == prompt[pos]) {
          next = c;
          found = true;
          break;
        }
      }
    }
    if (!found) break;
    const auto& cn = node(next);
    size_t m = 0;
    while (m < cn.edge.size() && pos + m < prompt.size() && cn.edge[m] == prompt[pos + m]) ++m;
    if (m == 0) break;
    r.spans.emplace_back(next, static_cast<int64_t>(m));
    pos += m;
    cur = next;
    if (m < cn.edge.size()) break;
  }
  r.matched_len = static_cast<int64_t>(pos);

  // Per-GPU contiguous extents: token by token from the root, a GPU keeps
  // accumulating only while every span so far is cached on it.
  std::set<GpuId> all_gpus;
  for (auto& [id, len] : r.spans) {
    for (GpuId g : node(id).caching_gpus) all_gpus.insert(g);
  }
  for (GpuId g : all_gpus) {
    int64_t acc = 0;
    for (auto& [id, len] : r.spans) {
      const auto& cg = node(id).caching_gpus;
      if (std::find(cg.begin(), cg.end(), g) == cg.end()) break;
      acc += len;
    }
    if (acc > 0) r.per_gpu_matched_len[g] = acc;
  }
  for (auto& [id, len] : r.spans) {
    if (!node(id).caching_gpus.empty()) r.cached_len += len;
  }
  return r;
}

int64_t RefTree::cached_tokens(GpuId gpu) const {
  int64_t total = 0;
  for (auto& n : nodes_) {
    const auto& cg = n.caching_gpus;
    if (std::find(cg.begin(), cg.end(), gpu) != cg.end()) {
      total += static_cast<int64_t>(n.edge.size());
    }
  }
  return total;
}

int64_t RefTree::hits_in_window(NodeId id, GpuId gpu, SimTime now, SimTime horizon_ms) const {
  const auto& n = node(id);
  auto it = n.hits.find(gpu);
  if (it == n.hits.end()) return 0;
  int64_t count = 0;
  for (SimTime t : it->second) {
    if (t >= now - horizon_ms && t <= now) ++count;
  }
  return count;
}

int64_t RefTree::hits_in_window_all(NodeId id, SimTime now, SimTime horizon_ms) const {
  int64_t count = 0;
  for (auto& [g, stamps] : node(id).hits) {
    for (SimTime t : stamps) {
      if (t >= now - horizon_ms && t <= now) ++count;
    }
  }
  return count;
}

std::vector<std::pair<NodeId, int64_t>> RefTree::plan_eviction(
    GpuId gpu, int64_t tokens_needed, const std::set<NodeId>& protected_ids,
    bool allow_partial_tail) const {
  std::vector<std::pair<NodeId, int64_t>> plan;
  if (tokens_needed <= 0) return plan;
  std::set<NodeId> planned;
  int64_t freed = 0;
  auto cached = [&](NodeId id) {
    const auto& cg = node(id).caching_gpus;
    return std::find(cg.begin(), cg.end(), gpu) != cg.end();
  };
  while (freed < tokens_needed) {
    // Candidates: cached on gpu, not yet planned, not pinned/protected, and
    // with no unplanned cached-on-gpu child.
    bool have = false;
    SimTime best_la = 0;
    NodeId best = 0;
    for (auto& n : nodes_) {
      if (n.id == root_id() || planned.count(n.id) || !cached(n.id)) continue;
      if (n.pin_count > 0 || protected_ids.count(n.id)) continue;
      bool blocked = false;
      auto it = children_.find(n.id);
      if (it != children_.end()) {
        for (NodeId c : it->second) {
          if (cached(c) && !planned.count(c)) {
            blocked = true;
            break;
          }
        }
      }
      if (blocked) continue;
      auto la_it = n.last_access.find(gpu);
      SimTime la = la_it == n.last_access.end() ? 0 : la_it->second;
      if (!have || la < best_la || (la == best_la && n.id < best)) {
        have = true;
        best_la = la;
        best = n.id;
      }
    }
    if (!have) break;
    int64_t sz = static_cast<int64_t>(node(best).edge.size());
    int64_t remaining = tokens_needed - freed;
    if (allow_partial_tail && sz > remaining) {
      plan.emplace_back(best, remaining);
      freed += remaining;
      break;
    }
    plan.emplace_back(best, sz);
    freed += sz;
    planned.insert(best);
  }
  return plan;
}

}  // namespace kvsched::oracle
