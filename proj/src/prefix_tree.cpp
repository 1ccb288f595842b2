#include "kvsched/prefix_tree.hpp"

#include <algorithm>
#include <sstream>
#include <tuple>

namespace kvsched {

PrefixTree::PrefixTree() {
  root_ = std::make_unique<TreeNode>();
  root_->id = next_id_++;
}

bool PrefixTree::is_lru_leaf(const TreeNode* node, GpuId gpu) const {
  if (!node->cached_on(gpu)) return false;
  auto it = node->cached_child_count.find(gpu);
  return it == node->cached_child_count.end() || it->second == 0;
}

namespace {
SimTime last_access_or_zero(const TreeNode* node, GpuId gpu) {
  auto it = node->last_access.find(gpu);
  return it == node->last_access.end() ? 0 : it->second;
}
}  // namespace

void PrefixTree::index_insert(TreeNode* node, GpuId gpu) {
  lru_leaves_[gpu].emplace(std::make_pair(last_access_or_zero(node, gpu), node->id), node);
}

void PrefixTree::index_erase(TreeNode* node, GpuId gpu) {
  auto it = lru_leaves_.find(gpu);
  if (it == lru_leaves_.end()) return;
  it->second.erase(std::make_pair(last_access_or_zero(node, gpu), node->id));
}

void PrefixTree::prune_hits(const TreeNode* node, SimTime now, SimTime horizon_ms) const {
  for (auto it = node->hits.begin(); it != node->hits.end();) {
    auto& dq = it->second;
    while (!dq.empty() && dq.front() < now - horizon_ms) dq.pop_front();
    if (dq.empty()) it = node->hits.erase(it); else ++it;
  }
}

void PrefixTree::record_hit(TreeNode* node, GpuId gpu, SimTime now) {
  node->hits[gpu].push_back(now);
  if (is_lru_leaf(node, gpu)) index_erase(node, gpu);
  SimTime& la = node->last_access[gpu];
  if (now > la) la = now;
  if (is_lru_leaf(node, gpu)) index_insert(node, gpu);
}

void PrefixTree::set_cached(TreeNode* node, GpuId gpu) {
  if (node == root_.get() || node->cached_on(gpu)) return;
  node->caching_gpus.insert(gpu);
  cached_tokens_[gpu] += node->token_count();
  if (is_lru_leaf(node, gpu)) index_insert(node, gpu);
  TreeNode* p = node->parent;
  if (p) {
    if (is_lru_leaf(p, gpu)) index_erase(p, gpu);
    p->cached_child_count[gpu] += 1;
  }
}

void PrefixTree::clear_cached(TreeNode* node, GpuId gpu) {
  if (!node->cached_on(gpu)) return;
  if (is_lru_leaf(node, gpu)) index_erase(node, gpu);
  node->caching_gpus.erase(gpu);
  cached_tokens_[gpu] -= node->token_count();
  TreeNode* p = node->parent;
  if (p) {
    int& c = p->cached_child_count[gpu];
    c -= 1;
    if (c < 0) throw SimError("prefix_tree: cached_child_count underflow");
    if (c == 0 && is_lru_leaf(p, gpu)) index_insert(p, gpu);
  }
}

TreeNode* PrefixTree::walk(const TokenSeq& prompt, MatchResult* out) const {
  TreeNode* cur = root_.get();
  size_t pos = 0;
  std::set<GpuId> alive;
  bool first_span = true;
  while (pos < prompt.size()) {
    auto it = cur->children.find(prompt[pos]);
    if (it == cur->children.end()) break;
    TreeNode* child = it->second.get();
    const TokenSeq& edge = child->edge;
    size_t lim = std::min(edge.size(), prompt.size() - pos);
    size_t m = 0;
    while (m < lim && edge[m] == prompt[pos + m]) ++m;
    if (m == 0) break;
    if (out) {
      out->path.push_back({child, static_cast<int64_t>(m)});
      if (first_span) {
        alive = child->caching_gpus;
        first_span = false;
      } else {
        for (auto g = alive.begin(); g != alive.end();) {
          if (!child->cached_on(*g)) g = alive.erase(g); else ++g;
        }
      }
      for (GpuId g : alive) out->per_gpu_matched_len[g] += static_cast<int64_t>(m);
      // cached_len sums every matched span cached somewhere (no contiguity
      // requirement); only the per-GPU extents demand an unbroken chain.
      if (!child->caching_gpus.empty()) out->cached_len += static_cast<int64_t>(m);
    }
    pos += m;
    cur = child;
    if (m < edge.size()) break;  // mismatch or prompt end inside this edge
  }
  if (out) out->matched_len = static_cast<int64_t>(pos);
  return cur;
}

MatchResult PrefixTree::match(const TokenSeq& prompt) const {
  MatchResult r;
  walk(prompt, &r);
  return r;
}

TreeNode* PrefixTree::split_node(TreeNode* node, int64_t prefix_len) {
  if (prefix_len <= 0 || prefix_len >= node->token_count()) {
    throw SimError("prefix_tree: split boundary outside edge");
  }
  auto suffix = std::make_unique<TreeNode>();
  TreeNode* y = suffix.get();
  y->id = next_id_++;
  y->parent = node;
  y->edge.assign(node->edge.begin() + prefix_len, node->edge.end());
  node->edge.resize(prefix_len);

  y->children = std::move(node->children);
  node->children.clear();
  for (auto& [tok, ch] : y->children) ch->parent = y;

  // Metadata duplicates onto both halves; y inherits the leaf role in the
  // per-GPU LRU index, node gains y as its cached child.
  y->caching_gpus = node->caching_gpus;
  y->hits = node->hits;
  y->last_access = node->last_access;
  y->pin_count = node->pin_count;
  y->cached_child_count = std::move(node->cached_child_count);
  node->cached_child_count.clear();
  for (GpuId g : node->caching_gpus) {
    index_erase(node, g);  // no-op unless node was the leaf
    node->cached_child_count[g] = 1;
    if (is_lru_leaf(y, g)) index_insert(y, g);
  }

  node->children.emplace(y->edge.front(), std::move(suffix));
  ++node_count_;
  return y;
}

TreeNode* PrefixTree::ensure_path(const TokenSeq& prompt) {
  TreeNode* cur = root_.get();
  size_t pos = 0;
  while (pos < prompt.size()) {
    auto it = cur->children.find(prompt[pos]);
    if (it == cur->children.end()) {
      auto leaf = std::make_unique<TreeNode>();
      TreeNode* l = leaf.get();
      l->id = next_id_++;
      l->parent = cur;
      l->edge.assign(prompt.begin() + pos, prompt.end());
      cur->children.emplace(l->edge.front(), std::move(leaf));
      ++node_count_;
      return l;
    }
    TreeNode* child = it->second.get();
    size_t lim = std::min(child->edge.size(), prompt.size() - pos);
    size_t m = 0;
    while (m < lim && child->edge[m] == prompt[pos + m]) ++m;
    pos += m;
    if (m == child->edge.size()) {
      cur = child;
      continue;
    }
    split_node(child, static_cast<int64_t>(m));
    if (pos == prompt.size()) return child;
    cur = child;
  }
  return cur;
}

InsertResult PrefixTree::insert(const TokenSeq& prompt, GpuId gpu, SimTime now, InsertMode mode) {
  if (prompt.empty()) throw SimError("prefix_tree: insert of empty sequence");
  InsertResult r;
  walk(prompt, &r.pre_insert);
  r.tail = ensure_path(prompt);
  // Bottom-up so cached_child_count is settled before each parent is marked.
  for (TreeNode* n = r.tail; n && n->parent; n = n->parent) {
    if (mode == InsertMode::MarkCached) set_cached(n, gpu);
    record_hit(n, gpu, now);
  }
  return r;
}

int64_t PrefixTree::mark_cached_path(const TokenSeq& prompt, GpuId gpu, SimTime now) {
  if (prompt.empty()) return 0;
  TreeNode* tail = ensure_path(prompt);
  int64_t marked = 0;
  for (TreeNode* n = tail; n && n->parent; n = n->parent) {
    if (!n->cached_on(gpu)) marked += n->token_count();
    set_cached(n, gpu);
    if (is_lru_leaf(n, gpu)) index_erase(n, gpu);
    SimTime& la = n->last_access[gpu];
    if (now > la) la = now;
    if (is_lru_leaf(n, gpu)) index_insert(n, gpu);
  }
  return marked;
}

void PrefixTree::mark_cached_node(TreeNode* node, GpuId gpu, SimTime now) {
  if (node == nullptr || node == root_.get()) return;
  set_cached(node, gpu);
  if (is_lru_leaf(node, gpu)) index_erase(node, gpu);
  SimTime& la = node->last_access[gpu];
  if (now > la) la = now;
  if (is_lru_leaf(node, gpu)) index_insert(node, gpu);
}

void PrefixTree::mark_cached_subtree(TreeNode* node, GpuId gpu, SimTime now) {
  if (node == nullptr || node == root_.get()) return;
  mark_cached_node(node, gpu, now);
  for (auto& [tok, ch] : node->children) mark_cached_subtree(ch.get(), gpu, now);
}

void PrefixTree::uncache_subtree(TreeNode* node, GpuId gpu) {
  if (node == nullptr) return;
  // Children first so a prefix never loses its claim before its suffixes.
  for (auto& [tok, ch] : node->children) uncache_subtree(ch.get(), gpu);
  if (node != root_.get()) clear_cached(node, gpu);
}

int64_t PrefixTree::uncache_suffix(const TokenSeq& seq, int64_t tail_len, GpuId gpu) {
  if (seq.empty() || tail_len <= 0) return 0;
  MatchResult m = match(seq);
  int64_t end = std::min<int64_t>(static_cast<int64_t>(seq.size()), m.matched_len);
  int64_t start = static_cast<int64_t>(seq.size()) - tail_len;
  if (start < 0) start = 0;
  if (start >= end) return 0;

  std::vector<TreeNode*> targets;
  int64_t off = 0;
  for (auto& span : m.path) {
    if (off >= end) break;
    TreeNode* n = span.node;
    int64_t node_end = off + span.matched;
    // Align the node to the matched extent so we never uncache tokens past seq.
    if (span.matched < n->token_count()) split_node(n, span.matched);
    if (node_end > start) {
      if (off < start) {
        n = split_node(n, start - off);
        off = start;
      }
      targets.push_back(n);
    }
    off = node_end;
  }
  // Clear deepest-first so a prefix is never uncached before its suffixes.
  int64_t freed = 0;
  for (auto it = targets.rbegin(); it != targets.rend(); ++it) {
    if ((*it)->cached_on(gpu)) {
      freed += (*it)->token_count();
      clear_cached(*it, gpu);
    }
  }
  return freed;
}

EvictionPlan PrefixTree::plan_eviction(GpuId gpu, int64_t tokens_needed,
                                       const std::set<NodeId>& protected_ids,
                                       bool allow_partial_tail) const {
  EvictionPlan plan;
  if (tokens_needed <= 0) return plan;
  std::set<std::tuple<SimTime, NodeId, TreeNode*>> work;
  auto idx = lru_leaves_.find(gpu);
  if (idx != lru_leaves_.end()) {
    for (auto& [key, node] : idx->second) work.emplace(key.first, key.second, node);
  }
  // Simulated cached-child counts; parents surface once all children are planned.
  std::map<NodeId, int> sim_ccc;
  while (plan.freed_tokens < tokens_needed && !work.empty()) {
    auto [la, id, node] = *work.begin();
    work.erase(work.begin());
    if (node->pin_count > 0 || protected_ids.count(node->id) > 0) continue;
    int64_t remaining = tokens_needed - plan.freed_tokens;
    if (allow_partial_tail && node->token_count() > remaining) {
      plan.entries.push_back({node, remaining});  // edge tail only
      plan.freed_tokens += remaining;
      break;
    }
    plan.entries.push_back({node, node->token_count()});
    plan.freed_tokens += node->token_count();
    TreeNode* p = node->parent;
    if (p && p != root_.get() && p->cached_on(gpu)) {
      auto it = sim_ccc.find(p->id);
      int c = (it == sim_ccc.end()) ? p->cached_child_count.at(gpu) : it->second;
      c -= 1;
      sim_ccc[p->id] = c;
      if (c == 0) work.emplace(last_access_or_zero(p, gpu), p->id, p);
    }
  }
  plan.sufficient = plan.freed_tokens >= tokens_needed;
  return plan;
}

std::vector<EvictedRange> PrefixTree::apply_eviction(const EvictionPlan& plan, GpuId gpu) {
  std::vector<EvictedRange> ranges;
  ranges.reserve(plan.entries.size());
  for (auto& e : plan.entries) {
    TreeNode* victim = e.node;
    if (e.tokens < victim->token_count()) {
      victim = split_node(victim, victim->token_count() - e.tokens);
    }
    if (!victim->cached_on(gpu)) throw SimError("prefix_tree: eviction of uncached node");
    ranges.push_back({path_tokens(victim), e.tokens});
    clear_cached(victim, gpu);
  }
  return ranges;
}

int64_t PrefixTree::pin_path(const TokenSeq& prompt, int64_t limit) {
  limit = std::min<int64_t>(limit, static_cast<int64_t>(prompt.size()));
  if (limit <= 0) return 0;
  MatchResult m = match(prompt);
  limit = std::min(limit, m.matched_len);
  int64_t off = 0;
  for (auto& span : m.path) {
    if (off >= limit) break;
    int64_t take = std::min(span.matched, limit - off);
    if (take < span.node->token_count()) split_node(span.node, take);
    span.node->pin_count += 1;
    off += take;
  }
  return off;
}

void PrefixTree::unpin_path(const TokenSeq& prompt, int64_t limit) {
  limit = std::min<int64_t>(limit, static_cast<int64_t>(prompt.size()));
  if (limit <= 0) return;
  MatchResult m = match(prompt);
  if (m.matched_len < limit) throw SimError("prefix_tree: unpin beyond matched path");
  int64_t off = 0;
  for (auto& span : m.path) {
    if (off >= limit) break;
    int64_t take = std::min(span.matched, limit - off);
    if (take < span.node->token_count()) split_node(span.node, take);
    if (span.node->pin_count <= 0) throw SimError("prefix_tree: unpin of unpinned node");
    span.node->pin_count -= 1;
    off += take;
  }
}

int64_t PrefixTree::remove_dead_rec(TreeNode* node, SimTime now, SimTime horizon_ms) {
  int64_t removed = 0;
  for (auto it = node->children.begin(); it != node->children.end();) {
    TreeNode* c = it->second.get();
    removed += remove_dead_rec(c, now, horizon_ms);
    prune_hits(c, now, horizon_ms);
    bool dead = c->caching_gpus.empty() && c->pin_count == 0 && c->children.empty() &&
                c->hits.empty();
    if (dead) {
      it = node->children.erase(it);
      --node_count_;
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

int64_t PrefixTree::remove_dead_nodes(SimTime now, SimTime horizon_ms) {
  return remove_dead_rec(root_.get(), now, horizon_ms);
}

int64_t PrefixTree::recent_hits(const TreeNode* node, GpuId gpu, SimTime now,
                                SimTime horizon_ms) const {
  prune_hits(node, now, horizon_ms);
  auto it = node->hits.find(gpu);
  return it == node->hits.end() ? 0 : static_cast<int64_t>(it->second.size());
}

int64_t PrefixTree::recent_hits_all_gpus(const TreeNode* node, SimTime now,
                                         SimTime horizon_ms) const {
  prune_hits(node, now, horizon_ms);
  int64_t total = 0;
  for (auto& [g, dq] : node->hits) total += static_cast<int64_t>(dq.size());
  return total;
}

int64_t PrefixTree::cached_tokens(GpuId gpu) const {
  auto it = cached_tokens_.find(gpu);
  return it == cached_tokens_.end() ? 0 : it->second;
}

TokenSeq PrefixTree::path_tokens(const TreeNode* node) const {
  std::vector<const TreeNode*> chain;
  for (const TreeNode* n = node; n && n->parent; n = n->parent) chain.push_back(n);
  TokenSeq seq;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    seq.insert(seq.end(), (*it)->edge.begin(), (*it)->edge.end());
  }
  return seq;
}

namespace {
void dump_rec(const PrefixTree& tree, const TreeNode* node, int depth, SimTime now,
              SimTime horizon_ms, std::ostringstream& out) {
  for (int i = 0; i < depth; ++i) out << "  ";
  out << "d" << depth << " len=" << node->token_count() << " gpus=[";
  bool first = true;
  for (GpuId g : node->caching_gpus) {
    if (!first) out << ",";
    out << g;
    first = false;
  }
  out << "] hits=[";
  first = true;
  for (auto& [g, dq] : node->hits) {
    int64_t n = tree.recent_hits(node, g, now, horizon_ms);
    if (n == 0) continue;
    if (!first) out << ",";
    out << g << ":" << n;
    first = false;
  }
  out << "]\n";
  for (auto& [tok, ch] : node->children) {
    dump_rec(tree, ch.get(), depth + 1, now, horizon_ms, out);
  }
}

void export_rec(const TreeNode* node, NodeId parent_id,
                std::vector<PrefixTree::NodeSnapshot>& out) {
  PrefixTree::NodeSnapshot s;
  s.id = node->id;
  s.parent_id = parent_id;
  s.edge = node->edge;
  s.caching_gpus.assign(node->caching_gpus.begin(), node->caching_gpus.end());
  for (auto& [g, dq] : node->hits) s.hits[g].assign(dq.begin(), dq.end());
  s.last_access = node->last_access;
  s.pin_count = node->pin_count;
  out.push_back(std::move(s));
  for (auto& [tok, ch] : node->children) export_rec(ch.get(), node->id, out);
}
}  // namespace

std::string PrefixTree::debug_dump(SimTime now, SimTime horizon_ms) const {
  std::ostringstream out;
  dump_rec(*this, root_.get(), 0, now, horizon_ms, out);
  return out.str();
}

std::vector<PrefixTree::NodeSnapshot> PrefixTree::export_nodes() const {
  std::vector<NodeSnapshot> out;
  export_rec(root_.get(), root_->id, out);
  return out;
}

}  // namespace kvsched
