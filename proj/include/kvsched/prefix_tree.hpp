#pragma once

#include <deque>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "kvsched/types.hpp"

namespace kvsched {

// Radix tree over token sequences with per-GPU cache metadata. One instance
// serves two roles: each GPU's local view of its own KV cache, and the global
// scheduler's mirror of every GPU's cache (where eviction updates arrive with
// a one-event lag). Single-threaded; callers supply timestamps.
class PrefixTree;

struct TreeNode {
  NodeId id = 0;  // creation-ordered, stable across splits of the prefix half
  TreeNode* parent = nullptr;
  TokenSeq edge;
  // Ordered by first edge token so walks and dumps are deterministic.
  std::map<TokenId, std::unique_ptr<TreeNode>> children;

  std::set<GpuId> caching_gpus;
  // Hit timestamps per GPU within the history window; pruned lazily on read
  // and on record. Mutable so read paths can prune without breaking constness.
  mutable std::map<GpuId, std::deque<SimTime>> hits;
  std::map<GpuId, SimTime> last_access;
  // Number of children cached on g; a cached node with zero is an LRU leaf.
  std::map<GpuId, int> cached_child_count;
  // Requests currently relying on this KV extent; pinned nodes never evict.
  int pin_count = 0;

  int64_t token_count() const { return static_cast<int64_t>(edge.size()); }
  bool cached_on(GpuId g) const { return caching_gpus.count(g) > 0; }
};

struct MatchSpan {
  TreeNode* node = nullptr;
  int64_t matched = 0;  // tokens matched within this node's edge (may be partial on the last span)
};

struct MatchResult {
  int64_t matched_len = 0;
  std::vector<MatchSpan> path;
  // Longest prompt prefix whose every token lies in nodes cached on g.
  // Contiguity from the root is required: an uncached node breaks the chain
  // even if deeper nodes are cached, since their KV is unusable without it.
  std::map<GpuId, int64_t> per_gpu_matched_len;
  // Same, but cached on at least one GPU (drives the exploit/explore choice).
  int64_t cached_len = 0;

  TreeNode* deepest_node() const { return path.empty() ? nullptr : path.back().node; }
  int64_t matched_on(GpuId g) const {
    auto it = per_gpu_matched_len.find(g);
    return it == per_gpu_matched_len.end() ? 0 : it->second;
  }
};

enum class InsertMode {
  MarkCached,  // local-tree semantics: the GPU now caches the whole path
  HitsOnly,    // global-tree semantics: record the traversal, cache nothing new
};

struct InsertResult {
  MatchResult pre_insert;
  TreeNode* tail = nullptr;  // node whose edge ends exactly at the prompt end
};

struct EvictionPlan {
  struct Entry {
    TreeNode* node = nullptr;
    int64_t tokens = 0;  // == node->token_count() except a partial final entry (edge tail)
  };
  std::vector<Entry> entries;
  int64_t freed_tokens = 0;
  bool sufficient = true;
};

// Token range removed from a GPU's cache: the root path spelling the evicted
// extent plus how many trailing tokens of it were dropped. This is what
// eviction notices carry to the global mirror.
struct EvictedRange {
  TokenSeq seq;
  int64_t tail_len = 0;
};

class PrefixTree {
 public:
  PrefixTree();
  PrefixTree(const PrefixTree&) = delete;
  PrefixTree& operator=(const PrefixTree&) = delete;
  // Interior pointers live on the heap, so moving the owning containers is safe.
  PrefixTree(PrefixTree&&) = default;
  PrefixTree& operator=(PrefixTree&&) = default;

  // Read-only longest-prefix walk; does not touch LRU or hit state.
  MatchResult match(const TokenSeq& prompt) const;

  // Ensures a root path spelling exactly `prompt` exists, splitting nodes as
  // needed, and returns the pre-insert match. MarkCached adds `gpu` to
  // caching_gpus along the whole path; both modes record a hit and bump
  // last_access on every path node. Empty prompts are rejected.
  InsertResult insert(const TokenSeq& prompt, GpuId gpu, SimTime now, InsertMode mode);

  // Adds `gpu` to caching_gpus along the path spelling `prompt` (used to
  // mirror a completed prefill into the global tree), recreating the path if
  // housekeeping pruned it. Returns tokens newly marked.
  int64_t mark_cached_path(const TokenSeq& prompt, GpuId gpu, SimTime now);

  // Marks `node` and every descendant as cached on `gpu`. Used by prefix
  // replication, which claims a subtree on a new GPU before the KV exists so
  // future requests route there and realize it on demand.
  void mark_cached_subtree(TreeNode* node, GpuId gpu, SimTime now);

  // Single-node variants used when replicating a shared root without
  // claiming its children.
  void mark_cached_node(TreeNode* node, GpuId gpu, SimTime now);
  void uncache_subtree(TreeNode* node, GpuId gpu);

  // Removes `gpu` from the last `tail_len` tokens of `seq`'s path, splitting
  // at the boundary if it lands inside an edge. Idempotent per node. Returns
  // tokens actually uncached.
  int64_t uncache_suffix(const TokenSeq& seq, int64_t tail_len, GpuId gpu);

  // Plans LRU eviction on g to free `tokens_needed`, least-recent first with
  // creation order as the tie-break, leaves inward. With allow_partial_tail
  // the final entry may cover only an edge tail; otherwise whole nodes are
  // taken and the plan may overshoot (speculative cost estimates charge whole
  // nodes). Pinned nodes and `protected_ids` are skipped and keep their
  // ancestors alive. Never mutates; if the tree cannot free enough the plan
  // covers everything evictable and is flagged insufficient.
  EvictionPlan plan_eviction(GpuId gpu, int64_t tokens_needed,
                             const std::set<NodeId>& protected_ids,
                             bool allow_partial_tail = true) const;

  // Applies a plan from plan_eviction (same tree, no interleaved mutation)
  // and reports the evicted ranges for notification.
  std::vector<EvictedRange> apply_eviction(const EvictionPlan& plan, GpuId gpu);

  // Pins/unpins the matched path covering prompt[0, limit), splitting at the
  // boundary so pins always cover whole nodes. Split duplicates pin counts to
  // both halves, so pin/unpin pairs stay balanced across later splits.
  int64_t pin_path(const TokenSeq& prompt, int64_t limit);
  void unpin_path(const TokenSeq& prompt, int64_t limit);

  // Removes nodes that no GPU caches and no request hit within
  // [now - horizon, now]. A dead node with live descendants survives as
  // structure (it already carries no cache claim). Returns nodes removed.
  int64_t remove_dead_nodes(SimTime now, SimTime horizon_ms);

  // Hits on `node` for g within [now - horizon, now]; prunes older stamps.
  int64_t recent_hits(const TreeNode* node, GpuId gpu, SimTime now, SimTime horizon_ms) const;
  int64_t recent_hits_all_gpus(const TreeNode* node, SimTime now, SimTime horizon_ms) const;

  int64_t cached_tokens(GpuId gpu) const;
  int64_t node_count() const { return node_count_; }
  const TreeNode* root() const { return root_.get(); }
  TreeNode* root() { return root_.get(); }

  // Root-to-node token sequence (edge concatenation).
  TokenSeq path_tokens(const TreeNode* node) const;

  // One node per line: depth, edge length, caching GPUs, in-window hit counts.
  std::string debug_dump(SimTime now, SimTime horizon_ms) const;

  struct NodeSnapshot {
    NodeId id = 0;
    NodeId parent_id = 0;
    TokenSeq edge;
    std::vector<GpuId> caching_gpus;
    std::map<GpuId, std::vector<SimTime>> hits;
    std::map<GpuId, SimTime> last_access;
    int pin_count = 0;
  };
  // Depth-first, child-token order; index 0 is the root. No pruning applied.
  std::vector<NodeSnapshot> export_nodes() const;

 private:
  TreeNode* walk(const TokenSeq& prompt, MatchResult* out) const;
  TreeNode* split_node(TreeNode* node, int64_t prefix_len);
  TreeNode* ensure_path(const TokenSeq& prompt);  // returns tail node
  void record_hit(TreeNode* node, GpuId gpu, SimTime now);
  void set_cached(TreeNode* node, GpuId gpu);
  void clear_cached(TreeNode* node, GpuId gpu);
  void prune_hits(const TreeNode* node, SimTime now, SimTime horizon_ms) const;
  void index_insert(TreeNode* node, GpuId gpu);
  void index_erase(TreeNode* node, GpuId gpu);
  bool is_lru_leaf(const TreeNode* node, GpuId gpu) const;
  int64_t remove_dead_rec(TreeNode* node, SimTime now, SimTime horizon_ms);

  std::unique_ptr<TreeNode> root_;
  NodeId next_id_ = 0;
  int64_t node_count_ = 0;  // excludes the root
  std::map<GpuId, int64_t> cached_tokens_;
  // Per-GPU LRU index over cached nodes with no cached children on that GPU,
  // keyed (last_access, creation id) so eviction order is total and stable.
  std::map<GpuId, std::map<std::pair<SimTime, NodeId>, TreeNode*>> lru_leaves_;
};

}  // namespace kvsched
