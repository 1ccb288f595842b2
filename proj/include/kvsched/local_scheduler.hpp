#pragma once

#include <map>
#include <optional>
#include <vector>

#include "kvsched/prefix_tree.hpp"
#include "kvsched/types.hpp"

namespace kvsched {

struct LocalConfig {
  int64_t kv_capacity_tokens = 200000;
  int priority_groups = 10;              // P: groups are 0..P
  int max_batch_requests = 64;           // B
  int64_t chunk_size = 512;
  int64_t iteration_token_budget = 4096; // chunk_size * 8

  void validate() const;  // throws ConfigError on out-of-domain values
};

// Wait-queue discipline for new admissions.
enum class LocalOrder {
  PriorityGroups,     // quota-weighted groups by cached hit ratio
  Fcfs,               // arrival order only
  LongestPrefixFirst, // largest enqueue-time cached extent first
};

enum class Phase { Waiting, Prefill, Decode };

struct BatchEntry {
  RequestId id = 0;
  int64_t tokens = 0;      // prefill chunk size, or 1 for a decode step
  bool is_prefill = false;
  bool new_admission = false;  // first time this request enters a batch
};

struct BatchPlan {
  std::vector<BatchEntry> entries;  // admission order: decodes, running prefills, new
  int64_t prefill_tokens = 0;
  int64_t decode_contexts = 0;
  bool empty() const { return entries.empty(); }
};

struct AdmitResult {
  BatchPlan admitted;                  // the entries that actually run
  std::vector<EvictedRange> evictions; // to be delivered to the global scheduler
  std::vector<RequestId> deferred;     // planned but pushed to a later iteration
};

struct FinishedRequest {
  RequestId id = 0;
  int64_t reused = 0;     // final accounting, captured before teardown
  int64_t prefilled = 0;
};

struct IterationOutcome {
  std::vector<RequestId> first_tokens;     // emitted their first decode token now
  std::vector<FinishedRequest> finished;   // emitted their final token now
  std::vector<RequestId> newly_cached;     // prompts just inserted into the local tree
};

struct RequestProgress {
  Phase phase = Phase::Waiting;
  int64_t reused = 0;     // locally cached tokens pinned at admission
  int64_t prefilled = 0;  // prompt tokens computed on this GPU
  int64_t decoded = 0;    // output tokens emitted so far
  int group = 0;          // priority group frozen at enqueue
};

// Iteration-level scheduler for one simulated GPU. The driving loop is:
// form_batch -> admit -> (simulated iteration time passes) -> complete_iteration.
// form_batch only selects; admit pins reuse, evicts for space and may defer;
// complete_iteration advances request state and reports lifecycle transitions.
class LocalScheduler {
 public:
  LocalScheduler(GpuId gpu, const LocalConfig& config, LocalOrder order);

  // Registers an arrival. The local tree is only read here: new KV becomes
  // cacheable when the final prefill chunk completes. Returns the priority
  // group index, frozen for the request's lifetime.
  int enqueue(const Request& req, SimTime now);

  BatchPlan form_batch(SimTime now);
  AdmitResult admit(const BatchPlan& plan, SimTime now);
  IterationOutcome complete_iteration(const BatchPlan& admitted, SimTime now);

  bool has_work() const { return !requests_.empty(); }
  int64_t waiting_count() const;
  int64_t running_count() const;

  // Tree-cached tokens plus per-request KV held outside the tree
  // (prefilled-but-uninserted chunks and emitted decode tokens).
  int64_t kv_used() const;

  std::optional<RequestProgress> progress(RequestId id) const;
  const PrefixTree& tree() const { return tree_; }
  PrefixTree& tree() { return tree_; }
  GpuId gpu() const { return gpu_; }
  const LocalConfig& config() const { return config_; }

 private:
  struct LocalRequest {
    RequestId id = 0;
    TokenSeq prompt;
    int64_t output_len = 0;
    SimTime enqueue_time = 0;
    int64_t enqueue_seq = 0;
    int group = 0;
    int64_t enqueue_cached = 0;  // cached extent at enqueue (ordering key)
    Phase phase = Phase::Waiting;
    int64_t reused = 0;
    int64_t prefilled = 0;
    int64_t decoded = 0;
    int64_t pinned_len = 0;
    bool inserted = false;
  };

  std::vector<RequestId> select_new(int slots) const;
  bool ensure_space(int64_t needed, SimTime now, std::vector<EvictedRange>& evictions);

  GpuId gpu_;
  LocalConfig config_;
  LocalOrder order_;
  PrefixTree tree_;
  std::map<RequestId, LocalRequest> requests_;
  std::vector<RequestId> waiting_;  // enqueue order
  std::vector<RequestId> running_; // admission order
  std::map<RequestId, int64_t> non_tree_;  // KV tokens held outside the tree
  int64_t next_seq_ = 0;
};

}  // namespace kvsched
