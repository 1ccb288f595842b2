#pragma once

#include <deque>

#include "kvsched/prefix_tree.hpp"
#include "kvsched/types.hpp"

namespace kvsched {

// Linear time model for prefill and decode. Coefficients are simulator
// parameters, not hardware claims; defaults keep workloads prefill-dominated.
struct TimeModel {
  double prefill_base_ms = 5.0;       // c0, per prefill with any missed tokens
  double prefill_per_token_ms = 0.25; // c1
  double decode_per_token_ms = 15.0;  // c2
  double iteration_base_ms = 8.0;     // c3, per batched iteration
};

// Zero missed tokens cost exactly zero; a fully cached prompt skips prefill.
double prefill_time(const TimeModel& model, int64_t missed_tokens);
double decode_time(const TimeModel& model, double output_tokens);
// One batched iteration: c3 + c1 * prefill tokens + c2 * decode request count.
double iteration_time(const TimeModel& model, int64_t prefill_tokens, int64_t decode_count);

// Per-GPU scheduling history over the last H milliseconds: which requests were
// placed here (with their missed token counts) and which finished (with their
// output lengths). Pruned lazily on every read; token counts are kept as
// integer running sums so reads are O(1) and bit-stable.
class LoadWindow {
 public:
  LoadWindow(SimTime horizon_ms, int64_t default_output_len)
      : horizon_ms_(horizon_ms), default_output_len_(default_output_len) {}

  void add_scheduled(SimTime now, int64_t missed_tokens, int64_t est_output_len);
  void add_completion(SimTime now, int64_t output_len);

  // Entries timestamped in [now - H, now] survive pruning.
  void prune(SimTime now);

  int64_t scheduled_count(SimTime now);
  // Mean output length of completions in the window, or the configured
  // default when none completed recently.
  double avg_output_len(SimTime now);
  // Window load L: sum over scheduled entries of PT(missed) + DT(avg output).
  double load_ms(const TimeModel& model, SimTime now);

  SimTime horizon_ms() const { return horizon_ms_; }
  int64_t default_output_len() const { return default_output_len_; }

  struct Scheduled {
    SimTime t;
    int64_t missed;
    int64_t est_output;  // request's estimated output length at schedule time
  };
  struct Completed {
    SimTime t;
    int64_t output;
  };
  // Post-prune copies of the window contents, for snapshots and audits.
  std::vector<Scheduled> snapshot_scheduled(SimTime now);
  std::vector<Completed> snapshot_completed(SimTime now);

 private:
  std::deque<Scheduled> scheduled_;
  std::deque<Completed> completed_;
  int64_t missed_sum_ = 0;
  int64_t missed_nonzero_ = 0;
  int64_t output_sum_ = 0;
  SimTime horizon_ms_;
  int64_t default_output_len_;
};

struct CostBreakdown {
  double current_load_ms = 0;  // L: prefill+decode work recently placed here
  double eviction_ms = 0;      // M: recompute cost of cache the request would push out
  double prefill_ms = 0;       // P: prefill cost of the request's missed tokens
  // Set when even evicting every unprotected node cannot fit the request; the
  // GPU is then inadmissible for it.
  bool eviction_infeasible = false;

  double total_ms() const { return current_load_ms + eviction_ms + prefill_ms; }
};

// Load cost of placing a request with `missed_tokens` uncached tokens on
// `gpu`. `mirror` is the scheduler's view of that GPU's cache; its cached
// token total stands in for KV usage when sizing the predicted eviction.
CostBreakdown load_cost(const PrefixTree& mirror, LoadWindow& window, GpuId gpu,
                        int64_t kv_capacity, int64_t missed_tokens, const TimeModel& model,
                        SimTime now);

}  // namespace kvsched
