#pragma once

#include <map>
#include <optional>
#include <vector>

#include "kvsched/cost_model.hpp"
#include "kvsched/prefix_tree.hpp"
#include "kvsched/types.hpp"

namespace kvsched {

// Thrown when a request's prompt exceeds the KV capacity of every GPU.
struct NoAdmissibleGpu : SimError {
  using SimError::SimError;
};

struct SchedulerConfig {
  SimTime history_window_ms = 180000.0;  // H
  double th_bal = 2.0;                   // rebalance trigger ratio
  double imbal_ratio = 0.9;              // decode-pressure early-return threshold
  int priority_groups = 10;              // P
  int64_t kv_capacity_tokens = 200000;   // per GPU
  int64_t default_output_len = 32;       // avg-output fallback for empty windows

  void validate() const;  // throws ConfigError on out-of-domain values
};

enum class GlobalMode { PrefixAware, RoundRobin };

struct GlobalPolicy {
  GlobalMode mode = GlobalMode::PrefixAware;
  bool rebalance = true;
  bool autoscale = true;
  bool pd_balance = true;
};

enum class Branch {
  Exploit,               // reuse: route to a GPU caching the longest extent
  Explore,               // cost-minimizing placement
  ExploreDecodePressure, // decode-heavy GPU has spare prefill capacity
  RoundRobin,
};

const char* branch_name(Branch b);

struct GpuCandidateCost {
  GpuId gpu = kNoGpu;
  CostBreakdown cost;
};

// Full audit record of one placement decision.
struct Decision {
  RequestId request = 0;
  Branch branch = Branch::Explore;
  GpuId gpu = kNoGpu;
  bool redirected = false;
  GpuId pre_redirect_gpu = kNoGpu;
  int64_t cached_len = 0;       // matched tokens cached on >= 1 GPU
  int64_t missed_len = 0;       // |prompt| - cached_len
  int64_t missed_on_chosen = 0; // |prompt| - chosen GPU's contiguous cached extent
  std::vector<GpuCandidateCost> costs;   // candidates whose cost was evaluated, in evaluation order
  std::map<GpuId, double> decode_ratios; // populated on the explore path
};

// Everything the decision function reads, exported for independent replay.
struct ClusterSnapshot {
  SimTime now = 0;
  int n_gpus = 0;
  SchedulerConfig config;
  TimeModel model;
  GlobalPolicy policy;
  std::vector<PrefixTree::NodeSnapshot> nodes;
  struct GpuSnap {
    GpuId id = 0;
    std::vector<LoadWindow::Scheduled> scheduled;
    std::vector<LoadWindow::Completed> completed;
    int64_t inflight_cached = 0;
    int64_t inflight_prompt = 0;
  };
  std::vector<GpuSnap> gpus;
  std::map<GpuId, GpuId> redirects;
};

struct GlobalStats {
  int64_t exploit = 0;
  int64_t explore = 0;
  int64_t decode_pressure = 0;
  int64_t round_robin = 0;
  int64_t redirected = 0;
  int64_t rebalance_installs = 0;
  int64_t autoscale_events = 0;
  int64_t tree_reads = 0;
};

// Cluster-level request placement. decide() is value-pure (it only prunes
// lazily maintained windows); schedule_request() runs the full per-request
// pipeline: redirect upkeep, decision, state commit, replication check.
class GlobalScheduler {
 public:
  GlobalScheduler(int n_gpus, const SchedulerConfig& config, const TimeModel& model,
                  const GlobalPolicy& policy);

  Decision schedule_request(const Request& req, SimTime now);
  Decision decide(const Request& req, SimTime now);

  // Simulator callbacks.
  void note_admitted(RequestId id, SimTime now);
  void note_prefill_cached(const TokenSeq& prompt, GpuId gpu, SimTime now);
  void note_eviction(const EvictedRange& range, GpuId gpu, SimTime now);
  void note_finished(RequestId id, SimTime now, int64_t output_len);

  double decode_ratio(GpuId gpu) const;
  double gpu_load_ms(GpuId gpu, SimTime now);
  ClusterSnapshot snapshot(SimTime now);

  // Drops mirror nodes that are uncached, unpinned, childless and saw no hit
  // within the history window. Returns the number of nodes removed.
  int64_t prune_dead_nodes(SimTime now);

  const PrefixTree& mirror() const { return mirror_; }
  const std::map<GpuId, GpuId>& redirects() const { return redirects_; }
  const GlobalStats& stats() const { return stats_; }
  int n_gpus() const { return n_gpus_; }
  const SchedulerConfig& config() const { return config_; }
  const TimeModel& model() const { return model_; }

 private:
  struct Inflight {
    GpuId gpu = kNoGpu;
    int64_t cached_len = 0;
    int64_t prompt_len = 0;
    SimTime arrival = 0;
    NodeId prefix_root = 0;
  };
  struct GpuState {
    LoadWindow window;
    int64_t inflight_cached = 0;
    int64_t inflight_prompt = 0;
  };

  void commit(const Request& req, const Decision& d, SimTime now);
  void update_redirects(SimTime now);
  void check_autoscale(SimTime now);
  void replicate_prefix(TreeNode* root_child, GpuId target, SimTime now);
  GpuId pick_min_cost(const std::vector<GpuCandidateCost>& costs) const;
  CostBreakdown cost_for(GpuId gpu, int64_t missed, SimTime now);

  int n_gpus_;
  SchedulerConfig config_;
  TimeModel model_;
  GlobalPolicy policy_;
  PrefixTree mirror_;
  std::vector<GpuState> gpus_;
  std::map<RequestId, Inflight> inflight_;
  std::map<GpuId, GpuId> redirects_;
  // Per prefix root: window-bucket index -> (queueing-time sum, count).
  std::map<NodeId, std::map<int64_t, std::pair<double, int64_t>>> queue_stats_;
  int64_t rr_next_ = 0;
  GlobalStats stats_;
};

}  // namespace kvsched
