#pragma once

#include <map>
#include <queue>
#include <string>
#include <vector>

#include "kvsched/global_scheduler.hpp"
#include "kvsched/local_scheduler.hpp"

namespace kvsched {

struct SimConfig {
  int n_gpus = 4;
  TimeModel model;
  SchedulerConfig scheduler;  // kv_capacity_tokens here is authoritative per GPU
  GlobalPolicy policy;
  LocalOrder local_order = LocalOrder::PriorityGroups;
  int max_batch_requests = 64;
  int64_t chunk_size = 512;
  int64_t iteration_token_budget = 4096;
  bool iteration_trace = false;  // per-iteration text records in the result

  LocalConfig local_config() const;
  void validate() const;
};

// Full lifecycle of one request as observed by the simulator.
struct RequestRecord {
  RequestId id = 0;
  SimTime arrival = 0;
  GpuId gpu = kNoGpu;
  Branch branch = Branch::Explore;
  bool redirected = false;
  int priority_group = 0;
  int64_t prompt_len = 0;
  int64_t output_len = 0;
  int64_t cached_len = 0;   // global decision view
  int64_t missed_len = 0;
  int64_t reused = 0;       // local ground truth at completion
  int64_t prefilled = 0;
  SimTime first_token_time = -1;
  SimTime finish_time = -1;
};

struct SimResult {
  std::vector<RequestRecord> records;  // arrival order
  SimTime end_time = 0;                // last completion timestamp
  GlobalStats global_stats;
  std::vector<int64_t> gpu_prefilled_tokens;  // ground-truth recompute per GPU
  std::vector<int64_t> gpu_iterations;
  int64_t eviction_notices = 0;
  std::vector<std::string> iteration_trace;
};

// Deterministic discrete-event engine: arrivals route through the global
// scheduler, per-GPU local schedulers execute batches, and iteration time
// follows the configured TimeModel. Events are ordered by (time, sequence).
class Simulator {
 public:
  Simulator(const SimConfig& config, std::vector<Request> arrivals);

  SimResult run();  // processes every event to quiescence; single use

  // Post-run inspection (cluster state at quiescence).
  const GlobalScheduler& global() const { return global_; }
  const LocalScheduler& local(GpuId gpu) const { return locals_[gpu]; }

 private:
  enum class EventKind { RequestArrival, IterationComplete, EvictionNotice, RebalanceTick };
  struct Event {
    SimTime time = 0;
    int64_t seq = 0;
    EventKind kind = EventKind::RequestArrival;
    RequestId request = 0;
    GpuId gpu = kNoGpu;
    EvictedRange range;
  };
  struct EventAfter {
    bool operator()(const Event& a, const Event& b) const {
      if (a.time != b.time) return a.time > b.time;
      return a.seq > b.seq;
    }
  };

  void push_event(Event e);
  void handle_arrival(const Event& e);
  void start_iteration(GpuId gpu, SimTime now);
  void handle_iteration_complete(const Event& e);
  void check_capacity(GpuId gpu) const;

  SimConfig config_;
  std::vector<Request> arrivals_;
  GlobalScheduler global_;
  std::vector<LocalScheduler> locals_;
  std::vector<bool> busy_;
  std::vector<BatchPlan> current_batch_;
  std::map<RequestId, Request> active_;  // prompts needed until completion
  std::map<RequestId, size_t> record_index_;
  std::priority_queue<Event, std::vector<Event>, EventAfter> events_;
  int64_t next_seq_ = 0;
  int64_t pending_work_ = 0;  // non-tick events still queued
  SimTime last_time_ = 0;
  SimResult result_;
  bool ran_ = false;
};

}  // namespace kvsched
