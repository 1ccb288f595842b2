#include "kvsched/local_scheduler.hpp"

#include <algorithm>
#include <cmath>

namespace kvsched {

void LocalConfig::validate() const {
  if (kv_capacity_tokens <= 0) throw ConfigError("kv_capacity_tokens must be > 0");
  if (priority_groups < 1) throw ConfigError("priority_groups must be >= 1");
  if (max_batch_requests < 1) throw ConfigError("max_batch_requests must be >= 1");
  if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
  if (iteration_token_budget < chunk_size) {
    throw ConfigError("iteration_token_budget must be >= chunk_size");
  }
}

LocalScheduler::LocalScheduler(GpuId gpu, const LocalConfig& config, LocalOrder order)
    : gpu_(gpu), config_(config), order_(order) {
  config_.validate();
}

int LocalScheduler::enqueue(const Request& req, SimTime now) {
  if (req.prompt.empty()) throw SimError("request " + std::to_string(req.id) + " has an empty prompt");
  LocalRequest r;
  r.id = req.id;
  r.prompt = req.prompt;
  r.output_len = std::max<int64_t>(1, req.output_len);
  r.enqueue_time = now;
  r.enqueue_seq = next_seq_++;
  r.enqueue_cached = tree_.match(req.prompt).matched_on(gpu_);
  const double hit_ratio =
      static_cast<double>(r.enqueue_cached) / static_cast<double>(req.prompt.size());
  const int p = config_.priority_groups;
  r.group = std::min(p, static_cast<int>(std::floor(hit_ratio * p)));
  const int group = r.group;
  requests_.emplace(req.id, std::move(r));
  waiting_.push_back(req.id);
  return group;
}

int64_t LocalScheduler::waiting_count() const { return static_cast<int64_t>(waiting_.size()); }
int64_t LocalScheduler::running_count() const { return static_cast<int64_t>(running_.size()); }

int64_t LocalScheduler::kv_used() const {
  int64_t total = tree_.cached_tokens(gpu_);
  for (const auto& [id, tokens] : non_tree_) total += tokens;
  return total;
}

std::optional<RequestProgress> LocalScheduler::progress(RequestId id) const {
  auto it = requests_.find(id);
  if (it == requests_.end()) return std::nullopt;
  RequestProgress out;
  out.phase = it->second.phase;
  out.reused = it->second.reused;
  out.prefilled = it->second.prefilled;
  out.decoded = it->second.decoded;
  out.group = it->second.group;
  return out;
}

// Picks up to `slots` waiting requests in queue-policy order. Under
// PriorityGroups, group g's base quota is round(slots * g / sum(0..P));
// unfilled quotas cascade to the next lower group, and a second descending
// pass hands out any slots that remain.
std::vector<RequestId> LocalScheduler::select_new(int slots) const {
  std::vector<RequestId> out;
  if (slots <= 0 || waiting_.empty()) return out;

  if (order_ == LocalOrder::Fcfs) {
    for (RequestId id : waiting_) {
      if (static_cast<int>(out.size()) >= slots) break;
      out.push_back(id);
    }
    return out;
  }
  if (order_ == LocalOrder::LongestPrefixFirst) {
    std::vector<RequestId> sorted = waiting_;
    std::sort(sorted.begin(), sorted.end(), [&](RequestId a, RequestId b) {
      const LocalRequest& ra = requests_.at(a);
      const LocalRequest& rb = requests_.at(b);
      if (ra.enqueue_cached != rb.enqueue_cached) return ra.enqueue_cached > rb.enqueue_cached;
      return ra.enqueue_seq < rb.enqueue_seq;
    });
    sorted.resize(std::min(sorted.size(), static_cast<size_t>(slots)));
    return sorted;
  }

  const int p = config_.priority_groups;
  std::vector<std::vector<RequestId>> groups(p + 1);
  for (RequestId id : waiting_) groups[requests_.at(id).group].push_back(id);

  const double total_weight = static_cast<double>(p) * (p + 1) / 2.0;
  std::vector<size_t> taken(p + 1, 0);
  int left = slots;
  int64_t carry = 0;
  for (int g = p; g >= 0 && left > 0; --g) {
    const int64_t quota = std::llround(static_cast<double>(slots) * g / total_weight);
    int64_t allow = quota + carry;
    int64_t take = std::min<int64_t>({allow, static_cast<int64_t>(groups[g].size()), left});
    for (int64_t i = 0; i < take; ++i) out.push_back(groups[g][taken[g]++]);
    left -= static_cast<int>(take);
    carry = allow - take;
  }
  for (int g = p; g >= 0 && left > 0; --g) {
    while (taken[g] < groups[g].size() && left > 0) {
      out.push_back(groups[g][taken[g]++]);
      --left;
    }
  }
  return out;
}

BatchPlan LocalScheduler::form_batch(SimTime) {
  BatchPlan plan;
  int slots = config_.max_batch_requests;
  int64_t budget = config_.iteration_token_budget;

  // Running decode contexts ride every iteration (continuous batching).
  for (RequestId id : running_) {
    const LocalRequest& r = requests_.at(id);
    if (r.phase != Phase::Decode) continue;
    if (slots <= 0 || budget <= 0) break;
    plan.entries.push_back({id, 1, false, false});
    ++plan.decode_contexts;
    --slots;
    --budget;
  }
  // Then running prefills continue with their next chunk.
  for (RequestId id : running_) {
    const LocalRequest& r = requests_.at(id);
    if (r.phase != Phase::Prefill) continue;
    if (slots <= 0 || budget <= 0) break;
    const int64_t missed_left =
        static_cast<int64_t>(r.prompt.size()) - r.reused - r.prefilled;
    const int64_t chunk = std::min({config_.chunk_size, missed_left, budget});
    if (chunk <= 0) break;
    plan.entries.push_back({id, chunk, true, false});
    plan.prefill_tokens += chunk;
    budget -= chunk;
    --slots;
  }
  // New admissions fill the remaining slots in queue-policy order.
  for (RequestId id : select_new(slots)) {
    if (budget <= 0) break;
    const LocalRequest& r = requests_.at(id);
    const int64_t missed = static_cast<int64_t>(r.prompt.size()) -
                           tree_.match(r.prompt).matched_on(gpu_);
    if (missed > 0) {
      const int64_t chunk = std::min({config_.chunk_size, missed, budget});
      plan.entries.push_back({id, chunk, true, true});
      plan.prefill_tokens += chunk;
      budget -= chunk;
    } else {
      // Fully cached prompts skip prefill and decode immediately.
      plan.entries.push_back({id, 1, false, true});
      ++plan.decode_contexts;
      --budget;
    }
  }
  return plan;
}

bool LocalScheduler::ensure_space(int64_t needed, SimTime now,
                                  std::vector<EvictedRange>& evictions) {
  const int64_t free = config_.kv_capacity_tokens - kv_used();
  if (needed <= free) return true;
  EvictionPlan plan = tree_.plan_eviction(gpu_, needed - free, {}, true);
  if (!plan.sufficient) return false;
  auto ranges = tree_.apply_eviction(plan, gpu_);
  (void)now;
  evictions.insert(evictions.end(), ranges.begin(), ranges.end());
  return true;
}

AdmitResult LocalScheduler::admit(const BatchPlan& plan, SimTime now) {
  AdmitResult result;
  bool blocked = false;
  for (const BatchEntry& entry : plan.entries) {
    if (blocked) {
      result.deferred.push_back(entry.id);
      continue;
    }
    LocalRequest& r = requests_.at(entry.id);
    BatchEntry admitted = entry;

    if (entry.new_admission) {
      // Pin the reused extent before any eviction this entry may trigger.
      // Earlier admissions in this very batch may have evicted part of the
      // prefix matched at planning time, so re-measure first.
      const int64_t reused_now = tree_.match(r.prompt).matched_on(gpu_);
      if (!entry.is_prefill && reused_now < static_cast<int64_t>(r.prompt.size())) {
        // Planned as fully cached, no longer true: wait for the next batch.
        result.deferred.push_back(entry.id);
        continue;
      }
      r.reused = reused_now;
      r.pinned_len = tree_.pin_path(r.prompt, reused_now);
    }

    if (!ensure_space(admitted.tokens, now, result.evictions)) {
      if (entry.new_admission) {
        tree_.unpin_path(r.prompt, r.pinned_len);
        r.pinned_len = 0;
        r.reused = 0;
      }
      result.deferred.push_back(entry.id);
      blocked = true;  // admission stops at the first request that cannot fit
      continue;
    }
    non_tree_[entry.id] += admitted.tokens;

    if (entry.new_admission) {
      r.phase = entry.is_prefill ? Phase::Prefill : Phase::Decode;
      waiting_.erase(std::find(waiting_.begin(), waiting_.end(), entry.id));
      running_.push_back(entry.id);
    }
    result.admitted.entries.push_back(admitted);
    if (admitted.is_prefill) {
      result.admitted.prefill_tokens += admitted.tokens;
    } else {
      ++result.admitted.decode_contexts;
    }
  }
  return result;
}

IterationOutcome LocalScheduler::complete_iteration(const BatchPlan& admitted, SimTime now) {
  IterationOutcome out;
  for (const BatchEntry& entry : admitted.entries) {
    LocalRequest& r = requests_.at(entry.id);
    if (entry.is_prefill) {
      r.prefilled += entry.tokens;
      const int64_t prompt_len = static_cast<int64_t>(r.prompt.size());
      if (r.reused + r.prefilled == prompt_len) {
        // Final chunk done: the whole prompt becomes reusable cache. The
        // prefilled tokens move from per-request accounting into the tree,
        // so occupancy never grows at this step.
        tree_.insert(r.prompt, gpu_, now, InsertMode::MarkCached);
        non_tree_[r.id] -= r.prefilled;
        const int64_t pinned = tree_.pin_path(r.prompt, prompt_len);
        tree_.unpin_path(r.prompt, r.pinned_len);
        r.pinned_len = pinned;
        r.inserted = true;
        r.phase = Phase::Decode;
        out.newly_cached.push_back(r.id);
      }
    } else {
      r.decoded += 1;
      if (r.decoded == 1) out.first_tokens.push_back(r.id);
      if (r.decoded >= r.output_len) {
        if (!r.inserted) {
          // Fully reused prompt: refresh recency now that it has served.
          tree_.insert(r.prompt, gpu_, now, InsertMode::HitsOnly);
        }
        tree_.unpin_path(r.prompt, r.pinned_len);
        out.finished.push_back({r.id, r.reused, r.prefilled});
        non_tree_.erase(r.id);
        running_.erase(std::find(running_.begin(), running_.end(), r.id));
        requests_.erase(r.id);
      }
    }
  }
  return out;
}

}  // namespace kvsched
