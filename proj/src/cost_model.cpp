#include "kvsched/cost_model.hpp"

namespace kvsched {

double prefill_time(const TimeModel& model, int64_t missed_tokens) {
  if (missed_tokens <= 0) return 0.0;
  return model.prefill_base_ms + model.prefill_per_token_ms * static_cast<double>(missed_tokens);
}

double decode_time(const TimeModel& model, double output_tokens) {
  return model.decode_per_token_ms * output_tokens;
}

double iteration_time(const TimeModel& model, int64_t prefill_tokens, int64_t decode_count) {
  return model.iteration_base_ms +
         model.prefill_per_token_ms * static_cast<double>(prefill_tokens) +
         model.decode_per_token_ms * static_cast<double>(decode_count);
}

void LoadWindow::add_scheduled(SimTime now, int64_t missed_tokens, int64_t est_output_len) {
  scheduled_.push_back({now, missed_tokens, est_output_len});
  missed_sum_ += missed_tokens;
  if (missed_tokens > 0) ++missed_nonzero_;
}

void LoadWindow::add_completion(SimTime now, int64_t output_len) {
  completed_.push_back({now, output_len});
  output_sum_ += output_len;
}

void LoadWindow::prune(SimTime now) {
  const SimTime cutoff = now - horizon_ms_;
  while (!scheduled_.empty() && scheduled_.front().t < cutoff) {
    missed_sum_ -= scheduled_.front().missed;
    if (scheduled_.front().missed > 0) --missed_nonzero_;
    scheduled_.pop_front();
  }
  while (!completed_.empty() && completed_.front().t < cutoff) {
    output_sum_ -= completed_.front().output;
    completed_.pop_front();
  }
}

int64_t LoadWindow::scheduled_count(SimTime now) {
  prune(now);
  return static_cast<int64_t>(scheduled_.size());
}

double LoadWindow::avg_output_len(SimTime now) {
  prune(now);
  if (completed_.empty()) return static_cast<double>(default_output_len_);
  return static_cast<double>(output_sum_) / static_cast<double>(completed_.size());
}

std::vector<LoadWindow::Scheduled> LoadWindow::snapshot_scheduled(SimTime now) {
  prune(now);
  return {scheduled_.begin(), scheduled_.end()};
}

std::vector<LoadWindow::Completed> LoadWindow::snapshot_completed(SimTime now) {
  prune(now);
  return {completed_.begin(), completed_.end()};
}

double LoadWindow::load_ms(const TimeModel& model, SimTime now) {
  prune(now);
  // Sum of PT(missed_r) over entries, folded from the integer sums: every
  // nonzero entry contributes the same base term.
  double prefill = model.prefill_base_ms * static_cast<double>(missed_nonzero_) +
                   model.prefill_per_token_ms * static_cast<double>(missed_sum_);
  double decode = static_cast<double>(scheduled_.size()) * decode_time(model, avg_output_len(now));
  return prefill + decode;
}

CostBreakdown load_cost(const PrefixTree& mirror, LoadWindow& window, GpuId gpu,
                        int64_t kv_capacity, int64_t missed_tokens, const TimeModel& model,
                        SimTime now) {
  CostBreakdown cost;
  cost.current_load_ms = window.load_ms(model, now);
  cost.prefill_ms = prefill_time(model, missed_tokens);

  const int64_t free_tokens = kv_capacity - mirror.cached_tokens(gpu);
  const int64_t need = missed_tokens - free_tokens;
  if (need > 0) {
    // Whole-node granularity: the speculative eviction set charges each
    // victim's full recompute cost even if only part of it would be dropped.
    EvictionPlan plan = mirror.plan_eviction(gpu, need, {}, /*allow_partial_tail=*/false);
    cost.eviction_infeasible = !plan.sufficient;
    const int64_t total = window.scheduled_count(now);
    if (total > 0) {
      const SimTime h = window.horizon_ms();
      for (const auto& entry : plan.entries) {
        const int64_t sharers = mirror.recent_hits(entry.node, gpu, now, h);
        const double n_j = static_cast<double>(sharers) / static_cast<double>(total);
        cost.eviction_ms += prefill_time(model, entry.tokens) * n_j;
      }
    }
  }
  return cost;
}

}  // namespace kvsched
