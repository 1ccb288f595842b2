#include "kvsched/simulator.hpp"

#include <algorithm>
#include <sstream>

namespace kvsched {

LocalConfig SimConfig::local_config() const {
  LocalConfig lc;
  lc.kv_capacity_tokens = scheduler.kv_capacity_tokens;
  lc.priority_groups = scheduler.priority_groups;
  lc.max_batch_requests = max_batch_requests;
  lc.chunk_size = chunk_size;
  lc.iteration_token_budget = iteration_token_budget;
  return lc;
}

void SimConfig::validate() const {
  if (n_gpus < 1) throw ConfigError("n_gpus must be >= 1");
  scheduler.validate();
  local_config().validate();
}

Simulator::Simulator(const SimConfig& config, std::vector<Request> arrivals)
    : config_(config),
      arrivals_(std::move(arrivals)),
      global_(config.n_gpus, config.scheduler, config.model, config.policy) {
  config_.validate();
  for (const Request& r : arrivals_) {
    if (static_cast<int64_t>(r.prompt.size()) > config_.scheduler.kv_capacity_tokens) {
      throw ConfigError("request " + std::to_string(r.id) + " prompt (" +
                        std::to_string(r.prompt.size()) +
                        " tokens) exceeds every GPU's kv capacity");
    }
  }
  locals_.reserve(config_.n_gpus);
  for (int g = 0; g < config_.n_gpus; ++g) {
    locals_.emplace_back(g, config_.local_config(), config_.local_order);
  }
  busy_.assign(config_.n_gpus, false);
  current_batch_.assign(config_.n_gpus, BatchPlan{});
  result_.gpu_prefilled_tokens.assign(config_.n_gpus, 0);
  result_.gpu_iterations.assign(config_.n_gpus, 0);
}

void Simulator::push_event(Event e) {
  e.seq = next_seq_++;
  if (e.kind != EventKind::RebalanceTick) ++pending_work_;
  events_.push(e);
}

void Simulator::check_capacity(GpuId gpu) const {
  if (locals_[gpu].kv_used() > config_.scheduler.kv_capacity_tokens) {
    throw SimError("gpu " + std::to_string(gpu) + " kv occupancy " +
                   std::to_string(locals_[gpu].kv_used()) + " exceeds capacity at t=" +
                   std::to_string(last_time_));
  }
}

void Simulator::handle_arrival(const Event& e) {
  const Request& req = active_.at(e.request);
  Decision d = global_.schedule_request(req, e.time);
  const int group = locals_[d.gpu].enqueue(req, e.time);

  RequestRecord& rec = result_.records[record_index_.at(req.id)];
  rec.gpu = d.gpu;
  rec.branch = d.branch;
  rec.redirected = d.redirected;
  rec.priority_group = group;
  rec.cached_len = d.cached_len;
  rec.missed_len = d.missed_len;

  if (!busy_[d.gpu]) start_iteration(d.gpu, e.time);
}

void Simulator::start_iteration(GpuId gpu, SimTime now) {
  LocalScheduler& local = locals_[gpu];
  if (!local.has_work()) return;
  BatchPlan plan = local.form_batch(now);
  AdmitResult ar = local.admit(plan, now);
  check_capacity(gpu);

  for (const EvictedRange& range : ar.evictions) {
    Event ev;
    ev.time = now;  // same timestamp, later sequence: arrives one event later
    ev.kind = EventKind::EvictionNotice;
    ev.gpu = gpu;
    ev.range = range;
    push_event(ev);
  }
  for (const BatchEntry& entry : ar.admitted.entries) {
    if (entry.new_admission) global_.note_admitted(entry.id, now);
  }

  if (ar.admitted.entries.empty()) {
    if (local.running_count() > 0) {
      throw SimError("gpu " + std::to_string(gpu) +
                     " cannot admit any running work at t=" + std::to_string(now) +
                     ": kv capacity wedged");
    }
    return;  // waiting work deferred; the next arrival or notice retries
  }

  if (config_.iteration_trace) {
    std::ostringstream line;
    line << "t=" << now << " gpu=" << gpu << " prefill=" << ar.admitted.prefill_tokens
         << " decode=" << ar.admitted.decode_contexts << " entries=[";
    for (size_t i = 0; i < ar.admitted.entries.size(); ++i) {
      const BatchEntry& entry = ar.admitted.entries[i];
      if (i > 0) line << ' ';
      line << entry.id << ':' << (entry.is_prefill ? 'p' : 'd') << entry.tokens;
    }
    line << ']';
    int64_t evicted = 0;
    for (const EvictedRange& range : ar.evictions) evicted += range.tail_len;
    line << " evicted=" << evicted;
    result_.iteration_trace.push_back(line.str());
  }

  busy_[gpu] = true;
  current_batch_[gpu] = std::move(ar.admitted);
  result_.gpu_prefilled_tokens[gpu] += current_batch_[gpu].prefill_tokens;
  result_.gpu_iterations[gpu] += 1;

  Event done;
  done.time = now + iteration_time(config_.model, current_batch_[gpu].prefill_tokens,
                                   current_batch_[gpu].decode_contexts);
  done.kind = EventKind::IterationComplete;
  done.gpu = gpu;
  push_event(done);
}

void Simulator::handle_iteration_complete(const Event& e) {
  const GpuId gpu = e.gpu;
  IterationOutcome out = locals_[gpu].complete_iteration(current_batch_[gpu], e.time);
  check_capacity(gpu);

  for (RequestId id : out.newly_cached) {
    global_.note_prefill_cached(active_.at(id).prompt, gpu, e.time);
  }
  for (RequestId id : out.first_tokens) {
    result_.records[record_index_.at(id)].first_token_time = e.time;
  }
  for (const FinishedRequest& fin : out.finished) {
    RequestRecord& rec = result_.records[record_index_.at(fin.id)];
    rec.reused = fin.reused;
    rec.prefilled = fin.prefilled;
    rec.finish_time = e.time;
    if (rec.reused + rec.prefilled != rec.prompt_len) {
      throw SimError("request " + std::to_string(fin.id) + " conservation violated: reused " +
                     std::to_string(fin.reused) + " + prefilled " + std::to_string(fin.prefilled) +
                     " != prompt " + std::to_string(rec.prompt_len));
    }
    global_.note_finished(fin.id, e.time, rec.output_len);
    active_.erase(fin.id);
    result_.end_time = std::max(result_.end_time, e.time);
  }

  busy_[gpu] = false;
  start_iteration(gpu, e.time);
}

SimResult Simulator::run() {
  if (ran_) throw SimError("simulator instances are single use");
  ran_ = true;

  result_.records.reserve(arrivals_.size());
  for (const Request& r : arrivals_) {
    if (active_.count(r.id) > 0) {
      throw ConfigError("duplicate request id " + std::to_string(r.id));
    }
    RequestRecord rec;
    rec.id = r.id;
    rec.arrival = r.arrival_ms;
    rec.prompt_len = static_cast<int64_t>(r.prompt.size());
    rec.output_len = std::max<int64_t>(1, r.output_len);
    record_index_[r.id] = result_.records.size();
    result_.records.push_back(rec);
    active_.emplace(r.id, r);

    Event e;
    e.time = r.arrival_ms;
    e.kind = EventKind::RequestArrival;
    e.request = r.id;
    push_event(e);
  }
  arrivals_.clear();

  if (pending_work_ > 0) {
    Event tick;
    tick.time = config_.scheduler.history_window_ms / 2;
    tick.kind = EventKind::RebalanceTick;
    push_event(tick);
  }

  while (!events_.empty()) {
    Event e = events_.top();
    events_.pop();
    if (e.time < last_time_) {
      throw SimError("event time went backwards: " + std::to_string(e.time) + " < " +
                     std::to_string(last_time_));
    }
    last_time_ = e.time;
    if (e.kind != EventKind::RebalanceTick) --pending_work_;

    switch (e.kind) {
      case EventKind::RequestArrival:
        handle_arrival(e);
        break;
      case EventKind::IterationComplete:
        handle_iteration_complete(e);
        break;
      case EventKind::EvictionNotice:
        global_.note_eviction(e.range, e.gpu, e.time);
        ++result_.eviction_notices;
        break;
      case EventKind::RebalanceTick: {
        for (LocalScheduler& local : locals_) {
          local.tree().remove_dead_nodes(e.time, config_.scheduler.history_window_ms);
        }
        global_.prune_dead_nodes(e.time);
        if (pending_work_ > 0) {
          Event tick;
          tick.time = e.time + config_.scheduler.history_window_ms / 2;
          tick.kind = EventKind::RebalanceTick;
          push_event(tick);
        }
        break;
      }
    }
  }

  for (const RequestRecord& rec : result_.records) {
    if (rec.finish_time < 0) {
      throw SimError("request " + std::to_string(rec.id) + " never completed");
    }
  }
  result_.global_stats = global_.stats();
  return std::move(result_);
}

}  // namespace kvsched
