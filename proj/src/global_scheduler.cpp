#include "kvsched/global_scheduler.hpp"

#include <algorithm>
#include <cmath>

namespace kvsched {

void SchedulerConfig::validate() const {
  if (!(history_window_ms > 0)) throw ConfigError("history_window_ms must be > 0");
  if (!(th_bal > 1.0)) throw ConfigError("th_bal must be > 1");
  if (!(imbal_ratio > 0.0 && imbal_ratio <= 1.0)) throw ConfigError("imbal_ratio must be in (0,1]");
  if (priority_groups < 1) throw ConfigError("priority_groups must be >= 1");
  if (kv_capacity_tokens <= 0) throw ConfigError("kv_capacity_tokens must be > 0");
  if (default_output_len < 0) throw ConfigError("default_output_len must be >= 0");
}

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::Exploit: return "exploit";
    case Branch::Explore: return "explore";
    case Branch::ExploreDecodePressure: return "decode_pressure";
    case Branch::RoundRobin: return "round_robin";
  }
  return "unknown";
}

GlobalScheduler::GlobalScheduler(int n_gpus, const SchedulerConfig& config,
                                 const TimeModel& model, const GlobalPolicy& policy)
    : n_gpus_(n_gpus), config_(config), model_(model), policy_(policy) {
  if (n_gpus_ < 1) throw ConfigError("cluster needs at least one GPU");
  config_.validate();
  gpus_.reserve(n_gpus_);
  for (int g = 0; g < n_gpus_; ++g) {
    gpus_.push_back(GpuState{LoadWindow(config_.history_window_ms, config_.default_output_len),
                             0, 0});
  }
}

double GlobalScheduler::decode_ratio(GpuId gpu) const {
  const GpuState& s = gpus_[gpu];
  if (s.inflight_prompt <= 0) return 0.0;
  return static_cast<double>(s.inflight_cached) / static_cast<double>(s.inflight_prompt);
}

double GlobalScheduler::gpu_load_ms(GpuId gpu, SimTime now) {
  return gpus_[gpu].window.load_ms(model_, now);
}

CostBreakdown GlobalScheduler::cost_for(GpuId gpu, int64_t missed, SimTime now) {
  return load_cost(mirror_, gpus_[gpu].window, gpu, config_.kv_capacity_tokens, missed, model_,
                   now);
}

GpuId GlobalScheduler::pick_min_cost(const std::vector<GpuCandidateCost>& costs) const {
  // Candidates arrive in ascending GPU order; strict comparison keeps the
  // lowest id on ties. Eviction-infeasible GPUs lose to any feasible one.
  GpuId best = kNoGpu;
  double best_total = 0;
  for (const auto& c : costs) {
    if (c.cost.eviction_infeasible) continue;
    if (best == kNoGpu || c.cost.total_ms() < best_total) {
      best = c.gpu;
      best_total = c.cost.total_ms();
    }
  }
  if (best != kNoGpu) return best;
  for (const auto& c : costs) {
    if (best == kNoGpu || c.cost.total_ms() < best_total) {
      best = c.gpu;
      best_total = c.cost.total_ms();
    }
  }
  return best;
}

Decision GlobalScheduler::decide(const Request& req, SimTime now) {
  Decision d;
  d.request = req.id;
  const int64_t prompt_len = static_cast<int64_t>(req.prompt.size());
  if (prompt_len > config_.kv_capacity_tokens) {
    throw NoAdmissibleGpu("prompt of " + std::to_string(prompt_len) +
                          " tokens exceeds every GPU's KV capacity");
  }

  if (policy_.mode == GlobalMode::RoundRobin) {
    d.branch = Branch::RoundRobin;
    d.gpu = static_cast<GpuId>(rr_next_ % n_gpus_);
    d.missed_len = prompt_len;
    d.missed_on_chosen = prompt_len;
    return d;
  }

  ++stats_.tree_reads;
  MatchResult m = mirror_.match(req.prompt);
  d.cached_len = m.cached_len;
  d.missed_len = prompt_len - m.cached_len;

  if (d.missed_len < d.cached_len) {
    d.branch = Branch::Exploit;
    int64_t best_extent = 0;
    for (auto& [g, len] : m.per_gpu_matched_len) best_extent = std::max(best_extent, len);
    for (auto& [g, len] : m.per_gpu_matched_len) {
      if (len == best_extent) d.costs.push_back({g, cost_for(g, prompt_len - len, now)});
    }
    d.gpu = pick_min_cost(d.costs);

    auto rit = redirects_.find(d.gpu);
    if (rit != redirects_.end() && rit->second != d.gpu) {
      const GpuId target = rit->second;
      const CostBreakdown* tc = nullptr;
      for (auto& c : d.costs) {
        if (c.gpu == target) tc = &c.cost;
      }
      if (tc == nullptr) {
        d.costs.push_back({target, cost_for(target, prompt_len - m.matched_on(target), now)});
        tc = &d.costs.back().cost;
      }
      // Redirect safety: never substitute a GPU that cannot fit the request.
      if (!tc->eviction_infeasible) {
        d.redirected = true;
        d.pre_redirect_gpu = d.gpu;
        d.gpu = target;
      }
    }
  } else {
    for (GpuId g = 0; g < n_gpus_; ++g) d.decode_ratios[g] = decode_ratio(g);
    GpuId max_g = kNoGpu;
    double max_r = -1.0;
    for (auto& [g, r] : d.decode_ratios) {
      if (r > max_r) {
        max_r = r;
        max_g = g;
      }
    }
    if (policy_.pd_balance && max_r > config_.imbal_ratio) {
      // A decode-heavy GPU has prefill capacity to spare: send work there
      // regardless of cost ranking.
      d.branch = Branch::ExploreDecodePressure;
      d.gpu = max_g;
    } else {
      d.branch = Branch::Explore;
      for (GpuId g = 0; g < n_gpus_; ++g) {
        d.costs.push_back({g, cost_for(g, prompt_len - m.matched_on(g), now)});
      }
      d.gpu = pick_min_cost(d.costs);
    }
  }

  if (d.gpu < 0 || d.gpu >= n_gpus_) {
    // Exploit with no candidate GPU: some matched span is cached while an
    // ancestor span is not, so no GPU holds a root-contiguous extent. Legal
    // eviction traffic (suffixes of whole cached paths) can never produce
    // this; fail loudly instead of indexing per-GPU state with a sentinel.
    throw SimError("global_scheduler: cached spans are not root-contiguous on any GPU");
  }
  d.missed_on_chosen = prompt_len - m.matched_on(d.gpu);
  return d;
}

void GlobalScheduler::commit(const Request& req, const Decision& d, SimTime now) {
  if (policy_.mode == GlobalMode::RoundRobin) {
    ++rr_next_;
    return;
  }
  InsertResult ins = mirror_.insert(req.prompt, d.gpu, now, InsertMode::HitsOnly);
  TreeNode* first_level = ins.tail;
  while (first_level->parent != nullptr && first_level->parent->parent != nullptr) {
    first_level = first_level->parent;
  }
  gpus_[d.gpu].window.add_scheduled(now, d.missed_on_chosen, config_.default_output_len);
  gpus_[d.gpu].inflight_cached += d.cached_len;
  gpus_[d.gpu].inflight_prompt += static_cast<int64_t>(req.prompt.size());
  inflight_[req.id] = {d.gpu, d.cached_len, static_cast<int64_t>(req.prompt.size()),
                       req.arrival_ms, first_level->id};
}

Decision GlobalScheduler::schedule_request(const Request& req, SimTime now) {
  if (policy_.mode == GlobalMode::PrefixAware && policy_.rebalance && n_gpus_ > 1) {
    update_redirects(now);
  }
  Decision d = decide(req, now);
  commit(req, d, now);
  switch (d.branch) {
    case Branch::Exploit: ++stats_.exploit; break;
    case Branch::Explore: ++stats_.explore; break;
    case Branch::ExploreDecodePressure: ++stats_.decode_pressure; break;
    case Branch::RoundRobin: ++stats_.round_robin; break;
  }
  if (d.redirected) ++stats_.redirected;
  if (policy_.mode == GlobalMode::PrefixAware && policy_.autoscale) check_autoscale(now);
  return d;
}

void GlobalScheduler::update_redirects(SimTime now) {
  std::vector<double> loads(n_gpus_);
  for (GpuId g = 0; g < n_gpus_; ++g) loads[g] = gpus_[g].window.load_ms(model_, now);

  for (auto it = redirects_.begin(); it != redirects_.end();) {
    if (loads[it->first] <= config_.th_bal * loads[it->second]) {
      it = redirects_.erase(it);
    } else {
      ++it;
    }
  }

  GpuId hi = 0, lo = 0;
  for (GpuId g = 1; g < n_gpus_; ++g) {
    if (loads[g] > loads[hi]) hi = g;
    if (loads[g] < loads[lo]) lo = g;
  }
  if (hi == lo || !(loads[hi] > config_.th_bal * loads[lo])) return;
  // After the expiry pass hi cannot be a target and lo cannot be a source
  // (those entries would have ratio <= 1), so hi->lo never forms a chain.
  auto it = redirects_.find(hi);
  if (it == redirects_.end() || it->second != lo) {
    redirects_[hi] = lo;
    ++stats_.rebalance_installs;
  }
}

namespace {

int64_t subtree_tokens(const TreeNode* n) {
  int64_t total = n->token_count();
  for (auto& [tok, ch] : n->children) total += subtree_tokens(ch.get());
  return total;
}

void subtree_gpus(const TreeNode* n, std::set<GpuId>& out) {
  for (GpuId g : n->caching_gpus) out.insert(g);
  for (auto& [tok, ch] : n->children) subtree_gpus(ch.get(), out);
}

}  // namespace

void GlobalScheduler::check_autoscale(SimTime now) {
  const SimTime h = config_.history_window_ms;
  const int64_t cur = static_cast<int64_t>(std::floor(now / h));
  for (auto it = queue_stats_.begin(); it != queue_stats_.end();) {
    auto& buckets = it->second;
    while (!buckets.empty() && buckets.begin()->first < cur - 1) buckets.erase(buckets.begin());
    if (buckets.empty()) {
      it = queue_stats_.erase(it);
      continue;
    }
    bool fired = false;
    auto prev_it = buckets.find(cur - 1);
    auto cur_it = buckets.find(cur);
    if (prev_it != buckets.end() && cur_it != buckets.end() && prev_it->second.second > 0 &&
        cur_it->second.second > 0) {
      const double prev_mean = prev_it->second.first / static_cast<double>(prev_it->second.second);
      const double cur_mean = cur_it->second.first / static_cast<double>(cur_it->second.second);
      if (prev_mean > 0 && cur_mean >= 2.0 * prev_mean) {
        // Replication only applies after rebalancing was already tried: some
        // active redirect must drain a GPU that caches this prefix root.
        TreeNode* root_child = nullptr;
        for (auto& [tok, ch] : mirror_.root()->children) {
          if (ch->id == it->first) {
            root_child = ch.get();
            break;
          }
        }
        GpuId src = kNoGpu;
        if (root_child != nullptr) {
          for (auto& [s, t] : redirects_) {
            if (root_child->cached_on(s)) {
              src = s;
              break;
            }
          }
        }
        if (src != kNoGpu) {
          GpuId target = kNoGpu;
          double target_load = 0;
          for (GpuId g = 0; g < n_gpus_; ++g) {
            if (root_child->cached_on(g)) continue;
            double l = gpus_[g].window.load_ms(model_, now);
            if (target == kNoGpu || l < target_load) {
              target = g;
              target_load = l;
            }
          }
          if (target != kNoGpu) {
            replicate_prefix(root_child, target, now);
            ++stats_.autoscale_events;
            fired = true;
          }
        }
      }
    }
    if (fired) {
      it = queue_stats_.erase(it);  // fresh windows after acting
    } else {
      ++it;
    }
  }
}

void GlobalScheduler::replicate_prefix(TreeNode* root_child, GpuId target, SimTime now) {
  mirror_.mark_cached_node(root_child, target, now);

  // Split the children into two near-equal groups by recompute-weighted
  // demand; the lighter-bound group moves to the replica.
  struct Kid {
    TreeNode* node;
    double load;
  };
  std::vector<Kid> kids;
  for (auto& [tok, ch] : root_child->children) {
    const int64_t toks = subtree_tokens(ch.get());
    const int64_t hits =
        mirror_.recent_hits_all_gpus(ch.get(), now, config_.history_window_ms);
    kids.push_back({ch.get(), static_cast<double>(hits) * prefill_time(model_, toks)});
  }
  std::sort(kids.begin(), kids.end(), [](const Kid& a, const Kid& b) {
    if (a.load != b.load) return a.load > b.load;
    return a.node->id < b.node->id;
  });
  double stay_load = 0, move_load = 0;
  std::vector<TreeNode*> moving;
  for (auto& k : kids) {
    if (move_load < stay_load) {
      moving.push_back(k.node);
      move_load += k.load;
    } else {
      stay_load += k.load;
    }
  }
  for (TreeNode* n : moving) {
    std::set<GpuId> owners;
    subtree_gpus(n, owners);
    mirror_.mark_cached_subtree(n, target, now);
    // Route this group's exploit traffic only at the replica.
    for (GpuId g : owners) {
      if (g != target) mirror_.uncache_subtree(n, g);
    }
  }
}

void GlobalScheduler::note_admitted(RequestId id, SimTime now) {
  if (policy_.mode != GlobalMode::PrefixAware) return;
  auto it = inflight_.find(id);
  if (it == inflight_.end()) return;
  const int64_t bucket = static_cast<int64_t>(std::floor(now / config_.history_window_ms));
  auto& cell = queue_stats_[it->second.prefix_root][bucket];
  cell.first += now - it->second.arrival;
  cell.second += 1;
}

void GlobalScheduler::note_prefill_cached(const TokenSeq& prompt, GpuId gpu, SimTime now) {
  if (policy_.mode != GlobalMode::PrefixAware) return;
  mirror_.mark_cached_path(prompt, gpu, now);
}

void GlobalScheduler::note_eviction(const EvictedRange& range, GpuId gpu, SimTime now) {
  (void)now;
  if (policy_.mode != GlobalMode::PrefixAware) return;
  mirror_.uncache_suffix(range.seq, range.tail_len, gpu);
}

void GlobalScheduler::note_finished(RequestId id, SimTime now, int64_t output_len) {
  auto it = inflight_.find(id);
  if (it == inflight_.end()) return;
  GpuState& s = gpus_[it->second.gpu];
  s.window.add_completion(now, output_len);
  s.inflight_cached -= it->second.cached_len;
  s.inflight_prompt -= it->second.prompt_len;
  inflight_.erase(it);
}

int64_t GlobalScheduler::prune_dead_nodes(SimTime now) {
  return mirror_.remove_dead_nodes(now, config_.history_window_ms);
}

ClusterSnapshot GlobalScheduler::snapshot(SimTime now) {
  ClusterSnapshot snap;
  snap.now = now;
  snap.n_gpus = n_gpus_;
  snap.config = config_;
  snap.model = model_;
  snap.policy = policy_;
  snap.nodes = mirror_.export_nodes();
  for (GpuId g = 0; g < n_gpus_; ++g) {
    ClusterSnapshot::GpuSnap gs;
    gs.id = g;
    gs.scheduled = gpus_[g].window.snapshot_scheduled(now);
    gs.completed = gpus_[g].window.snapshot_completed(now);
    gs.inflight_cached = gpus_[g].inflight_cached;
    gs.inflight_prompt = gpus_[g].inflight_prompt;
    snap.gpus.push_back(std::move(gs));
  }
  snap.redirects = redirects_;
  return snap;
}

}  // namespace kvsched
