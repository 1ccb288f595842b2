#include "oracle/reference_scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace kvsched::oracle {

namespace {

double ref_prefill_time(const TimeModel& model, int64_t missed) {
  if (missed <= 0) return 0.0;
  return model.prefill_base_ms + model.prefill_per_token_ms * static_cast<double>(missed);
}

const ClusterSnapshot::GpuSnap& gpu_snap(const ClusterSnapshot& snap, GpuId gpu) {
  for (const auto& g : snap.gpus) {
    if (g.id == gpu) return g;
  }
  throw SimError("reference: snapshot missing gpu");
}

// Window load L: sum of PT(missed) over scheduled entries plus one DT(mean
// completed output) per scheduled entry; the mean falls back to the
// configured default when nothing completed inside the window.
double ref_window_load(const ClusterSnapshot& snap, GpuId gpu) {
  const auto& g = gpu_snap(snap, gpu);
  const SimTime cutoff = snap.now - snap.config.history_window_ms;
  int64_t missed_sum = 0;
  int64_t missed_nonzero = 0;
  int64_t sched_count = 0;
  for (const auto& e : g.scheduled) {
    if (e.t < cutoff) continue;
    ++sched_count;
    missed_sum += e.missed;
    if (e.missed > 0) ++missed_nonzero;
  }
  int64_t output_sum = 0;
  int64_t completed = 0;
  for (const auto& c : g.completed) {
    if (c.t < cutoff) continue;
    ++completed;
    output_sum += c.output;
  }
  double avg_output = completed == 0
                          ? static_cast<double>(snap.config.default_output_len)
                          : static_cast<double>(output_sum) / static_cast<double>(completed);
  double prefill = snap.model.prefill_base_ms * static_cast<double>(missed_nonzero) +
                   snap.model.prefill_per_token_ms * static_cast<double>(missed_sum);
  double decode = static_cast<double>(sched_count) *
                  (snap.model.decode_per_token_ms * avg_output);
  return prefill + decode;
}

int64_t ref_scheduled_count(const ClusterSnapshot& snap, GpuId gpu) {
  const auto& g = gpu_snap(snap, gpu);
  const SimTime cutoff = snap.now - snap.config.history_window_ms;
  int64_t count = 0;
  for (const auto& e : g.scheduled) {
    if (e.t >= cutoff) ++count;
  }
  return count;
}

int64_t matched_on(const RefMatch& m, GpuId gpu) {
  auto it = m.per_gpu_matched_len.find(gpu);
  return it == m.per_gpu_matched_len.end() ? 0 : it->second;
}

GpuId ref_pick_min(const std::vector<std::pair<GpuId, RefCost>>& costs) {
  GpuId best = kNoGpu;
  double best_total = 0;
  for (const auto& [g, c] : costs) {
    if (c.eviction_infeasible) continue;
    if (best == kNoGpu || c.total() < best_total) {
      best = g;
      best_total = c.total();
    }
  }
  if (best != kNoGpu) return best;
  for (const auto& [g, c] : costs) {
    if (best == kNoGpu || c.total() < best_total) {
      best = g;
      best_total = c.total();
    }
  }
  return best;
}

// Redirect upkeep: drop entries whose source load fell back within Th_bal of
// the target, then install max->min when the spread still exceeds Th_bal.
std::map<GpuId, GpuId> ref_update_redirects(const ClusterSnapshot& snap) {
  std::map<GpuId, GpuId> redirects = snap.redirects;
  std::vector<double> loads(snap.n_gpus);
  for (GpuId g = 0; g < snap.n_gpus; ++g) loads[g] = ref_window_load(snap, g);

  for (auto it = redirects.begin(); it != redirects.end();) {
    if (loads[it->first] <= snap.config.th_bal * loads[it->second]) {
      it = redirects.erase(it);
    } else {
      ++it;
    }
  }
  GpuId hi = 0, lo = 0;
  for (GpuId g = 1; g < snap.n_gpus; ++g) {
    if (loads[g] > loads[hi]) hi = g;
    if (loads[g] < loads[lo]) lo = g;
  }
  if (hi == lo || !(loads[hi] > snap.config.th_bal * loads[lo])) return redirects;
  auto it = redirects.find(hi);
  if (it == redirects.end() || it->second != lo) redirects[hi] = lo;
  return redirects;
}

}  // namespace

RefCost ref_load_cost(const ClusterSnapshot& snap, const RefTree& tree, GpuId gpu,
                      int64_t missed_tokens) {
  RefCost cost;
  cost.current_load_ms = ref_window_load(snap, gpu);
  cost.prefill_ms = ref_prefill_time(snap.model, missed_tokens);

  const int64_t free_tokens = snap.config.kv_capacity_tokens - tree.cached_tokens(gpu);
  const int64_t need = missed_tokens - free_tokens;
  if (need > 0) {
    auto plan = tree.plan_eviction(gpu, need, {}, /*allow_partial_tail=*/false);
    int64_t freed = 0;
    for (const auto& [id, tokens] : plan) freed += tokens;
    cost.eviction_infeasible = freed < need;
    const int64_t total = ref_scheduled_count(snap, gpu);
    if (total > 0) {
      for (const auto& [id, tokens] : plan) {
        const int64_t sharers =
            tree.hits_in_window(id, gpu, snap.now, snap.config.history_window_ms);
        const double n_j = static_cast<double>(sharers) / static_cast<double>(total);
        cost.eviction_ms += ref_prefill_time(snap.model, tokens) * n_j;
      }
    }
  }
  return cost;
}

RefDecision ref_schedule(const ClusterSnapshot& snap, const TokenSeq& prompt) {
  RefTree tree(snap.nodes);
  RefDecision d;
  const int64_t prompt_len = static_cast<int64_t>(prompt.size());

  std::map<GpuId, GpuId> redirects = snap.redirects;
  if (snap.policy.mode == GlobalMode::PrefixAware && snap.policy.rebalance && snap.n_gpus > 1) {
    redirects = ref_update_redirects(snap);
  }

  RefMatch m = tree.match(prompt);
  d.cached_len = m.cached_len;
  d.missed_len = prompt_len - m.cached_len;

  if (d.missed_len < d.cached_len) {
    d.branch = Branch::Exploit;
    int64_t best_extent = 0;
    for (const auto& [g, len] : m.per_gpu_matched_len) {
      if (len > best_extent) best_extent = len;
    }
    for (const auto& [g, len] : m.per_gpu_matched_len) {
      if (len == best_extent) {
        d.costs.emplace_back(g, ref_load_cost(snap, tree, g, prompt_len - len));
      }
    }
    d.gpu = ref_pick_min(d.costs);

    auto rit = redirects.find(d.gpu);
    if (rit != redirects.end() && rit->second != d.gpu) {
      const GpuId target = rit->second;
      const RefCost* tc = nullptr;
      for (const auto& [g, c] : d.costs) {
        if (g == target) tc = &c;
      }
      if (tc == nullptr) {
        d.costs.emplace_back(target,
                             ref_load_cost(snap, tree, target, prompt_len - matched_on(m, target)));
        tc = &d.costs.back().second;
      }
      if (!tc->eviction_infeasible) {
        d.redirected = true;
        d.pre_redirect_gpu = d.gpu;
        d.gpu = target;
      }
    }
  } else {
    for (GpuId g = 0; g < snap.n_gpus; ++g) {
      const auto& gs = gpu_snap(snap, g);
      d.decode_ratios[g] = gs.inflight_prompt <= 0
                               ? 0.0
                               : static_cast<double>(gs.inflight_cached) /
                                     static_cast<double>(gs.inflight_prompt);
    }
    GpuId max_g = kNoGpu;
    double max_r = -1.0;
    for (const auto& [g, r] : d.decode_ratios) {
      if (r > max_r) {
        max_r = r;
        max_g = g;
      }
    }
    if (snap.policy.pd_balance && max_r > snap.config.imbal_ratio) {
      d.branch = Branch::ExploreDecodePressure;
      d.gpu = max_g;
    } else {
      d.branch = Branch::Explore;
      for (GpuId g = 0; g < snap.n_gpus; ++g) {
        d.costs.emplace_back(g, ref_load_cost(snap, tree, g, prompt_len - matched_on(m, g)));
      }
      d.gpu = ref_pick_min(d.costs);
    }
  }

  d.missed_on_chosen = prompt_len - matched_on(m, d.gpu);
  return d;
}

namespace {

template <typename T>
T pick(std::mt19937_64& rng, std::initializer_list<T> options) {
  std::vector<T> v(options);
  return v[rng() % v.size()];
}

bool same_cost(const CostBreakdown& got, const RefCost& want) {
  return got.current_load_ms == want.current_load_ms && got.eviction_ms == want.eviction_ms &&
         got.prefill_ms == want.prefill_ms && got.eviction_infeasible == want.eviction_infeasible;
}

std::string diff_decision(const Decision& got, const RefDecision& want) {
  std::ostringstream out;
  if (got.branch != want.branch) {
    out << "branch " << branch_name(got.branch) << " != " << branch_name(want.branch) << "; ";
  }
  if (got.gpu != want.gpu) out << "gpu " << got.gpu << " != " << want.gpu << "; ";
  if (got.redirected != want.redirected) out << "redirected; ";
  if (got.pre_redirect_gpu != want.pre_redirect_gpu) out << "pre_redirect_gpu; ";
  if (got.cached_len != want.cached_len) {
    out << "cached_len " << got.cached_len << " != " << want.cached_len << "; ";
  }
  if (got.missed_len != want.missed_len) out << "missed_len; ";
  if (got.missed_on_chosen != want.missed_on_chosen) out << "missed_on_chosen; ";
  if (got.costs.size() != want.costs.size()) {
    out << "cost count " << got.costs.size() << " != " << want.costs.size() << "; ";
  } else {
    for (size_t i = 0; i < got.costs.size(); ++i) {
      if (got.costs[i].gpu != want.costs[i].first ||
          !same_cost(got.costs[i].cost, want.costs[i].second)) {
        out << "cost[" << i << "] gpu " << got.costs[i].gpu << "; ";
      }
    }
  }
  if (got.decode_ratios.size() != want.decode_ratios.size()) {
    out << "ratio count; ";
  } else {
    auto it = want.decode_ratios.begin();
    for (const auto& [g, r] : got.decode_ratios) {
      if (g != it->first || r != it->second) out << "ratio gpu " << g << "; ";
      ++it;
    }
  }
  return out.str();
}

}  // namespace

FidelityOutcome run_scheduler_fidelity(int cases, uint64_t seed) {
  FidelityOutcome out;
  for (int case_i = 0; case_i < cases; ++case_i) {
    std::mt19937_64 rng(seed * 1000003 + static_cast<uint64_t>(case_i));
    const int n_gpus = 2 + static_cast<int>(rng() % 3);

    SchedulerConfig cfg;
    cfg.history_window_ms = pick(rng, {600.0, 3000.0, 20000.0});
    cfg.imbal_ratio = pick(rng, {0.5, 0.9});
    cfg.kv_capacity_tokens = pick<int64_t>(rng, {120, 300, 900, 4000});
    cfg.default_output_len = pick<int64_t>(rng, {8, 32});
    TimeModel model;
    model.prefill_base_ms = pick(rng, {0.0, 4.0, 5.0});
    model.prefill_per_token_ms = pick(rng, {0.25, 0.5, 1.0});
    model.decode_per_token_ms = pick(rng, {1.0, 8.0, 15.0});
    GlobalPolicy pol;
    pol.rebalance = rng() % 2 == 0;
    pol.autoscale = rng() % 2 == 0;
    pol.pd_balance = rng() % 2 == 0;

    GlobalScheduler sched(n_gpus, cfg, model, pol);
    ++out.cases;

    const int n_stems = 2 + static_cast<int>(rng() % 4);
    std::vector<TokenSeq> stems;
    for (int s = 0; s < n_stems; ++s) {
      TokenSeq stem;
      const int len = 4 + static_cast<int>(rng() % 37);
      for (int j = 0; j < len; ++j) stem.push_back((s + 1) * 1000 + j);
      stems.push_back(std::move(stem));
    }

    struct Live {
      RequestId id;
      TokenSeq prompt;
      GpuId gpu;
    };
    std::vector<Live> live;
    std::vector<std::pair<TokenSeq, GpuId>> cached_paths;
    std::vector<TokenSeq> issued;
    SimTime t = 0;
    RequestId next_id = 1;
    int32_t unique_next = 9000000;

    const int ops = 12 + static_cast<int>(rng() % 24);
    for (int op = 0; op < ops; ++op) {
      t += 1.0 + static_cast<double>(rng() % 1000) / 10.0;
      const uint64_t roll = rng() % 100;
      if (roll < 55 || live.empty()) {
        TokenSeq prompt;
        if (!issued.empty() && rng() % 100 < 25) {
          prompt = issued[rng() % issued.size()];  // exact repeat: exploit fodder
        } else {
          const TokenSeq& stem = stems[rng() % stems.size()];
          size_t take = rng() % 100 < 70 ? stem.size() : 1 + rng() % stem.size();
          prompt.assign(stem.begin(), stem.begin() + take);
          if (rng() % 2 == 0) {
            const int extra = 1 + static_cast<int>(rng() % 15);
            for (int j = 0; j < extra; ++j) prompt.push_back(unique_next++);
          }
        }

        ClusterSnapshot snap = sched.snapshot(t);
        if (snap.nodes.size() > 101) {
          ++out.mismatches;
          if (out.first_mismatch.empty()) out.first_mismatch = "tree grew past 100 nodes";
          break;
        }
        RefDecision want = ref_schedule(snap, prompt);
        Request req;
        req.id = next_id;
        req.prompt = prompt;
        req.output_len = 1 + static_cast<int64_t>(rng() % 40);
        req.arrival_ms = t;
        Decision got = sched.schedule_request(req, t);
        ++out.decisions;
        if (got.branch == Branch::Exploit) ++out.exploit_checked;
        if (got.branch == Branch::ExploreDecodePressure) ++out.pressure_checked;
        if (got.redirected) ++out.redirected_checked;
        for (const auto& c : got.costs) {
          if (c.cost.eviction_infeasible) ++out.infeasible_checked;
        }
        std::string diff = diff_decision(got, want);
        if (!diff.empty()) {
          ++out.mismatches;
          if (out.first_mismatch.empty()) {
            std::ostringstream msg;
            msg << "case " << case_i << " op " << op << ": " << diff;
            out.first_mismatch = msg.str();
          }
        }
        live.push_back({next_id, prompt, got.gpu});
        issued.push_back(prompt);
        ++next_id;
      } else if (roll < 70) {
        const size_t i = rng() % live.size();
        sched.note_admitted(live[i].id, t);
        sched.note_prefill_cached(live[i].prompt, live[i].gpu, t);
        cached_paths.emplace_back(live[i].prompt, live[i].gpu);
      } else if (roll < 85) {
        const size_t i = rng() % live.size();
        sched.note_finished(live[i].id, t, 1 + static_cast<int64_t>(rng() % 40));
        live.erase(live.begin() + static_cast<ptrdiff_t>(i));
      } else if (!cached_paths.empty()) {
        // Real evictions clear LRU leaves first, so a node never stays cached
        // after its ancestor is dropped. Restrict the random range to the part
        // of this path below its deepest branch point with any other cached
        // path on the same GPU, or the mirror would enter unreachable states.
        const size_t i = rng() % cached_paths.size();
        const TokenSeq seq = cached_paths[i].first;
        const GpuId gpu = cached_paths[i].second;
        size_t shared = 0;
        for (size_t j = 0; j < cached_paths.size(); ++j) {
          if (j == i || cached_paths[j].second != gpu) continue;
          const TokenSeq& other = cached_paths[j].first;
          if (other == seq) continue;  // same path, no branch point between them
          size_t lcp = 0;
          while (lcp < seq.size() && lcp < other.size() && seq[lcp] == other[lcp]) ++lcp;
          shared = std::max(shared, lcp);
        }
        if (shared < seq.size()) {
          const int64_t avail = static_cast<int64_t>(seq.size() - shared);
          EvictedRange range;
          range.seq = seq;
          range.tail_len = 1 + static_cast<int64_t>(rng() % static_cast<uint64_t>(avail));
          sched.note_eviction(range, gpu, t);
          const size_t remain = seq.size() - static_cast<size_t>(range.tail_len);
          if (remain == 0) {
            cached_paths.erase(cached_paths.begin() + static_cast<ptrdiff_t>(i));
          } else {
            cached_paths[i].first.resize(remain);
          }
        }
      }
    }

    // Standalone cost probes, including missed totals past capacity so the
    // infeasible flag gets exercised.
    ClusterSnapshot snap = sched.snapshot(t);
    RefTree tree(snap.nodes);
    for (GpuId g = 0; g < n_gpus; ++g) {
      for (int64_t missed : {int64_t{0}, int64_t{1}, int64_t{7},
                             static_cast<int64_t>(rng() % (2 * cfg.kv_capacity_tokens))}) {
        LoadWindow window(cfg.history_window_ms, cfg.default_output_len);
        for (const auto& e : snap.gpus[g].scheduled) {
          window.add_scheduled(e.t, e.missed, e.est_output);
        }
        for (const auto& c : snap.gpus[g].completed) window.add_completion(c.t, c.output);
        CostBreakdown got =
            load_cost(sched.mirror(), window, g, cfg.kv_capacity_tokens, missed, model, t);
        RefCost want = ref_load_cost(snap, tree, g, missed);
        ++out.cost_probes;
        if (got.eviction_infeasible) ++out.infeasible_checked;
        if (!same_cost(got, want)) {
          ++out.mismatches;
          if (out.first_mismatch.empty()) {
            std::ostringstream msg;
            msg << "case " << case_i << " cost probe gpu " << g << " missed " << missed;
            out.first_mismatch = msg.str();
          }
        }
      }
    }
  }
  return out;
}

}  // namespace kvsched::oracle
