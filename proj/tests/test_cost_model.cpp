#include <doctest.h>

#include "kvsched/cost_model.hpp"
#include "kvsched/prefix_tree.hpp"

using namespace kvsched;

namespace {
TimeModel identity_model() {
  TimeModel m;
  m.prefill_base_ms = 0.0;
  m.prefill_per_token_ms = 1.0;
  m.decode_per_token_ms = 1.0;
  m.iteration_base_ms = 0.0;
  return m;
}
}  // namespace

TEST_CASE("prefill time is linear with a hard zero at zero missed tokens") {
  TimeModel m;
  m.prefill_base_ms = 5.0;
  m.prefill_per_token_ms = 0.1;
  CHECK(prefill_time(m, 0) == 0.0);
  CHECK(prefill_time(m, 1000) == doctest::Approx(105.0));
  for (int64_t n = 1; n < 50; ++n) CHECK(prefill_time(m, n + 1) > prefill_time(m, n));
}

TEST_CASE("decode time is linear and additive") {
  TimeModel m;
  m.decode_per_token_ms = 2.0;
  CHECK(decode_time(m, 0) == 0.0);
  CHECK(decode_time(m, 20) == doctest::Approx(40.0));
  CHECK(decode_time(m, 7) + decode_time(m, 13) == doctest::Approx(decode_time(m, 20)));
}

TEST_CASE("iteration time charges base, prefill tokens and decode count") {
  TimeModel m;  // defaults: c0=5, c1=0.25, c2=15, c3=8
  CHECK(iteration_time(m, 100, 3) == doctest::Approx(8 + 25 + 45));
  CHECK(iteration_time(m, 0, 0) == doctest::Approx(8.0));
}

TEST_CASE("window prunes on the inclusive horizon boundary") {
  LoadWindow w(180000.0, 32);
  w.add_scheduled(0.0, 100, 32);       // lands exactly at now-H
  w.add_scheduled(1000.0, 50, 32);
  CHECK(w.scheduled_count(180000.0) == 2);   // boundary entry included
  CHECK(w.scheduled_count(181000.0) == 1);   // now the first is 181s old: out
  // A fresh window whose only entry is 181s old with H=180s sees nothing.
  LoadWindow w2(180000.0, 32);
  w2.add_scheduled(0.0, 100, 32);
  CHECK(w2.scheduled_count(181000.0) == 0);
}

TEST_CASE("average output length falls back to the configured default") {
  LoadWindow w(1000.0, 32);
  CHECK(w.avg_output_len(0.0) == 32.0);
  w.add_completion(10.0, 10);
  w.add_completion(20.0, 30);
  CHECK(w.avg_output_len(25.0) == doctest::Approx(20.0));
  // Completions age out; the default returns.
  CHECK(w.avg_output_len(5000.0) == 32.0);
}

TEST_CASE("empty window, fully cached request costs nothing") {
  PrefixTree mirror;
  LoadWindow w(180000.0, 32);
  TimeModel m;
  auto cost = load_cost(mirror, w, 0, 1000, 0, m, 100.0);
  CHECK(cost.current_load_ms == 0.0);
  CHECK(cost.eviction_ms == 0.0);
  CHECK(cost.prefill_ms == 0.0);
  CHECK(cost.total_ms() == 0.0);
  CHECK(!cost.eviction_infeasible);
}

// Identity-coefficient worked example, hand-executed from the pseudocode.
// One windowed request, missed 200, avg output 20: L = PT(200)+DT(20) = 220.
// Predicted eviction of one 50-token node shared by the single windowed
// request: N = 1/1, M = PT(50) = 50. New request missed 30: P = 30.
TEST_CASE("load cost with one windowed request") {
  TimeModel m = identity_model();
  PrefixTree mirror;
  TokenSeq cached(50);
  for (int i = 0; i < 50; ++i) cached[i] = 100 + i;
  mirror.insert(cached, 0, 10.0, InsertMode::MarkCached);

  LoadWindow w(180000.0, /*default output*/ 20);
  w.add_scheduled(10.0, 200, 20);

  // Capacity 50, fully used: missed 30 forces a predicted eviction, and the
  // whole 50-token node is charged even though only 30 tokens are needed.
  auto cost = load_cost(mirror, w, 0, 50, 30, m, 20.0);
  CHECK(cost.current_load_ms == doctest::Approx(220.0));
  CHECK(cost.eviction_ms == doctest::Approx(50.0));
  CHECK(cost.prefill_ms == doctest::Approx(30.0));
  CHECK(cost.total_ms() == doctest::Approx(300.0));
  CHECK(!cost.eviction_infeasible);
}

// Same state plus a second, fully cached windowed request: its entry adds
// only the decode term (PT(0)=0), so L = 220 + 20 = 240, and the eviction
// victim is now shared by 1 of 2 windowed requests: M = 50 * 1/2 = 25.
TEST_CASE("load cost with a second fully cached windowed request") {
  TimeModel m = identity_model();
  PrefixTree mirror;
  TokenSeq cached(50);
  for (int i = 0; i < 50; ++i) cached[i] = 100 + i;
  mirror.insert(cached, 0, 10.0, InsertMode::MarkCached);

  LoadWindow w(180000.0, 20);
  w.add_scheduled(10.0, 200, 20);   // this one shares the cached node
  w.add_scheduled(15.0, 0, 20);     // fully cached elsewhere in the tree

  auto cost = load_cost(mirror, w, 0, 50, 30, m, 20.0);
  CHECK(cost.current_load_ms == doctest::Approx(240.0));
  CHECK(cost.eviction_ms == doctest::Approx(25.0));
  CHECK(cost.prefill_ms == doctest::Approx(30.0));
  CHECK(cost.total_ms() == doctest::Approx(295.0));
}

TEST_CASE("no eviction cost while free capacity admits the missed tokens") {
  TimeModel m = identity_model();
  PrefixTree mirror;
  mirror.insert({1, 2, 3}, 0, 1.0, InsertMode::MarkCached);
  LoadWindow w(180000.0, 20);
  w.add_scheduled(1.0, 10, 20);
  auto cost = load_cost(mirror, w, 0, /*capacity*/ 100, /*missed*/ 97, m, 2.0);
  CHECK(cost.eviction_ms == 0.0);
  CHECK(!cost.eviction_infeasible);
  // One more missed token and the cached node must go.
  cost = load_cost(mirror, w, 0, 100, 98, m, 2.0);
  CHECK(cost.eviction_ms > 0.0);
}

TEST_CASE("infeasible eviction flags the GPU and still prices what it can free") {
  TimeModel m = identity_model();
  PrefixTree mirror;
  mirror.insert({1, 2, 3, 4, 5}, 0, 1.0, InsertMode::MarkCached);  // 5 evictable tokens
  LoadWindow w(180000.0, 20);
  w.add_scheduled(1.0, 10, 20);
  // capacity 20, cached 5, missed 150: even evicting everything leaves it short.
  auto cost = load_cost(mirror, w, 0, 20, 150, m, 2.0);
  CHECK(cost.eviction_infeasible);
  CHECK(cost.eviction_ms == doctest::Approx(5.0));  // PT(5) * 1/1
}

TEST_CASE("load cost is pure: identical state gives identical bits") {
  TimeModel m;
  PrefixTree mirror;
  mirror.insert({1, 2, 3, 4, 5, 6, 7}, 1, 3.0, InsertMode::MarkCached);
  LoadWindow w(180000.0, 32);
  w.add_scheduled(5.0, 123, 32);
  w.add_scheduled(9.0, 0, 32);
  w.add_completion(11.0, 17);
  auto a = load_cost(mirror, w, 1, 7, 64, m, 12.0);
  auto b = load_cost(mirror, w, 1, 7, 64, m, 12.0);
  CHECK(a.current_load_ms == b.current_load_ms);
  CHECK(a.eviction_ms == b.eviction_ms);
  CHECK(a.prefill_ms == b.prefill_ms);
  CHECK(a.eviction_infeasible == b.eviction_infeasible);
}

TEST_CASE("window load is monotone in entries and missed tokens") {
  TimeModel m;
  LoadWindow w(180000.0, 32);
  double prev = w.load_ms(m, 0.0);
  for (int i = 1; i <= 10; ++i) {
    w.add_scheduled(static_cast<SimTime>(i), 10 * i, 32);
    double cur = w.load_ms(m, static_cast<SimTime>(i));
    CHECK(cur > prev);
    prev = cur;
  }
  LoadWindow small(180000.0, 32), big(180000.0, 32);
  small.add_scheduled(1.0, 10, 32);
  big.add_scheduled(1.0, 200, 32);
  CHECK(big.load_ms(m, 1.0) > small.load_ms(m, 1.0));
}
