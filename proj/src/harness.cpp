#include "kvsched/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace kvsched {

namespace {

using nlohmann::json;

[[noreturn]] void config_fail(const std::string& context, const std::string& detail) {
    throw ConfigError("config " + context + ": " + detail);
}

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& context) {
    if (!j.is_object()) config_fail(context, "expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
            config_fail(context, "unknown key '" + it.key() + "'");
        }
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& context) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        config_fail(context, std::string("bad value for '") + key + "': " + e.what());
    }
}

LenRange read_len_range(const json& j, const char* key, LenRange fallback,
                        const std::string& context) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (v.is_number_integer()) {
        int64_t n = v.get<int64_t>();
        return {n, n};
    }
    if (v.is_array() && v.size() == 2 && v[0].is_number_integer() && v[1].is_number_integer()) {
        return {v[0].get<int64_t>(), v[1].get<int64_t>()};
    }
    config_fail(context, std::string("'") + key + "' must be an integer or [min, max]");
}

json len_range_json(const LenRange& r) { return json::array({r.min, r.max}); }

const char* order_name(LocalOrder o) {
    switch (o) {
        case LocalOrder::PriorityGroups: return "priority_groups";
        case LocalOrder::Fcfs: return "fcfs";
        case LocalOrder::LongestPrefixFirst: return "longest_prefix_first";
    }
    return "priority_groups";
}

std::optional<LocalOrder> order_from_name(const std::string& name) {
    for (LocalOrder o :
         {LocalOrder::PriorityGroups, LocalOrder::Fcfs, LocalOrder::LongestPrefixFirst}) {
        if (name == order_name(o)) return o;
    }
    return std::nullopt;
}

json dist_json(const DistStats& d) {
    json j;
    j["count"] = d.count;
    j["mean"] = d.mean;
    j["p50"] = d.p50;
    j["p99"] = d.p99;
    j["min"] = d.min;
    j["max"] = d.max;
    return j;
}

DistStats dist_from_json(const json& j) {
    DistStats d;
    j.at("count").get_to(d.count);
    j.at("mean").get_to(d.mean);
    j.at("p50").get_to(d.p50);
    j.at("p99").get_to(d.p99);
    j.at("min").get_to(d.min);
    j.at("max").get_to(d.max);
    return d;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

} // namespace

const char* policy_name(PolicyName p) {
    switch (p) {
        case PolicyName::E2Full: return "e2_full";
        case PolicyName::E2NoRebalance: return "e2_no_rebalance";
        case PolicyName::E2NoPdBalance: return "e2_no_pd_balance";
        case PolicyName::E2FcfsLocal: return "e2_fcfs_local";
        case PolicyName::RoundRobin: return "round_robin";
        case PolicyName::LongestPrefixFirstLocal: return "longest_prefix_first_local";
    }
    return "e2_full";
}

std::optional<PolicyName> policy_from_name(const std::string& name) {
    for (PolicyName p : all_policies()) {
        if (name == policy_name(p)) return p;
    }
    return std::nullopt;
}

std::vector<PolicyName> all_policies() {
    return {PolicyName::E2Full,     PolicyName::E2NoRebalance, PolicyName::E2NoPdBalance,
            PolicyName::E2FcfsLocal, PolicyName::RoundRobin,    PolicyName::LongestPrefixFirstLocal};
}

PolicyChoice resolve_policy(PolicyName p) {
    PolicyChoice c;
    c.global.mode = GlobalMode::PrefixAware;
    c.global.rebalance = true;
    c.global.autoscale = true;
    c.global.pd_balance = true;
    c.local_order = LocalOrder::PriorityGroups;
    switch (p) {
        case PolicyName::E2Full:
            break;
        case PolicyName::E2NoRebalance:
            // Replication triggers ride on redirects, so it goes dark too.
            c.global.rebalance = false;
            c.global.autoscale = false;
            break;
        case PolicyName::E2NoPdBalance:
            c.global.pd_balance = false;
            break;
        case PolicyName::E2FcfsLocal:
            c.local_order = LocalOrder::Fcfs;
            break;
        case PolicyName::RoundRobin:
            // Baseline: blind distribution, per-GPU caching, FCFS admission.
            c.global.mode = GlobalMode::RoundRobin;
            c.global.rebalance = false;
            c.global.autoscale = false;
            c.global.pd_balance = false;
            c.local_order = LocalOrder::Fcfs;
            break;
        case PolicyName::LongestPrefixFirstLocal:
            // Baseline: blind distribution, each GPU serving its highest-sharing
            // request first.
            c.global.mode = GlobalMode::RoundRobin;
            c.global.rebalance = false;
            c.global.autoscale = false;
            c.global.pd_balance = false;
            c.local_order = LocalOrder::LongestPrefixFirst;
            break;
    }
    return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig cfg;
    check_keys(j,
               {"name", "seed", "rps", "policy", "n_gpus", "iteration_trace", "model", "scheduler",
                "local", "workload", "corpus", "trace"},
               "(top level)");
    read_field(j, "name", cfg.name, "(top level)");
    read_field(j, "seed", cfg.seed, "(top level)");
    read_field(j, "rps", cfg.rps, "(top level)");
    read_field(j, "n_gpus", cfg.sim.n_gpus, "(top level)");
    read_field(j, "iteration_trace", cfg.sim.iteration_trace, "(top level)");
    read_field(j, "corpus", cfg.corpus_path, "(top level)");
    read_field(j, "trace", cfg.trace_path, "(top level)");
    if (j.contains("policy")) {
        std::string name;
        read_field(j, "policy", name, "(top level)");
        auto p = policy_from_name(name);
        if (!p) config_fail("(top level)", "unknown policy '" + name + "'");
        cfg.policy = *p;
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m,
                   {"prefill_base_ms", "prefill_per_token_ms", "decode_per_token_ms",
                    "iteration_base_ms"},
                   "model");
        read_field(m, "prefill_base_ms", cfg.sim.model.prefill_base_ms, "model");
        read_field(m, "prefill_per_token_ms", cfg.sim.model.prefill_per_token_ms, "model");
        read_field(m, "decode_per_token_ms", cfg.sim.model.decode_per_token_ms, "model");
        read_field(m, "iteration_base_ms", cfg.sim.model.iteration_base_ms, "model");
    }
    if (j.contains("scheduler")) {
        const json& s = j.at("scheduler");
        check_keys(s,
                   {"history_window_ms", "th_bal", "imbal_ratio", "priority_groups",
                    "kv_capacity_tokens", "default_output_len"},
                   "scheduler");
        read_field(s, "history_window_ms", cfg.sim.scheduler.history_window_ms, "scheduler");
        read_field(s, "th_bal", cfg.sim.scheduler.th_bal, "scheduler");
        read_field(s, "imbal_ratio", cfg.sim.scheduler.imbal_ratio, "scheduler");
        read_field(s, "priority_groups", cfg.sim.scheduler.priority_groups, "scheduler");
        read_field(s, "kv_capacity_tokens", cfg.sim.scheduler.kv_capacity_tokens, "scheduler");
        read_field(s, "default_output_len", cfg.sim.scheduler.default_output_len, "scheduler");
    }
    if (j.contains("local")) {
        const json& l = j.at("local");
        check_keys(l, {"max_batch_requests", "chunk_size", "iteration_token_budget", "order"},
                   "local");
        read_field(l, "max_batch_requests", cfg.sim.max_batch_requests, "local");
        read_field(l, "chunk_size", cfg.sim.chunk_size, "local");
        read_field(l, "iteration_token_budget", cfg.sim.iteration_token_budget, "local");
        if (l.contains("order")) {
            std::string name;
            read_field(l, "order", name, "local");
            auto o = order_from_name(name);
            if (!o) config_fail("local", "unknown order '" + name + "'");
            cfg.sim.local_order = *o;
        }
    }
    if (j.contains("workload")) {
        const json& w = j.at("workload");
        check_keys(w,
                   {"archetype", "request_count", "system_prompt_len", "branch_count", "branch_len",
                    "popularity", "zipf_s", "unique_suffix_len", "output_len", "requests_per_group",
                    "chain_mean_len", "observation_len", "target_ratio", "target_shared_fraction"},
                   "workload");
        Archetype a = Archetype::Custom;
        if (w.contains("archetype")) {
            std::string name;
            read_field(w, "archetype", name, "workload");
            auto found = archetype_from_name(name);
            if (!found) config_fail("workload", "unknown archetype '" + name + "'");
            a = *found;
        }
        WorkloadSpec spec = WorkloadSpec::archetype_default(a);
        read_field(w, "request_count", spec.request_count, "workload");
        read_field(w, "system_prompt_len", spec.system_prompt_len, "workload");
        read_field(w, "branch_count", spec.branch_count, "workload");
        read_field(w, "branch_len", spec.branch_len, "workload");
        if (w.contains("popularity")) {
            std::string name;
            read_field(w, "popularity", name, "workload");
            if (name == "uniform") {
                spec.popularity = Popularity::Uniform;
            } else if (name == "zipf") {
                spec.popularity = Popularity::Zipf;
            } else {
                config_fail("workload", "unknown popularity '" + name + "'");
            }
        }
        read_field(w, "zipf_s", spec.zipf_s, "workload");
        spec.unique_suffix_len =
            read_len_range(w, "unique_suffix_len", spec.unique_suffix_len, "workload");
        spec.output_len = read_len_range(w, "output_len", spec.output_len, "workload");
        read_field(w, "requests_per_group", spec.requests_per_group, "workload");
        read_field(w, "chain_mean_len", spec.chain_mean_len, "workload");
        read_field(w, "observation_len", spec.observation_len, "workload");
        read_field(w, "target_ratio", spec.target_ratio, "workload");
        read_field(w, "target_shared_fraction", spec.target_shared_fraction, "workload");
        cfg.workload = spec;
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open for reading: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return from_json(j);
}

json ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["seed"] = seed;
    j["rps"] = rps;
    j["policy"] = policy_name(policy);
    j["n_gpus"] = sim.n_gpus;
    j["iteration_trace"] = sim.iteration_trace;
    if (!corpus_path.empty()) j["corpus"] = corpus_path;
    if (!trace_path.empty()) j["trace"] = trace_path;
    j["model"] = {{"prefill_base_ms", sim.model.prefill_base_ms},
                  {"prefill_per_token_ms", sim.model.prefill_per_token_ms},
                  {"decode_per_token_ms", sim.model.decode_per_token_ms},
                  {"iteration_base_ms", sim.model.iteration_base_ms}};
    j["scheduler"] = {{"history_window_ms", sim.scheduler.history_window_ms},
                      {"th_bal", sim.scheduler.th_bal},
                      {"imbal_ratio", sim.scheduler.imbal_ratio},
                      {"priority_groups", sim.scheduler.priority_groups},
                      {"kv_capacity_tokens", sim.scheduler.kv_capacity_tokens},
                      {"default_output_len", sim.scheduler.default_output_len}};
    j["local"] = {{"max_batch_requests", sim.max_batch_requests},
                  {"chunk_size", sim.chunk_size},
                  {"iteration_token_budget", sim.iteration_token_budget},
                  {"order", order_name(sim.local_order)}};
    j["workload"] = {{"archetype", archetype_name(workload.archetype)},
                     {"request_count", workload.request_count},
                     {"system_prompt_len", workload.system_prompt_len},
                     {"branch_count", workload.branch_count},
                     {"branch_len", workload.branch_len},
                     {"popularity", workload.popularity == Popularity::Zipf ? "zipf" : "uniform"},
                     {"zipf_s", workload.zipf_s},
                     {"unique_suffix_len", len_range_json(workload.unique_suffix_len)},
                     {"output_len", len_range_json(workload.output_len)},
                     {"requests_per_group", workload.requests_per_group},
                     {"chain_mean_len", workload.chain_mean_len},
                     {"observation_len", workload.observation_len},
                     {"target_ratio", workload.target_ratio},
                     {"target_shared_fraction", workload.target_shared_fraction}};
    return j;
}

std::string corpus_fingerprint(const Corpus& corpus) {
    // FNV-1a over the content that defines the workload (ids, prompts,
    // output lengths); arrivals are a separate experiment axis.
    uint64_t h = 14695981039346656037ULL;
    auto mix = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (i * 8)) & 0xff;
            h *= 1099511628211ULL;
        }
    };
    mix(static_cast<uint64_t>(corpus.size()));
    for (const CorpusEntry& e : corpus) {
        mix(static_cast<uint64_t>(e.id));
        mix(static_cast<uint64_t>(e.prompt.size()));
        for (TokenId t : e.prompt) mix(static_cast<uint64_t>(static_cast<uint32_t>(t)));
        mix(static_cast<uint64_t>(e.output_len));
    }
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Corpus load_experiment_corpus(const ExperimentConfig& cfg) {
    if (!cfg.corpus_path.empty()) return read_corpus_file(cfg.corpus_path);
    if (!cfg.trace_path.empty()) {
        return synthesize_from_trace(read_trace_file(cfg.trace_path), cfg.workload, cfg.seed);
    }
    return generate(cfg.workload, cfg.seed);
}

MetricsReport run_experiment(const ExperimentConfig& cfg) {
    Corpus corpus = load_experiment_corpus(cfg);
    if (cfg.rps > 0.0) assign_poisson_arrivals(corpus, cfg.rps, cfg.seed + 1);

    SimConfig sim = cfg.sim;
    PolicyChoice choice = resolve_policy(cfg.policy);
    sim.policy = choice.global;
    sim.local_order = choice.local_order;

    Simulator simulator(sim, to_requests(corpus));
    SimResult res = simulator.run();

    MetricsReport rep;
    rep.experiment = cfg.name;
    rep.policy = policy_name(cfg.policy);
    rep.workload_fingerprint = corpus_fingerprint(corpus);
    rep.seed = cfg.seed;
    rep.rps = cfg.rps;
    rep.n_gpus = sim.n_gpus;
    rep.requests = static_cast<int64_t>(res.records.size());
    rep.duration_ms = res.end_time;
    rep.throughput_rps =
        res.end_time > 0.0
            ? static_cast<double>(res.records.size()) / (res.end_time / 1000.0)
            : 0.0;
    rep.gpu_prefilled_tokens = res.gpu_prefilled_tokens;
    rep.gpu_iterations = res.gpu_iterations;
    rep.decisions = res.global_stats;
    rep.eviction_notices = res.eviction_notices;

    std::vector<double> ttfts;
    std::vector<double> latencies;
    std::vector<double> tpots;
    rep.per_request.reserve(res.records.size());
    for (const RequestRecord& r : res.records) {
        RequestMetric m;
        m.id = r.id;
        m.arrival_ms = r.arrival;
        m.gpu = r.gpu;
        m.branch = r.branch;
        m.redirected = r.redirected;
        m.priority_group = r.priority_group;
        m.prompt_len = r.prompt_len;
        m.output_len = r.output_len;
        m.cached_len = r.cached_len;
        m.reused = r.reused;
        m.prefilled = r.prefilled;
        m.ttft_ms = r.first_token_time - r.arrival;
        m.latency_ms = r.finish_time - r.arrival;
        if (r.output_len >= 2) {
            m.tpot_ms = (m.latency_ms - m.ttft_ms) / static_cast<double>(r.output_len - 1);
            tpots.push_back(m.tpot_ms);
        }
        ttfts.push_back(m.ttft_ms);
        latencies.push_back(m.latency_ms);
        rep.total_prompt_tokens += r.prompt_len;
        rep.total_output_tokens += r.output_len;
        rep.total_prefilled_tokens += r.prefilled;
        rep.total_reused_tokens += r.reused;
        rep.per_request.push_back(m);
    }
    rep.ttft_ms = dist_stats(std::move(ttfts));
    rep.latency_ms = dist_stats(std::move(latencies));
    rep.tpot_ms = dist_stats(std::move(tpots));
    if (rep.total_prompt_tokens > 0) {
        rep.hit_fraction = static_cast<double>(rep.total_reused_tokens) /
                           static_cast<double>(rep.total_prompt_tokens);
    }
    return rep;
}

json MetricsReport::to_json() const {
    json j;
    j["experiment"] = experiment;
    j["policy"] = policy;
    j["workload_fingerprint"] = workload_fingerprint;
    j["seed"] = seed;
    j["rps"] = rps;
    j["n_gpus"] = n_gpus;
    j["aggregates"] = {{"requests", requests},
                       {"duration_ms", duration_ms},
                       {"throughput_rps", throughput_rps},
                       {"ttft_ms", dist_json(ttft_ms)},
                       {"latency_ms", dist_json(latency_ms)},
                       {"tpot_ms", dist_json(tpot_ms)},
                       {"total_prompt_tokens", total_prompt_tokens},
                       {"total_output_tokens", total_output_tokens},
                       {"total_prefilled_tokens", total_prefilled_tokens},
                       {"total_reused_tokens", total_reused_tokens},
                       {"hit_fraction", hit_fraction},
                       {"eviction_notices", eviction_notices}};
    j["decisions"] = {{"exploit", decisions.exploit},
                      {"explore", decisions.explore},
                      {"decode_pressure", decisions.decode_pressure},
                      {"round_robin", decisions.round_robin},
                      {"redirected", decisions.redirected},
                      {"rebalance_installs", decisions.rebalance_installs},
                      {"autoscale_events", decisions.autoscale_events},
                      {"tree_reads", decisions.tree_reads}};
    j["gpu"] = {{"prefilled_tokens", gpu_prefilled_tokens}, {"iterations", gpu_iterations}};
    json reqs = json::array();
    for (const RequestMetric& m : per_request) {
        reqs.push_back({{"id", m.id},
                        {"arrival_ms", m.arrival_ms},
                        {"gpu", m.gpu},
                        {"branch", branch_name(m.branch)},
                        {"redirected", m.redirected},
                        {"priority_group", m.priority_group},
                        {"prompt_len", m.prompt_len},
                        {"output_len", m.output_len},
                        {"cached_len", m.cached_len},
                        {"reused", m.reused},
                        {"prefilled", m.prefilled},
                        {"ttft_ms", m.ttft_ms},
                        {"latency_ms", m.latency_ms},
                        {"tpot_ms", m.tpot_ms}});
    }
    j["per_request"] = std::move(reqs);
    return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport rep;
    try {
        j.at("experiment").get_to(rep.experiment);
        j.at("policy").get_to(rep.policy);
        j.at("workload_fingerprint").get_to(rep.workload_fingerprint);
        j.at("seed").get_to(rep.seed);
        j.at("rps").get_to(rep.rps);
        j.at("n_gpus").get_to(rep.n_gpus);
        const json& a = j.at("aggregates");
        a.at("requests").get_to(rep.requests);
        a.at("duration_ms").get_to(rep.duration_ms);
        a.at("throughput_rps").get_to(rep.throughput_rps);
        rep.ttft_ms = dist_from_json(a.at("ttft_ms"));
        rep.latency_ms = dist_from_json(a.at("latency_ms"));
        rep.tpot_ms = dist_from_json(a.at("tpot_ms"));
        a.at("total_prompt_tokens").get_to(rep.total_prompt_tokens);
        a.at("total_output_tokens").get_to(rep.total_output_tokens);
        a.at("total_prefilled_tokens").get_to(rep.total_prefilled_tokens);
        a.at("total_reused_tokens").get_to(rep.total_reused_tokens);
        a.at("hit_fraction").get_to(rep.hit_fraction);
        a.at("eviction_notices").get_to(rep.eviction_notices);
        const json& d = j.at("decisions");
        d.at("exploit").get_to(rep.decisions.exploit);
        d.at("explore").get_to(rep.decisions.explore);
        d.at("decode_pressure").get_to(rep.decisions.decode_pressure);
        d.at("round_robin").get_to(rep.decisions.round_robin);
        d.at("redirected").get_to(rep.decisions.redirected);
        d.at("rebalance_installs").get_to(rep.decisions.rebalance_installs);
        d.at("autoscale_events").get_to(rep.decisions.autoscale_events);
        d.at("tree_reads").get_to(rep.decisions.tree_reads);
        const json& g = j.at("gpu");
        g.at("prefilled_tokens").get_to(rep.gpu_prefilled_tokens);
        g.at("iterations").get_to(rep.gpu_iterations);
        // Per-request rows are optional on read; compare only needs
        // aggregates.
        if (j.contains("per_request")) {
            for (const json& r : j.at("per_request")) {
                RequestMetric m;
                r.at("id").get_to(m.id);
                r.at("arrival_ms").get_to(m.arrival_ms);
                r.at("gpu").get_to(m.gpu);
                m.redirected = r.at("redirected").get<bool>();
                r.at("priority_group").get_to(m.priority_group);
                r.at("prompt_len").get_to(m.prompt_len);
                r.at("output_len").get_to(m.output_len);
                r.at("cached_len").get_to(m.cached_len);
                r.at("reused").get_to(m.reused);
                r.at("prefilled").get_to(m.prefilled);
                r.at("ttft_ms").get_to(m.ttft_ms);
                r.at("latency_ms").get_to(m.latency_ms);
                r.at("tpot_ms").get_to(m.tpot_ms);
                std::string b = r.at("branch").get<std::string>();
                for (Branch cand : {Branch::Exploit, Branch::Explore,
                                    Branch::ExploreDecodePressure, Branch::RoundRobin}) {
                    if (b == branch_name(cand)) m.branch = cand;
                }
                rep.per_request.push_back(m);
            }
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("report: ") + e.what());
    }
    return rep;
}

MetricsReport MetricsReport::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open for reading: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("report " + path + ": " + e.what());
    }
    return from_json(j);
}

std::string MetricsReport::to_csv() const {
    std::ostringstream out;
    out << "id,arrival_ms,gpu,branch,redirected,priority_group,prompt_len,output_len,"
           "cached_len,reused,prefilled,ttft_ms,latency_ms,tpot_ms\n";
    char buf[64];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    for (const RequestMetric& m : per_request) {
        out << m.id << ',' << num(m.arrival_ms) << ',' << m.gpu << ',' << branch_name(m.branch)
            << ',' << (m.redirected ? 1 : 0) << ',' << m.priority_group << ',' << m.prompt_len
            << ',' << m.output_len << ',' << m.cached_len << ',' << m.reused << ',' << m.prefilled
            << ',' << num(m.ttft_ms) << ',' << num(m.latency_ms) << ','
            << (m.tpot_ms < 0.0 ? std::string() : num(m.tpot_ms)) << '\n';
    }
    return out.str();
}

std::string MetricsReport::summary_table() const {
    std::ostringstream out;
    out << "experiment:        " << experiment << "\n"
        << "policy:            " << policy << "\n"
        << "seed / rps:        " << seed << " / " << fmt(rps) << "\n"
        << "gpus:              " << n_gpus << "\n"
        << "requests:          " << requests << "\n"
        << "duration_ms:       " << fmt(duration_ms) << "\n"
        << "throughput_rps:    " << fmt(throughput_rps) << "\n"
        << "latency_ms:        mean " << fmt(latency_ms.mean) << "  p50 " << fmt(latency_ms.p50)
        << "  p99 " << fmt(latency_ms.p99) << "\n"
        << "ttft_ms:           mean " << fmt(ttft_ms.mean) << "  p50 " << fmt(ttft_ms.p50)
        << "  p99 " << fmt(ttft_ms.p99) << "\n"
        << "tpot_ms:           mean " << fmt(tpot_ms.mean) << "  p99 " << fmt(tpot_ms.p99) << "\n"
        << "prompt tokens:     " << total_prompt_tokens << "\n"
        << "prefilled tokens:  " << total_prefilled_tokens << "\n"
        << "reused tokens:     " << total_reused_tokens << " (hit fraction "
        << fmt(hit_fraction) << ")\n"
        << "decisions:         exploit " << decisions.exploit << ", explore " << decisions.explore
        << ", decode_pressure " << decisions.decode_pressure << ", round_robin "
        << decisions.round_robin << "\n"
        << "load control:      redirected " << decisions.redirected << ", installs "
        << decisions.rebalance_installs << ", replications " << decisions.autoscale_events
        << ", evictions " << eviction_notices << "\n";
    out << "gpu prefilled:     ";
    for (size_t g = 0; g < gpu_prefilled_tokens.size(); ++g) {
        if (g) out << ", ";
        out << "gpu" << g << " " << gpu_prefilled_tokens[g];
    }
    out << "\n";
    return out.str();
}

json CompareReport::to_json() const {
    json rows_json = json::array();
    for (const CompareRow& r : rows) {
        rows_json.push_back({{"policy", r.policy},
                             {"mean_latency_ms", r.mean_latency_ms},
                             {"p99_latency_ms", r.p99_latency_ms},
                             {"mean_ttft_ms", r.mean_ttft_ms},
                             {"p99_ttft_ms", r.p99_ttft_ms},
                             {"throughput_rps", r.throughput_rps},
                             {"hit_fraction", r.hit_fraction},
                             {"prefilled_tokens", r.prefilled_tokens},
                             {"latency_vs_first", r.latency_vs_first},
                             {"prefilled_vs_first", r.prefilled_vs_first}});
    }
    json j;
    j["rows"] = std::move(rows_json);
    return j;
}

std::string CompareReport::to_table() const {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-28s %12s %12s %12s %10s %8s %14s %9s %9s\n", "policy",
                  "mean_lat_ms", "p99_lat_ms", "p99_ttft_ms", "thru_rps", "hit", "prefill_tok",
                  "lat_x", "pref_x");
    out << line;
    for (const CompareRow& r : rows) {
        std::snprintf(line, sizeof(line),
                      "%-28s %12.3f %12.3f %12.3f %10.3f %8.4f %14lld %9.4f %9.4f\n",
                      r.policy.c_str(), r.mean_latency_ms, r.p99_latency_ms, r.p99_ttft_ms,
                      r.throughput_rps, r.hit_fraction,
                      static_cast<long long>(r.prefilled_tokens), r.latency_vs_first,
                      r.prefilled_vs_first);
        out << line;
    }
    return out.str();
}

json study_json(const StudyReport& st) {
    json j;
    j["requests"] = st.requests;
    j["total_prompt_tokens"] = st.total_prompt_tokens;
    j["total_output_tokens"] = st.total_output_tokens;
    j["total_shared_tokens"] = st.total_shared_tokens;
    j["shared_token_fraction"] = st.shared_token_fraction;
    j["mean_request_shared_fraction"] = st.mean_request_shared_fraction;
    j["mean_prompt_output_ratio"] = st.mean_prompt_output_ratio;
    j["prompt_len"] = dist_json(st.prompt_len);
    j["output_len"] = dist_json(st.output_len);
    j["key_portion_count"] = st.key_portion_count;
    j["mean_key_portion_len"] = st.mean_key_portion_len;
    j["requests_per_shared_sequence"] = dist_json(st.requests_per_shared_sequence);
    return j;
}

std::string study_table(const StudyReport& st) {
    std::ostringstream out;
    out << "requests:                    " << st.requests << "\n"
        << "prompt tokens:               " << st.total_prompt_tokens << "\n"
        << "output tokens:               " << st.total_output_tokens << "\n"
        << "shared token fraction:       " << fmt(st.shared_token_fraction) << "\n"
        << "mean per-request shared:     " << fmt(st.mean_request_shared_fraction) << "\n"
        << "mean prompt:output ratio:    " << fmt(st.mean_prompt_output_ratio) << "\n"
        << "prompt len:                  mean " << fmt(st.prompt_len.mean) << "  p50 "
        << fmt(st.prompt_len.p50) << "  p99 " << fmt(st.prompt_len.p99) << "\n"
        << "output len:                  mean " << fmt(st.output_len.mean) << "  p50 "
        << fmt(st.output_len.p50) << "  p99 " << fmt(st.output_len.p99) << "\n"
        << "key portions:                " << st.key_portion_count << " (mean len "
        << fmt(st.mean_key_portion_len) << ")\n"
        << "requests per shared seq:     mean " << fmt(st.requests_per_shared_sequence.mean)
        << "  max " << fmt(st.requests_per_shared_sequence.max) << "\n";
    return out.str();
}

CompareReport compare_reports(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw MismatchError("compare: no reports given");
    const MetricsReport& first = reports.front();
    for (const MetricsReport& r : reports) {
        if (r.workload_fingerprint != first.workload_fingerprint) {
            throw MismatchError("compare: workload fingerprint mismatch (" +
                                r.workload_fingerprint + " vs " + first.workload_fingerprint +
                                ")");
        }
        if (r.seed != first.seed) throw MismatchError("compare: seed mismatch");
        if (r.rps != first.rps) throw MismatchError("compare: arrival rate mismatch");
    }
    CompareReport cmp;
    for (const MetricsReport& r : reports) {
        CompareRow row;
        row.policy = r.policy;
        row.mean_latency_ms = r.latency_ms.mean;
        row.p99_latency_ms = r.latency_ms.p99;
        row.mean_ttft_ms = r.ttft_ms.mean;
        row.p99_ttft_ms = r.ttft_ms.p99;
        row.throughput_rps = r.throughput_rps;
        row.hit_fraction = r.hit_fraction;
        row.prefilled_tokens = r.total_prefilled_tokens;
        if (first.latency_ms.mean > 0.0) {
            row.latency_vs_first = r.latency_ms.mean / first.latency_ms.mean;
        }
        if (first.total_prefilled_tokens > 0) {
            row.prefilled_vs_first = static_cast<double>(r.total_prefilled_tokens) /
                                     static_cast<double>(first.total_prefilled_tokens);
        }
        cmp.rows.push_back(row);
    }
    return cmp;
}

} // namespace kvsched
