#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvsched/simulator.hpp"
#include "kvsched/workload.hpp"

namespace kvsched {

// Policy ladder: each named policy toggles one dimension away from the full
// prefix-aware configuration, so experiment deltas isolate one mechanism.
enum class PolicyName {
    E2Full,
    E2NoRebalance,
    E2NoPdBalance,
    E2FcfsLocal,
    RoundRobin,
    LongestPrefixFirstLocal,
};

const char* policy_name(PolicyName p);
std::optional<PolicyName> policy_from_name(const std::string& name);
std::vector<PolicyName> all_policies();

struct PolicyChoice {
    GlobalPolicy global;
    LocalOrder local_order = LocalOrder::PriorityGroups;
};

PolicyChoice resolve_policy(PolicyName p);

// A full experiment: workload source, cluster shape, timing model, policy.
// Corpus precedence: corpus_path, else trace_path (content synthesized from
// the workload spec), else generate(workload, seed). rps > 0 replaces any
// stored arrivals with a Poisson process seeded from seed + 1.
struct ExperimentConfig {
    std::string name = "experiment";
    uint64_t seed = 1;
    double rps = 0.0;
    PolicyName policy = PolicyName::E2Full;
    SimConfig sim;
    WorkloadSpec workload;
    std::string corpus_path;
    std::string trace_path;

    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig from_json_file(const std::string& path);
    nlohmann::json to_json() const;
};

struct RequestMetric {
    RequestId id = 0;
    SimTime arrival_ms = 0;
    GpuId gpu = kNoGpu;
    Branch branch = Branch::Explore;
    bool redirected = false;
    int priority_group = 0;
    int64_t prompt_len = 0;
    int64_t output_len = 0;
    int64_t cached_len = 0;
    int64_t reused = 0;
    int64_t prefilled = 0;
    double ttft_ms = 0.0;
    double latency_ms = 0.0;
    double tpot_ms = -1.0; // -1 when output_len < 2
};

struct MetricsReport {
    std::string experiment;
    std::string policy;
    std::string workload_fingerprint; // corpus content hash (hex)
    uint64_t seed = 0;
    double rps = 0.0;
    int n_gpus = 0;
    int64_t requests = 0;
    double duration_ms = 0.0;
    double throughput_rps = 0.0;
    DistStats ttft_ms;
    DistStats latency_ms;
    DistStats tpot_ms; // over requests with output_len >= 2
    int64_t total_prompt_tokens = 0;
    int64_t total_output_tokens = 0;
    int64_t total_prefilled_tokens = 0;
    int64_t total_reused_tokens = 0;
    double hit_fraction = 0.0; // reused / prompt
    std::vector<int64_t> gpu_prefilled_tokens;
    std::vector<int64_t> gpu_iterations;
    GlobalStats decisions;
    int64_t eviction_notices = 0;
    std::vector<RequestMetric> per_request;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    static MetricsReport from_json_file(const std::string& path);
    std::string to_csv() const;       // per-request records
    std::string summary_table() const;
};

std::string corpus_fingerprint(const Corpus& corpus);

Corpus load_experiment_corpus(const ExperimentConfig& cfg);

MetricsReport run_experiment(const ExperimentConfig& cfg);

// One row per report; ratio columns are relative to the first report.
struct CompareRow {
    std::string policy;
    double mean_latency_ms = 0.0;
    double p99_latency_ms = 0.0;
    double mean_ttft_ms = 0.0;
    double p99_ttft_ms = 0.0;
    double throughput_rps = 0.0;
    double hit_fraction = 0.0;
    int64_t prefilled_tokens = 0;
    double latency_vs_first = 1.0;
    double prefilled_vs_first = 1.0;
};

struct CompareReport {
    std::vector<CompareRow> rows;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

// All reports must describe the same corpus, seed, and arrival rate;
// anything else is a MismatchError (as is an empty input).
CompareReport compare_reports(const std::vector<MetricsReport>& reports);

nlohmann::json study_json(const StudyReport& st);
std::string study_table(const StudyReport& st);

} // namespace kvsched
