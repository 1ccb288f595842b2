#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kvsched/types.hpp"

namespace kvsched {

// Inclusive uniform integer range used for per-request length draws.
struct LenRange {
    int64_t min = 0;
    int64_t max = 0;

    bool fixed() const { return min == max; }
    double mean() const { return 0.5 * (static_cast<double>(min) + static_cast<double>(max)); }
};

enum class Archetype {
    Custom,
    Toolbench,
    EmbodiedAgent,
    Programming,
    VideoQa,
    DocQa,
};

enum class Popularity { Uniform, Zipf };

const char* archetype_name(Archetype a);
std::optional<Archetype> archetype_from_name(const std::string& name);

// Declarative description of a synthetic corpus. Flat archetypes (Custom,
// Toolbench) build sys + branch + unique suffix prompts; grouped archetypes
// (Programming, VideoQa, DocQa) share a per-group trunk across several
// requests; EmbodiedAgent chains requests so each step's prompt extends the
// previous step's prompt with its output and a fresh observation.
struct WorkloadSpec {
    Archetype archetype = Archetype::Custom;
    int64_t request_count = 1000;

    int64_t system_prompt_len = 0;
    int branch_count = 1;
    int64_t branch_len = 0;
    Popularity popularity = Popularity::Uniform;
    double zipf_s = 1.1;
    LenRange unique_suffix_len{0, 0};
    LenRange output_len{32, 32};

    // Grouped archetypes: mean requests sharing one trunk. Programming uses it
    // as a fixed group size; VideoQa/DocQa draw 1 + Poisson(mean - 1).
    double requests_per_group = 0.0;

    // EmbodiedAgent: chain length is 2 + Geometric, observation_len tokens are
    // appended per step alongside the previous step's output.
    double chain_mean_len = 0.0;
    int64_t observation_len = 0;

    // Analytic expectations this spec was designed around; the analyzer's
    // measurements are validated against these.
    double target_ratio = 0.0;
    double target_shared_fraction = 0.0;

    static WorkloadSpec archetype_default(Archetype a);
    void validate() const;
};

struct CorpusEntry {
    RequestId id = 0;
    std::optional<SimTime> arrival_ms;
    TokenSeq prompt;
    int64_t output_len = 1;
};

using Corpus = std::vector<CorpusEntry>;

Corpus generate(const WorkloadSpec& spec, uint64_t seed);

// One record per line: "id[ arrival_ms] tok tok ... output_len". arrival_ms is
// only present when set and always carries a decimal point, which is how the
// reader tells it apart from the first prompt token.
void write_corpus(const Corpus& corpus, std::ostream& out);
void write_corpus_file(const Corpus& corpus, const std::string& path);
Corpus read_corpus(std::istream& in);
Corpus read_corpus_file(const std::string& path);

// CSV trace "(arrival_s, prompt_len, output_len)" with a one-line header.
struct TraceRow {
    SimTime arrival_s = 0.0;
    int64_t prompt_len = 0;
    int64_t output_len = 1;
};

std::vector<TraceRow> read_trace(std::istream& in);
std::vector<TraceRow> read_trace_file(const std::string& path);

// Gives trace rows concrete token content drawn from `content`'s sharing
// structure (sys + popularity-weighted branch + unique filler, truncated to
// the row's prompt_len). Rows keep their file order; arrivals come from the
// trace (seconds -> ms), sorted stably by arrival time.
Corpus synthesize_from_trace(const std::vector<TraceRow>& rows, const WorkloadSpec& content,
                             uint64_t seed);

// Poisson arrival process: exponential inter-arrival gaps with mean 1000/rps
// ms, written into the corpus in order starting at t=0.
void assign_poisson_arrivals(Corpus& corpus, double requests_per_second, uint64_t seed);

std::vector<Request> to_requests(const Corpus& corpus);

struct DistStats {
    int64_t count = 0;
    double mean = 0.0;
    double p50 = 0.0;
    double p99 = 0.0;
    double min = 0.0;
    double max = 0.0;
};

DistStats dist_stats(std::vector<double> values);

// Corpus study built on an infinite-capacity prefix trie: a prompt token is
// "shared" when its node is traversed by at least two requests.
struct StudyReport {
    int64_t requests = 0;
    int64_t total_prompt_tokens = 0;
    int64_t total_output_tokens = 0;
    int64_t total_shared_tokens = 0;
    double shared_token_fraction = 0.0;        // total shared / total prompt
    double mean_request_shared_fraction = 0.0; // mean over requests
    double mean_prompt_output_ratio = 0.0;     // mean over requests of prompt/output
    DistStats prompt_len;
    DistStats output_len;
    // One key portion per request: the deepest node on its path with more
    // tokens than all its predecessors combined, deduplicated by node.
    int64_t key_portion_count = 0;
    double mean_key_portion_len = 0.0;
    DistStats requests_per_shared_sequence; // traversal counts of key portions
};

StudyReport analyze(const Corpus& corpus);

} // namespace kvsched
