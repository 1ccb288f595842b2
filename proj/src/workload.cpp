#include "kvsched/workload.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "kvsched/prefix_tree.hpp"

namespace kvsched {

namespace {

// Disjoint token-id regions keep structurally distinct content from aliasing:
// system prompts, branch/trunk pools, and a single ever-growing unique stream.
constexpr int64_t kSysBase = 1'000'000;
constexpr int64_t kBranchBase = 2'000'000;
constexpr int64_t kUniqueBase = 500'000'000;
constexpr int64_t kTokenIdLimit = std::numeric_limits<TokenId>::max();

TokenSeq token_range(int64_t base, int64_t len) {
    if (base < 0 || base + len > kTokenIdLimit) {
        throw ConfigError("workload: token id space exhausted");
    }
    TokenSeq seq;
    seq.reserve(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) seq.push_back(static_cast<TokenId>(base + i));
    return seq;
}

struct UniqueStream {
    int64_t next = kUniqueBase;

    void append(TokenSeq& out, int64_t n) {
        if (next + n > kTokenIdLimit) throw ConfigError("workload: token id space exhausted");
        for (int64_t i = 0; i < n; ++i) out.push_back(static_cast<TokenId>(next++));
    }
};

class ZipfSampler {
  public:
    ZipfSampler(int n, double s) {
        cum_.reserve(static_cast<size_t>(n));
        double total = 0.0;
        for (int k = 1; k <= n; ++k) {
            total += std::pow(static_cast<double>(k), -s);
            cum_.push_back(total);
        }
        for (double& c : cum_) c /= total;
    }

    int operator()(std::mt19937_64& rng) const {
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        auto it = std::lower_bound(cum_.begin(), cum_.end(), u);
        auto idx = std::min<std::ptrdiff_t>(it - cum_.begin(),
                                            static_cast<std::ptrdiff_t>(cum_.size()) - 1);
        return static_cast<int>(idx);
    }

  private:
    std::vector<double> cum_;
};

int64_t draw_len(const LenRange& r, std::mt19937_64& rng) {
    if (r.fixed()) return r.min;
    return std::uniform_int_distribution<int64_t>(r.min, r.max)(rng);
}

[[noreturn]] void parse_fail(const char* what, int64_t line, const std::string& detail) {
    std::ostringstream msg;
    msg << what << " line " << line << ": " << detail;
    throw ParseError(msg.str());
}

int64_t parse_int(const std::string& field, const char* what, int64_t line, const char* name) {
    int64_t value = 0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc() || ptr != field.data() + field.size()) {
        parse_fail(what, line, std::string("bad ") + name + " '" + field + "'");
    }
    return value;
}

double parse_double(const std::string& field, const char* what, int64_t line, const char* name) {
    try {
        size_t used = 0;
        double value = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
        return value;
    } catch (const std::exception&) {
        parse_fail(what, line, std::string("bad ") + name + " '" + field + "'");
    }
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

const char* archetype_name(Archetype a) {
    switch (a) {
        case Archetype::Custom: return "custom";
        case Archetype::Toolbench: return "toolbench";
        case Archetype::EmbodiedAgent: return "embodied_agent";
        case Archetype::Programming: return "programming";
        case Archetype::VideoQa: return "video_qa";
        case Archetype::DocQa: return "doc_qa";
    }
    return "custom";
}

std::optional<Archetype> archetype_from_name(const std::string& name) {
    for (Archetype a : {Archetype::Custom, Archetype::Toolbench, Archetype::EmbodiedAgent,
                        Archetype::Programming, Archetype::VideoQa, Archetype::DocQa}) {
        if (name == archetype_name(a)) return a;
    }
    return std::nullopt;
}

WorkloadSpec WorkloadSpec::archetype_default(Archetype a) {
    WorkloadSpec s;
    s.archetype = a;
    switch (a) {
        case Archetype::Custom:
            break;
        case Archetype::Toolbench:
            // Tool-use agents: a shared system preamble, one of 16 tool
            // documents with zipf-skewed popularity, and a per-call suffix.
            s.system_prompt_len = 200;
            s.branch_count = 16;
            s.branch_len = 1660;
            s.popularity = Popularity::Zipf;
            s.zipf_s = 1.1;
            s.unique_suffix_len = {120, 220};
            s.output_len = {40, 56};
            s.target_ratio = 42.7;
            s.target_shared_fraction = 0.916;
            break;
        case Archetype::EmbodiedAgent:
            // Chained turns: each step replays the whole conversation so far
            // plus the previous output and a fresh observation.
            s.branch_len = 500;
            s.chain_mean_len = 5.0;
            s.observation_len = 300;
            s.output_len = {6, 14};
            s.target_ratio = 160.5;
            s.target_shared_fraction = 0.958;
            break;
        case Archetype::Programming:
            // Contest-style: big shared system prompt, one problem statement
            // reused by a fixed block of attempts, short unique diff context.
            s.system_prompt_len = 2000;
            s.branch_len = 2000;
            s.requests_per_group = 8.0;
            s.unique_suffix_len = {150, 250};
            s.output_len = {180, 240};
            s.target_ratio = 20.1;
            s.target_shared_fraction = 0.952;
            break;
        case Archetype::VideoQa:
            // Long video context asked several short questions.
            s.branch_len = 14500;
            s.requests_per_group = 8.5;
            s.unique_suffix_len = {400, 600};
            s.output_len = {6, 6};
            s.target_ratio = 2500.0;
            s.target_shared_fraction = 0.9666;
            break;
        case Archetype::DocQa:
            // Long document context, a handful of questions per document.
            s.system_prompt_len = 13;
            s.branch_len = 6000;
            s.requests_per_group = 6.0;
            s.unique_suffix_len = {200, 300};
            s.output_len = {20, 30};
            s.target_ratio = 254.6;
            s.target_shared_fraction = 0.959;
            break;
    }
    return s;
}

void WorkloadSpec::validate() const {
    if (request_count < 0) throw ConfigError("workload: request_count must be >= 0");
    if (system_prompt_len < 0) throw ConfigError("workload: system_prompt_len must be >= 0");
    if (branch_len < 0) throw ConfigError("workload: branch_len must be >= 0");
    if (observation_len < 0) throw ConfigError("workload: observation_len must be >= 0");
    if (unique_suffix_len.min < 0 || unique_suffix_len.min > unique_suffix_len.max) {
        throw ConfigError("workload: unique_suffix_len range is invalid");
    }
    if (output_len.min < 1 || output_len.min > output_len.max) {
        throw ConfigError("workload: output_len range must satisfy 1 <= min <= max");
    }
    switch (archetype) {
        case Archetype::Custom:
        case Archetype::Toolbench:
            if (branch_count < 1) throw ConfigError("workload: branch_count must be >= 1");
            if (popularity == Popularity::Zipf && zipf_s <= 0.0) {
                throw ConfigError("workload: zipf_s must be > 0");
            }
            if (system_prompt_len + branch_len + unique_suffix_len.min < 1) {
                throw ConfigError("workload: prompts would be empty");
            }
            break;
        case Archetype::Programming:
        case Archetype::VideoQa:
        case Archetype::DocQa:
            if (requests_per_group < 1.0) {
                throw ConfigError("workload: requests_per_group must be >= 1");
            }
            if (branch_len < 1) throw ConfigError("workload: grouped trunks need branch_len >= 1");
            break;
        case Archetype::EmbodiedAgent:
            if (chain_mean_len < 2.0) {
                throw ConfigError("workload: chain_mean_len must be >= 2");
            }
            if (branch_len < 1) throw ConfigError("workload: chain roots need branch_len >= 1");
            break;
    }
}

Corpus generate(const WorkloadSpec& spec, uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    Corpus corpus;
    corpus.reserve(static_cast<size_t>(spec.request_count));
    UniqueStream uniq;
    TokenSeq sys = token_range(kSysBase, spec.system_prompt_len);

    auto add = [&](TokenSeq prompt, int64_t out) {
        CorpusEntry e;
        e.id = static_cast<RequestId>(corpus.size()) + 1;
        e.prompt = std::move(prompt);
        e.output_len = out;
        corpus.push_back(std::move(e));
    };

    switch (spec.archetype) {
        case Archetype::Custom:
        case Archetype::Toolbench: {
            std::vector<TokenSeq> branches;
            branches.reserve(static_cast<size_t>(spec.branch_count));
            for (int b = 0; b < spec.branch_count; ++b) {
                branches.push_back(
                    token_range(kBranchBase + static_cast<int64_t>(b) * spec.branch_len,
                                spec.branch_len));
            }
            std::optional<ZipfSampler> zipf;
            if (spec.popularity == Popularity::Zipf) zipf.emplace(spec.branch_count, spec.zipf_s);
            std::uniform_int_distribution<int> uniform_branch(0, spec.branch_count - 1);
            for (int64_t i = 0; i < spec.request_count; ++i) {
                int b = zipf ? (*zipf)(rng) : uniform_branch(rng);
                TokenSeq p = sys;
                p.insert(p.end(), branches[static_cast<size_t>(b)].begin(),
                         branches[static_cast<size_t>(b)].end());
                uniq.append(p, draw_len(spec.unique_suffix_len, rng));
                add(std::move(p), draw_len(spec.output_len, rng));
            }
            break;
        }
        case Archetype::Programming:
        case Archetype::VideoQa:
        case Archetype::DocQa: {
            // Requests sharing one trunk arrive as a consecutive block;
            // Programming uses a fixed block size, the QA archetypes draw
            // 1 + Poisson so some trunks see a single question.
            std::poisson_distribution<int64_t> extra(std::max(0.0, spec.requests_per_group - 1.0));
            int64_t made = 0;
            int64_t group = 0;
            while (made < spec.request_count) {
                int64_t size = spec.archetype == Archetype::Programming
                                   ? std::llround(spec.requests_per_group)
                                   : 1 + extra(rng);
                size = std::min(size, spec.request_count - made);
                TokenSeq trunk =
                    token_range(kBranchBase + group * spec.branch_len, spec.branch_len);
                for (int64_t j = 0; j < size; ++j) {
                    TokenSeq p = sys;
                    p.insert(p.end(), trunk.begin(), trunk.end());
                    uniq.append(p, draw_len(spec.unique_suffix_len, rng));
                    add(std::move(p), draw_len(spec.output_len, rng));
                }
                made += size;
                ++group;
            }
            break;
        }
        case Archetype::EmbodiedAgent: {
            // Chain length 2 + Geometric keeps every chain root shared; only
            // the final step's output+observation tail is unique to one
            // request.
            double extra_mean = spec.chain_mean_len - 2.0;
            std::geometric_distribution<int64_t> extra(1.0 / (extra_mean + 1.0));
            int64_t made = 0;
            while (made < spec.request_count) {
                int64_t steps = 2 + extra(rng);
                steps = std::min(steps, spec.request_count - made);
                TokenSeq context;
                uniq.append(context, spec.branch_len);
                for (int64_t k = 0; k < steps; ++k) {
                    int64_t out = draw_len(spec.output_len, rng);
                    add(context, out);
                    if (k + 1 < steps) {
                        uniq.append(context, out);
                        uniq.append(context, spec.observation_len);
                    }
                }
                made += steps;
            }
            break;
        }
    }
    return corpus;
}

void write_corpus(const Corpus& corpus, std::ostream& out) {
    char buf[40];
    for (const CorpusEntry& e : corpus) {
        out << e.id;
        if (e.arrival_ms) {
            // Always fixed-point: the decimal point is the reader's cue that
            // an arrival field is present.
            std::snprintf(buf, sizeof(buf), "%.3f", *e.arrival_ms);
            out << ' ' << buf;
        }
        for (TokenId t : e.prompt) out << ' ' << t;
        out << ' ' << e.output_len << '\n';
    }
}

void write_corpus_file(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open for writing: " + path);
    write_corpus(corpus, out);
}

Corpus read_corpus(std::istream& in) {
    Corpus corpus;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::vector<std::string> fields;
        std::string f;
        while (ls >> f) fields.push_back(f);
        if (fields.empty()) continue;
        if (fields.size() < 3) parse_fail("corpus", lineno, "expected id, tokens..., output_len");

        CorpusEntry e;
        e.id = parse_int(fields[0], "corpus", lineno, "id");
        size_t idx = 1;
        if (fields.size() >= 4 && fields[1].find('.') != std::string::npos) {
            e.arrival_ms = parse_double(fields[1], "corpus", lineno, "arrival_ms");
            if (*e.arrival_ms < 0.0) parse_fail("corpus", lineno, "negative arrival_ms");
            idx = 2;
        }
        if (fields.size() - idx < 2) parse_fail("corpus", lineno, "prompt is empty");
        for (; idx + 1 < fields.size(); ++idx) {
            int64_t tok = parse_int(fields[idx], "corpus", lineno, "token id");
            if (tok < std::numeric_limits<TokenId>::min() || tok > kTokenIdLimit) {
                parse_fail("corpus", lineno, "token id out of range '" + fields[idx] + "'");
            }
            e.prompt.push_back(static_cast<TokenId>(tok));
        }
        e.output_len = parse_int(fields.back(), "corpus", lineno, "output_len");
        if (e.output_len < 1) parse_fail("corpus", lineno, "output_len must be >= 1");
        corpus.push_back(std::move(e));
    }
    return corpus;
}

Corpus read_corpus_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open for reading: " + path);
    return read_corpus(in);
}

std::vector<TraceRow> read_trace(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("trace line 1: missing header");
    {
        // A numeric first field means the header was omitted.
        std::string first = trim(line.substr(0, line.find(',')));
        char* end = nullptr;
        std::strtod(first.c_str(), &end);
        if (end != first.c_str() && *end == '\0') {
            throw ParseError("trace line 1: expected a header row, found data");
        }
    }
    std::vector<TraceRow> rows;
    int64_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            fields.push_back(trim(line.substr(start, comma - start)));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 3) {
            parse_fail("trace", lineno, "expected arrival_s, prompt_len, output_len");
        }
        TraceRow row;
        row.arrival_s = parse_double(fields[0], "trace", lineno, "arrival_s");
        if (row.arrival_s < 0.0) parse_fail("trace", lineno, "negative arrival_s");
        row.prompt_len = parse_int(fields[1], "trace", lineno, "prompt_len");
        if (row.prompt_len < 1) parse_fail("trace", lineno, "prompt_len must be >= 1");
        row.output_len = parse_int(fields[2], "trace", lineno, "output_len");
        if (row.output_len < 1) parse_fail("trace", lineno, "output_len must be >= 1");
        rows.push_back(row);
    }
    // Stable: rows with equal timestamps keep their file order.
    std::stable_sort(rows.begin(), rows.end(),
                     [](const TraceRow& a, const TraceRow& b) { return a.arrival_s < b.arrival_s; });
    return rows;
}

std::vector<TraceRow> read_trace_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open for reading: " + path);
    return read_trace(in);
}

Corpus synthesize_from_trace(const std::vector<TraceRow>& rows, const WorkloadSpec& content,
                             uint64_t seed) {
    content.validate();
    std::vector<TraceRow> ordered = rows;
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const TraceRow& a, const TraceRow& b) { return a.arrival_s < b.arrival_s; });

    std::mt19937_64 rng(seed);
    TokenSeq sys = token_range(kSysBase, content.system_prompt_len);
    std::vector<TokenSeq> branches;
    branches.reserve(static_cast<size_t>(content.branch_count));
    for (int b = 0; b < content.branch_count; ++b) {
        branches.push_back(token_range(kBranchBase + static_cast<int64_t>(b) * content.branch_len,
                                       content.branch_len));
    }
    std::optional<ZipfSampler> zipf;
    if (content.popularity == Popularity::Zipf) zipf.emplace(content.branch_count, content.zipf_s);
    std::uniform_int_distribution<int> uniform_branch(0, content.branch_count - 1);
    UniqueStream uniq;

    Corpus corpus;
    corpus.reserve(ordered.size());
    for (const TraceRow& row : ordered) {
        int b = zipf ? (*zipf)(rng) : uniform_branch(rng);
        TokenSeq p;
        p.reserve(static_cast<size_t>(row.prompt_len));
        for (TokenId t : sys) {
            if (static_cast<int64_t>(p.size()) >= row.prompt_len) break;
            p.push_back(t);
        }
        for (TokenId t : branches[static_cast<size_t>(b)]) {
            if (static_cast<int64_t>(p.size()) >= row.prompt_len) break;
            p.push_back(t);
        }
        uniq.append(p, row.prompt_len - static_cast<int64_t>(p.size()));
        CorpusEntry e;
        e.id = static_cast<RequestId>(corpus.size()) + 1;
        e.arrival_ms = row.arrival_s * 1000.0;
        e.prompt = std::move(p);
        e.output_len = row.output_len;
        corpus.push_back(std::move(e));
    }
    return corpus;
}

void assign_poisson_arrivals(Corpus& corpus, double requests_per_second, uint64_t seed) {
    if (requests_per_second <= 0.0) {
        throw ConfigError("workload: requests_per_second must be > 0");
    }
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> gap(requests_per_second / 1000.0);
    SimTime t = 0.0;
    for (CorpusEntry& e : corpus) {
        t += gap(rng);
        e.arrival_ms = t;
    }
}

std::vector<Request> to_requests(const Corpus& corpus) {
    std::vector<Request> reqs;
    reqs.reserve(corpus.size());
    for (const CorpusEntry& e : corpus) {
        Request r;
        r.id = e.id;
        r.arrival_ms = e.arrival_ms.value_or(0.0);
        r.prompt = e.prompt;
        r.output_len = e.output_len;
        reqs.push_back(std::move(r));
    }
    return reqs;
}

DistStats dist_stats(std::vector<double> values) {
    DistStats s;
    s.count = static_cast<int64_t>(values.size());
    if (values.empty()) return s;
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    s.min = values.front();
    s.max = values.back();
    auto rank = [&](double q) {
        auto r = static_cast<int64_t>(std::ceil(q * static_cast<double>(values.size())));
        r = std::clamp<int64_t>(r, 1, static_cast<int64_t>(values.size()));
        return values[static_cast<size_t>(r - 1)];
    };
    s.p50 = rank(0.50);
    s.p99 = rank(0.99);
    return s;
}

StudyReport analyze(const Corpus& corpus) {
    StudyReport rep;
    rep.requests = static_cast<int64_t>(corpus.size());
    if (corpus.empty()) return rep;

    // Infinite-capacity trie; every insert stamps one hit per path node at
    // t=0, so a node's hit count is exactly its request-traversal count.
    PrefixTree tree;
    for (const CorpusEntry& e : corpus) {
        tree.insert(e.prompt, 0, 0.0, InsertMode::HitsOnly);
    }

    std::vector<double> prompt_lens;
    std::vector<double> output_lens;
    prompt_lens.reserve(corpus.size());
    output_lens.reserve(corpus.size());
    std::map<NodeId, std::pair<int64_t, int64_t>> key_portions; // id -> (len, traversals)
    double shared_frac_sum = 0.0;
    double ratio_sum = 0.0;

    for (const CorpusEntry& e : corpus) {
        MatchResult m = tree.match(e.prompt);
        int64_t shared = 0;
        int64_t prefix = 0;
        const TreeNode* key_node = nullptr;
        int64_t key_len = 0;
        int64_t key_hits = 0;
        for (const MatchSpan& span : m.path) {
            int64_t hits = tree.recent_hits_all_gpus(span.node, 0.0, 0.0);
            if (hits >= 2) shared += span.matched;
            if (span.matched > prefix) {
                key_node = span.node;
                key_len = span.matched;
                key_hits = hits;
            }
            prefix += span.matched;
        }
        rep.total_prompt_tokens += m.matched_len;
        rep.total_output_tokens += e.output_len;
        rep.total_shared_tokens += shared;
        shared_frac_sum += static_cast<double>(shared) / static_cast<double>(m.matched_len);
        ratio_sum += static_cast<double>(m.matched_len) / static_cast<double>(e.output_len);
        prompt_lens.push_back(static_cast<double>(m.matched_len));
        output_lens.push_back(static_cast<double>(e.output_len));
        if (key_node) key_portions[key_node->id] = {key_len, key_hits};
    }

    auto n = static_cast<double>(corpus.size());
    rep.shared_token_fraction =
        static_cast<double>(rep.total_shared_tokens) / static_cast<double>(rep.total_prompt_tokens);
    rep.mean_request_shared_fraction = shared_frac_sum / n;
    rep.mean_prompt_output_ratio = ratio_sum / n;
    rep.prompt_len = dist_stats(std::move(prompt_lens));
    rep.output_len = dist_stats(std::move(output_lens));

    rep.key_portion_count = static_cast<int64_t>(key_portions.size());
    std::vector<double> traversals;
    traversals.reserve(key_portions.size());
    double len_sum = 0.0;
    for (const auto& [id, info] : key_portions) {
        len_sum += static_cast<double>(info.first);
        traversals.push_back(static_cast<double>(info.second));
    }
    if (!key_portions.empty()) {
        rep.mean_key_portion_len = len_sum / static_cast<double>(key_portions.size());
    }
    rep.requests_per_shared_sequence = dist_stats(std::move(traversals));
    return rep;
}

} // namespace kvsched
