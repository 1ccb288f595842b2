#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kvsched/harness.hpp"
#include "kvsched/local_scheduler.hpp"

using namespace kvsched;

namespace {

ExperimentConfig default_config() {
    ExperimentConfig cfg;
    cfg.name = "toolbench_default";
    cfg.workload = WorkloadSpec::archetype_default(Archetype::Toolbench);
    return cfg;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open for writing: " + path);
    out << text;
}

double parse_rps_single(const std::string& s) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size() || v < 0.0) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("--rps expects a non-negative number, got '" + s + "'");
    }
}

std::vector<double> parse_rps_list(const std::string& s) {
    std::vector<double> rates;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string item = s.substr(start, comma - start);
        if (item.empty()) throw ConfigError("--rps list has an empty element");
        double v = parse_rps_single(item);
        if (v <= 0.0) throw ConfigError("--rps sweep rates must be > 0");
        rates.push_back(v);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (rates.empty()) throw ConfigError("--rps list is empty");
    return rates;
}

TokenSeq make_seq(TokenId first, int64_t len) {
    TokenSeq s;
    for (int64_t i = 0; i < len; ++i) s.push_back(first + static_cast<TokenId>(i));
    return s;
}

int run_selftest() {
    int failures = 0;
    auto report = [&failures](const char* name, bool ok, const std::string& detail = "") {
        if (ok) {
            std::cout << "selftest " << name << ": pass\n";
        } else {
            ++failures;
            std::cout << "selftest " << name << ": FAIL" << (detail.empty() ? "" : " — " + detail)
                      << "\n";
        }
    };

    try {
        ExperimentConfig cfg;
        cfg.name = "selftest";
        cfg.seed = 3;
        cfg.rps = 5.0;
        cfg.sim.n_gpus = 2;
        cfg.workload = WorkloadSpec::archetype_default(Archetype::Toolbench);
        cfg.workload.request_count = 60;

        MetricsReport a = run_experiment(cfg);
        MetricsReport b = run_experiment(cfg);
        report("deterministic_replay", a.to_json().dump(2) == b.to_json().dump(2));

        bool conserved = true;
        for (const RequestMetric& m : a.per_request) {
            if (m.reused + m.prefilled != m.prompt_len) conserved = false;
        }
        report("token_conservation", conserved && a.requests == 60);
    } catch (const std::exception& e) {
        report("deterministic_replay", false, e.what());
    }

    try {
        Corpus identical;
        for (RequestId id = 1; id <= 2; ++id) {
            CorpusEntry e;
            e.id = id;
            e.prompt = make_seq(10, 30);
            e.output_len = 15;
            identical.push_back(e);
        }
        Corpus disjoint;
        for (RequestId id = 1; id <= 2; ++id) {
            CorpusEntry e;
            e.id = id;
            e.prompt = make_seq(static_cast<TokenId>(1000 * id), 30);
            e.output_len = 15;
            disjoint.push_back(e);
        }
        bool ok = analyze(identical).shared_token_fraction == 1.0 &&
                  analyze(disjoint).shared_token_fraction == 0.0;
        report("analyzer_identities", ok);
    } catch (const std::exception& e) {
        report("analyzer_identities", false, e.what());
    }

    try {
        // 63 of 100 prompt tokens cached -> hit ratio 0.63 -> group 6 of 10.
        LocalConfig lc;
        LocalScheduler ls(0, lc, LocalOrder::PriorityGroups);
        ls.tree().mark_cached_path(make_seq(1, 63), 0, 0.0);
        Request r;
        r.id = 1;
        r.prompt = make_seq(1, 100);
        r.output_len = 4;
        report("priority_grouping", ls.enqueue(r, 0.0) == 6);
    } catch (const std::exception& e) {
        report("priority_grouping", false, e.what());
    }

    try {
        // Identity-style timing: prefill 100 tokens in one 100ms iteration,
        // then one decode iteration of 10ms per token: first token at 110,
        // last of 3 at 130.
        SimConfig sc;
        sc.n_gpus = 1;
        sc.model.prefill_base_ms = 0.0;
        sc.model.prefill_per_token_ms = 1.0;
        sc.model.decode_per_token_ms = 10.0;
        sc.model.iteration_base_ms = 0.0;
        Request r;
        r.id = 1;
        r.arrival_ms = 0.0;
        r.prompt = make_seq(1, 100);
        r.output_len = 3;
        Simulator sim(sc, {r});
        SimResult res = sim.run();
        bool ok = res.records.size() == 1 && res.records[0].first_token_time == 110.0 &&
                  res.records[0].finish_time == 130.0;
        report("timing_ground_truth", ok);
    } catch (const std::exception& e) {
        report("timing_ground_truth", false, e.what());
    }

    std::cout << (failures == 0 ? "selftest: all checks passed\n"
                                : "selftest: " + std::to_string(failures) + " check(s) failed\n");
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"prefix-aware cluster scheduling simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string policy_arg;
    std::string rps_arg;
    std::string out_path;
    std::string trace_arg;
    uint64_t seed_arg = 0;
    std::vector<std::string> compare_inputs;

    CLI::App* run_cmd = app.add_subcommand("run", "simulate one experiment and report metrics");
    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "run the same experiment across several arrival rates");
    CLI::App* analyze_cmd =
        app.add_subcommand("analyze", "study a workload's sharing structure without simulating");
    CLI::App* compare_cmd =
        app.add_subcommand("compare", "join report JSONs from the same workload into one table");
    app.add_subcommand("selftest", "run fast built-in consistency checks");

    CLI::Option* run_seed = run_cmd->add_option("--seed", seed_arg, "override config seed");
    run_cmd->add_option("--config", config_path, "experiment config JSON path");
    run_cmd->add_option("--policy", policy_arg, "override config policy");
    CLI::Option* run_rps = run_cmd->add_option("--rps", rps_arg, "override arrival rate");
    run_cmd->add_option("--out", out_path, "write report (.json or .csv)");
    run_cmd->add_option("--trace", trace_arg, "override input trace CSV path");

    CLI::Option* sweep_seed = sweep_cmd->add_option("--seed", seed_arg, "override config seed");
    sweep_cmd->add_option("--config", config_path, "experiment config JSON path");
    sweep_cmd->add_option("--policy", policy_arg, "override config policy");
    sweep_cmd->add_option("--rps", rps_arg, "comma-separated arrival rates")->required();
    sweep_cmd->add_option("--out", out_path, "write all reports as a JSON array");
    sweep_cmd->add_option("--trace", trace_arg, "override input trace CSV path");

    CLI::Option* analyze_seed =
        analyze_cmd->add_option("--seed", seed_arg, "override config seed");
    analyze_cmd->add_option("--config", config_path, "experiment config JSON path");
    analyze_cmd->add_option("--out", out_path, "write study JSON");
    analyze_cmd->add_option("--trace", trace_arg, "override input trace CSV path");

    compare_cmd->add_option("reports", compare_inputs, "report JSON files")
        ->required()
        ->expected(-1);
    compare_cmd->add_option("--out", out_path, "write comparison JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        auto load_config = [&](CLI::Option* seed_opt) {
            ExperimentConfig cfg = config_path.empty()
                                       ? default_config()
                                       : ExperimentConfig::from_json_file(config_path);
            if (seed_opt != nullptr && seed_opt->count() > 0) cfg.seed = seed_arg;
            if (!policy_arg.empty()) {
                auto p = policy_from_name(policy_arg);
                if (!p) throw ConfigError("unknown policy '" + policy_arg + "'");
                cfg.policy = *p;
            }
            if (!trace_arg.empty()) cfg.trace_path = trace_arg;
            return cfg;
        };

        if (run_cmd->parsed()) {
            ExperimentConfig cfg = load_config(run_seed);
            if (run_rps->count() > 0) cfg.rps = parse_rps_single(rps_arg);
            MetricsReport rep = run_experiment(cfg);
            std::cout << rep.summary_table();
            if (!out_path.empty()) {
                if (out_path.ends_with(".csv")) {
                    write_text_file(out_path, rep.to_csv());
                } else {
                    write_text_file(out_path, rep.to_json().dump(2) + "\n");
                }
                std::cout << "wrote " << out_path << "\n";
            }
        } else if (sweep_cmd->parsed()) {
            ExperimentConfig cfg = load_config(sweep_seed);
            std::vector<double> rates = parse_rps_list(rps_arg);
            nlohmann::json all = nlohmann::json::array();
            char line[160];
            std::snprintf(line, sizeof(line), "%10s %10s %12s %12s %12s %10s %8s\n", "rps",
                          "requests", "mean_lat_ms", "p99_lat_ms", "p99_ttft_ms", "thru_rps",
                          "hit");
            std::cout << line;
            for (double r : rates) {
                cfg.rps = r;
                MetricsReport rep = run_experiment(cfg);
                std::snprintf(line, sizeof(line),
                              "%10.3f %10lld %12.3f %12.3f %12.3f %10.3f %8.4f\n", r,
                              static_cast<long long>(rep.requests), rep.latency_ms.mean,
                              rep.latency_ms.p99, rep.ttft_ms.p99, rep.throughput_rps,
                              rep.hit_fraction);
                std::cout << line;
                all.push_back(rep.to_json());
            }
            if (!out_path.empty()) {
                write_text_file(out_path, all.dump(2) + "\n");
                std::cout << "wrote " << out_path << "\n";
            }
        } else if (analyze_cmd->parsed()) {
            ExperimentConfig cfg = load_config(analyze_seed);
            Corpus corpus = load_experiment_corpus(cfg);
            StudyReport st = analyze(corpus);
            std::cout << study_table(st);
            if (!out_path.empty()) {
                write_text_file(out_path, study_json(st).dump(2) + "\n");
                std::cout << "wrote " << out_path << "\n";
            }
        } else if (compare_cmd->parsed()) {
            std::vector<MetricsReport> reports;
            reports.reserve(compare_inputs.size());
            for (const std::string& path : compare_inputs) {
                reports.push_back(MetricsReport::from_json_file(path));
            }
            CompareReport cmp = compare_reports(reports);
            std::cout << cmp.to_table();
            if (!out_path.empty()) {
                write_text_file(out_path, cmp.to_json().dump(2) + "\n");
                std::cout << "wrote " << out_path << "\n";
            }
        } else {
            return run_selftest();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
